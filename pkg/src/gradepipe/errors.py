"""Exception types shared across the pipeline.

Every stage-facing error derives from GradePipeError so the CLI can turn any
failure into a machine-readable summary with a stable code (the class name).
"""

from __future__ import annotations


class GradePipeError(Exception):
    """Base class for all pipeline errors."""


# -- sheet templates and alignment ------------------------------------------

class MalformedTemplate(GradePipeError):
    """Template document is missing fields or violates a basic invariant."""


class OverlapViolation(GradePipeError):
    """An answer box overlaps an identifying region."""


class DegenerateFiducials(GradePipeError):
    """Fewer than three fiducials, or all declared fiducials are collinear."""


class FiducialNotFound(GradePipeError):
    """Fewer than three registration markers detected on a scanned page."""


class ResidualTooLarge(GradePipeError):
    """Best-fit page transform leaves a reprojection error above tolerance."""


class OutOfBounds(GradePipeError):
    """A region or sampling disc falls outside the source image."""


# -- identifier codes ---------------------------------------------------------

class BudgetExhausted(GradePipeError):
    """Codebook construction ran out of proposal attempts."""


class EmptyCodebook(GradePipeError):
    """Correction requested against a codebook with no codes."""


# -- key bank -----------------------------------------------------------------

class MissingKey(GradePipeError):
    """A question directory lacks a question, solution, or grading key file."""


class KeyMismatch(GradePipeError):
    """Question, solution, and grading key do not share a question id."""


class LintError(GradePipeError):
    """A grading key failed lint with ERROR severity."""


# -- grader output contract ---------------------------------------------------

class MissingTotalLine(GradePipeError):
    """Completion contains no `Total: <integer>/10` line."""


class ScoreOutOfRange(GradePipeError):
    """Completion's total is outside 0..10."""


class MissingFlagLine(GradePipeError):
    """Completion contains no `Flag: 0|1` line."""


class ProviderUnavailable(GradePipeError):
    """Provider kept failing at the transport level after all retries."""


class ParseFailed(GradePipeError):
    """Provider kept returning malformed completions after all retries."""


# -- ledger -------------------------------------------------------------------

class UnknownStudent(GradePipeError):
    """Student number is not on the roster."""


class UnknownSubmission(GradePipeError):
    """Decision refers to a submission the job does not contain."""


class NoteRequired(GradePipeError):
    """OVERRIDE decisions must carry a non-empty note."""


class FinalScoreMismatch(GradePipeError):
    """ACCEPT decisions must keep the provisional score."""


class WrongPassCount(GradePipeError):
    """Score list length differs from the configured pass count."""


class UndecidedSubmissions(GradePipeError):
    """Strict export requires every submission to be decided."""


# -- analytics ----------------------------------------------------------------

class LengthMismatch(GradePipeError):
    """Paired score vectors differ in length."""


class DegenerateAgreement(GradePipeError):
    """Expected weighted disagreement is zero while observed is not."""


class MalformedTime(GradePipeError):
    """A timing value does not parse as mm:ss."""


class IncompletePair(GradePipeError):
    """An annotator/question block lacks its manual or digital record."""


class InsufficientData(GradePipeError):
    """Not enough observations for the requested statistic."""


# -- job plumbing -------------------------------------------------------------

class ConfigError(GradePipeError):
    """Job configuration is invalid or references missing paths."""


class JobStateError(GradePipeError):
    """Job directory is missing the outputs of a prerequisite stage."""
