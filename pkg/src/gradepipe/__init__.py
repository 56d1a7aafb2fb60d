"""gradepipe: human-in-the-loop grading pipeline for scanned handwritten tests."""

__version__ = "0.1.0"
