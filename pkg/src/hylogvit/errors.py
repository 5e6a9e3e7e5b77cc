"""Exceptions shared across file formats and the CLI."""


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite loss at step {step}" + (f": {detail}" if detail else ""))
