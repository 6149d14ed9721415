"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class UsageError(Exception):
    """Bad flags, bad config keys, or inconsistent options."""


class DataError(Exception):
    """Missing, corrupt, or incompatible dataset / checkpoint files."""


class NumericError(Exception):
    """Non-finite values or failed numeric validation."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; message carries both shapes."""

    def __init__(self, op: str, *shapes) -> None:
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
