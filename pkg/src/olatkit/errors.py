"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation/contract problems exit 2,
I/O and container-format problems exit 3, numeric failures exit 4.
"""


class OlatkitError(Exception):
    """Base class for all package errors."""


class FormatError(OlatkitError):
    """A binary container (HDR, PFM, checkpoint, manifest) is malformed."""


class TruncatedDataError(FormatError):
    """Input ended mid-structure; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(FormatError):
    """The container is recognized but a variant we do not handle."""


class ValidationError(OlatkitError):
    """Input data violates a documented invariant."""


class ContractError(OlatkitError):
    """API misuse: mismatched rigs, dimensions, or incompatible arguments."""


class InsufficientTrackingError(ValidationError):
    """A take does not contain enough tracking frames to align."""


class TrainingDivergedError(OlatkitError):
    """Training hit a non-finite loss.

    Carries the iteration index and a raw parameter snapshot (dict of arrays;
    deliberately unvalidated, since a diverged state is usually non-finite).
    """

    def __init__(self, iteration: int, snapshot=None):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.snapshot = snapshot
