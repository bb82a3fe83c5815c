"""Exception types shared across the library.

Every error the library raises deliberately derives from ElaError so callers
(and the CLI) can separate contract violations from genuine bugs.
"""


class ElaError(Exception):
    pass


class ShapeError(ElaError):
    """Operand dimensions violate an operation's contract."""


class FinitenessError(ElaError):
    """A value that must be finite contains NaN or Inf."""


class UsageError(ElaError):
    """An API was called outside its contract (bad argument, wrong tape, ...)."""


class ConfigError(ElaError):
    """A configuration is internally inconsistent (e.g. top_k > n_experts)."""


class InputError(ElaError):
    """External input (corpus file, token ids) is unusable."""


class FormatError(ElaError):
    """A serialized artifact (checkpoint) is corrupt or has the wrong version."""


class DegenerateRowError(ElaError):
    """An attention row's kernel mass is below the epsilon guard."""

    def __init__(self, batch: int, position: int, row_sum: float):
        self.batch = batch
        self.position = position
        self.row_sum = row_sum
        super().__init__(
            f"degenerate attention row: batch {batch}, position {position}, "
            f"row sum {row_sum:.3e} below epsilon"
        )


class StalenessError(ElaError):
    """A DecodeState was advanced with a stabilization shift it was not built with."""
