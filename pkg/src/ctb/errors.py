"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
anything else -> 3 (internal).
"""


class UsageError(Exception):
    """Bad command-line usage or an unusable parameter combination."""


class DataError(Exception):
    """Malformed or inconsistent input data (files, headers, annotation rows)."""


class StageError(Exception):
    """Failure inside a named pipeline stage; wraps the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
