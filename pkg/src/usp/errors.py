"""Error hierarchy shared by all stages.

Each error class carries the process exit code the CLI maps it to:
config problems exit 2, numeric failures (NaN/non-convergence) exit 3,
digest or fingerprint mismatches exit 4.
"""


class UspError(Exception):
    exit_code = 1


class ConfigError(UspError):
    """Bad or inconsistent configuration (unknown keys, invalid values)."""

    exit_code = 2


class NumericFailure(UspError):
    """NaN loss, non-convergence, or other numeric breakdown."""

    exit_code = 3


class DigestMismatch(UspError):
    """A consumer was handed an artifact whose fingerprint does not match."""

    exit_code = 4
