"""Exception types shared across the package.

Plain input-validation failures raise ValueError; the classes here cover
conditions a caller may want to branch on (file format problems, numeric
blow-ups, unsupported oracle instances, bad experiment configs).
"""


class FormatError(Exception):
    """A dataset or checkpoint file is malformed or truncated."""


class UnsupportedVersionError(FormatError):
    """The file carries a version this build cannot read."""


class UnsupportedInstanceError(Exception):
    """The exact oracle cannot handle this problem instance."""


class NumericalError(Exception):
    """Training or evaluation produced a non-finite quantity."""


class ConfigError(Exception):
    """An experiment config failed validation."""
