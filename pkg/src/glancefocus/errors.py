"""Exception hierarchy shared by every module.

Each class maps to a distinct CLI exit code (see ``cli.EXIT_CODES``).
"""


class GlanceFocusError(Exception):
    pass


class ConfigError(GlanceFocusError, ValueError):
    """Invalid or incomplete configuration, detected before work starts."""


class ContractError(GlanceFocusError, ValueError):
    """A caller violated an operation's precondition (shape, range, ...)."""


class TrainingError(GlanceFocusError, RuntimeError):
    """Non-finite loss or gradient during optimisation."""


class FormatError(GlanceFocusError, ValueError):
    """A dataset or checkpoint file is corrupt or has the wrong version."""
