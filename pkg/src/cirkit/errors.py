"""Exception hierarchy shared by all cirkit modules.

Each class maps onto one CLI exit code so subcommands can translate
failures uniformly (see cli.py).
"""


class CirkitError(Exception):
    """Base class for all cirkit failures."""

    exit_code = 1


class ConfigError(CirkitError):
    """Invalid configuration or usage (exit code 2)."""

    exit_code = 2


class DataFormatError(CirkitError):
    """Malformed or inconsistent data files (exit code 3)."""

    exit_code = 3


class NumericsError(CirkitError):
    """Numerical failure such as a NaN loss or degenerate vector (exit code 4)."""

    exit_code = 4


class ProviderError(CirkitError):
    """Caption provider transport or contract failure (exit code 5)."""

    exit_code = 5
