"""Exception types shared across the package."""


class BeamsimError(Exception):
    """Base class for all package errors."""


class ConfigError(BeamsimError):
    """Invalid configuration.  Collects every violation, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class WavFormatError(BeamsimError):
    """Unreadable, unsupported or corrupt WAV data."""
