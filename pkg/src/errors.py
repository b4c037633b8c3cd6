from typing import List, Optional, Union


class AczError(Exception):
    """Base class for every error raised by the package."""


class ParameterDomainError(AczError, ValueError):
    """An input lies outside the domain an operation is defined on."""


class ConvergenceError(AczError):
    """A numerical integrator or optimizer did not reach its tolerance."""


class SingularDesignError(AczError):
    """The measurement design carries no information about the parameter."""


class DatasetError(AczError):
    """A dataset on disk is missing, unreadable or inconsistent."""


class ConfigError(AczError):
    """Configuration failed validation.

    Collects every problem found instead of stopping at the first one, so
    the command line can print them all at once.
    """

    def __init__(self, issues: Union[str, List[str]], where: Optional[str] = None):
        if isinstance(issues, str):
            issues = [f"{where}: {issues}" if where else issues]
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))
