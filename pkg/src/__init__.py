# AC Zeeman microwave amplitude sensing toolkit
__version__ = "0.1.0"

from .logging_config import setup_logging
from .errors import AczError, ConfigError, ConvergenceError, DatasetError, ParameterDomainError, SingularDesignError

__all__ = ['__version__', 'setup_logging', 'AczError', 'ConfigError', 'ConvergenceError', 'DatasetError',
           'ParameterDomainError', 'SingularDesignError']
