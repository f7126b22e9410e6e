"""Exception hierarchy shared by all `smart_bird` modules.

Every exception carries the process exit code that :mod:`smart_bird.cli` maps it to, so the
library never calls `sys.exit` itself"""


class SmartBirdError(Exception):
    """Base class of all errors raised deliberately by `smart_bird`"""

    exit_code = 1


class ConfigError(SmartBirdError, ValueError):
    """Invalid configuration value, unknown configuration key, or unusable input path"""

    exit_code = 2


class ShapeError(SmartBirdError, ValueError):
    """Operands of a tensor operation have incompatible shapes"""

    exit_code = 2


class EmptyVocabError(SmartBirdError, ValueError):
    """A vocabulary was requested from a corpus without any tokens"""

    exit_code = 2


class DivergenceError(SmartBirdError, ArithmeticError):
    """Training produced a non-finite loss"""

    exit_code = 3


class UndefinedCorrelationError(SmartBirdError, ValueError):
    """Pearson correlation is undefined because one input has zero variance"""

    exit_code = 3


class ArtifactMismatchError(SmartBirdError):
    """A checkpoint does not match the vocabulary, configuration or model it is loaded into"""

    exit_code = 4
