"""Exception types raised across the toolkit."""


class QwtError(Exception):
    pass


class ShapeError(QwtError, ValueError):
    pass


class ConfigError(QwtError, ValueError):
    pass


class StateError(QwtError, RuntimeError):
    pass


class DomainError(QwtError, ValueError):
    pass


class SingularSystemError(QwtError, ArithmeticError):
    pass


class TrainingError(QwtError, RuntimeError):
    pass


class ModelIOError(QwtError, OSError):
    pass


class LoadError(QwtError, ValueError):
    pass
