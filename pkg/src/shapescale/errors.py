"""Exception types raised across the package."""


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class PresetError(ValueError):
    """A shape&scale preset entry cannot produce an integral mask lattice."""


class EmptyLatticeError(ValueError):
    pass


class InvalidTargetError(ValueError):
    pass


class CapacityError(ValueError):
    """More targets than queries available for assignment."""


class NumericalGuardError(ArithmeticError):
    pass


class GradCheckError(ArithmeticError):
    pass


class LabelParseError(ValueError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class NonFiniteLossError(ArithmeticError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
