class PrescopeError(Exception):
    pass


class ConfigError(PrescopeError, ValueError):
    pass


class TraceFormatError(PrescopeError, ValueError):
    pass


class TraceIntegrityError(TraceFormatError):
    pass


class CalibrationError(PrescopeError, ValueError):
    pass


class ShapeMismatchError(PrescopeError, ValueError):
    pass


class InstanceTooLargeError(PrescopeError, ValueError):
    pass


class BufferOverflowError(PrescopeError, RuntimeError):
    pass


class UnknownScenarioError(PrescopeError, LookupError):
    pass


class CheckpointError(PrescopeError, ValueError):
    pass
