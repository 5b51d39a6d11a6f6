"""Exception types shared across the toolkit."""


class ToolError(Exception):
    """Base class for all errors raised by this package."""


# isa
class InvalidRegister(ToolError):
    pass


class InvalidConfig(ToolError):
    pass


class UnknownInstruction(ToolError):
    pass


# datapath
class LaneOverflow(ToolError):
    pass


class TooManyValues(ToolError):
    pass


class ConfigMismatch(ToolError):
    pass


# simulator
class BudgetExceeded(ToolError):
    pass


class MemoryOutOfBounds(ToolError):
    pass


class WorkloadMismatch(ToolError):
    pass


# kernels / quantizer
class ShapeError(ToolError):
    pass


class ConfigError(ToolError):
    pass


class EmptySample(ToolError):
    pass


class InvalidRate(ToolError):
    pass


# dse
class InvalidReference(ToolError):
    pass


# power model
class VoltageOutOfRange(ToolError):
    pass


class NoSignChange(ToolError):
    pass


class InvalidVoltage(ToolError):
    pass


# cli / io
class ManifestError(ToolError):
    pass


class IoError(ToolError):
    pass
