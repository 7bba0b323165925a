"""Exception hierarchy shared by all modules."""


class MfsmpError(Exception):
    """Base class for toolkit errors."""


class IllPosedProblemError(MfsmpError):
    """A coefficient returned a non-finite value at a probe point."""


class GridMismatchError(MfsmpError):
    pass


class ControlSetError(MfsmpError):
    """A control value is not a member of the problem's control set."""


class SpikeUnresolvableError(MfsmpError):
    pass


class SimulationError(MfsmpError):
    def __init__(self, particle: int, step: int):
        super().__init__(f"non-finite state at particle {particle}, step {step}")
        self.particle = particle
        self.step = step


class RegressionError(MfsmpError):
    pass


class SeedMismatchError(MfsmpError):
    pass


class NotLQError(MfsmpError):
    pass


class ConfigError(MfsmpError):
    pass
