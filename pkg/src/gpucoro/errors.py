"""Exception types raised across the simulator."""


class GpuCoroError(Exception):
    pass


class InvalidTier(GpuCoroError, ValueError):
    pass


class BindConflict(GpuCoroError):
    """Target physical context already hosts a virtual context."""


class DoubleBind(GpuCoroError):
    """Virtual context is already mapped to a physical context."""


class CausalityViolation(GpuCoroError):
    pass


class EventBudgetExceeded(GpuCoroError):
    pass


class PoolExhausted(GpuCoroError):
    pass


class NoOpPreempt(GpuCoroError):
    """Preempt signal sent to an unbound physical context."""


class TraceViolation(GpuCoroError):
    """A kernel touches a region outside its virtual context's working set."""


class PolicyError(GpuCoroError):
    pass


class ConfigError(GpuCoroError, ValueError):
    pass


class PlanMismatch(GpuCoroError, ValueError):
    pass


class InvalidSplit(GpuCoroError, ValueError):
    pass


class ParseError(GpuCoroError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoEffect(GpuCoroError):
    """Fault injected into a target with nothing bound to it."""
