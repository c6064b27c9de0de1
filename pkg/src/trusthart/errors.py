"""Exception types raised across the simulator."""


class SimError(Exception):
    """Base class for every simulator error."""


class InvalidImage(SimError):
    pass


class InvalidPoint(SimError):
    pass


class Saturated(SimError):
    pass


class TargetHalted(SimError):
    pass


class IpiDisabled(SimError):
    """TH to enclave-hart interrupts are switched off on this machine."""


class MemoryFault(SimError):
    pass


class BootFailure(SimError):
    def __init__(self, stage, reason=""):
        self.stage = stage
        self.reason = reason
        super().__init__(f"boot failed at {stage}: {reason}" if reason else f"boot failed at {stage}")


class ResourceExhausted(SimError):
    pass


class PoolExhausted(SimError):
    pass


class NoSuchEnclave(SimError):
    pass


class EnclaveDestroyed(SimError):
    pass


class BadState(SimError):
    pass


class DataTooLarge(SimError):
    pass


class ChannelUnknown(SimError):
    pass


class BadRequest(SimError):
    pass


class AccessDenied(SimError):
    pass


class NonExtractable(SimError):
    pass


class WrongKeyType(SimError):
    pass


class NoSuchKey(SimError):
    pass


class MalformedReport(SimError):
    pass


class TamperDetected(SimError):
    pass


class RollbackDetected(SimError):
    pass


class NoRequest(SimError):
    pass


class ConfigError(SimError):
    pass
