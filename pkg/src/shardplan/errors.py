"""Exception types raised across shardplan."""


class ShardplanError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class BadInput(ShardplanError):
    pass


class MalformedBatch(BadInput):
    pass


class BadSpec(BadInput):
    pass


class UnknownTable(BadInput):
    pass


class ShapeMismatch(BadInput):
    pass


class CheckpointError(BadInput):
    pass


class Infeasible(ShardplanError):
    pass


class MemoryViolation(Infeasible):
    def __init__(self, devices, used, cap):
        self.devices = list(devices)
        self.used = list(used)
        self.cap = cap
        super().__init__(
            f"memory cap {cap:.4g} GB exceeded on devices {self.devices} "
            f"(used {[round(u, 4) for u in self.used]})"
        )


class TooLarge(ShardplanError):
    pass


class IllegalAction(ShardplanError):
    pass


class NoLegalAction(Infeasible):
    pass
