"""Exception hierarchy shared across the simulator."""


class DiverseFLError(Exception):
    pass


class IdxFormatError(DiverseFLError, ValueError):
    """Base class for IDX container parse failures."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CapacityError(DiverseFLError, ValueError):
    """Too few updates for the requested robust rule."""


class SealError(DiverseFLError):
    """A sealed blob failed to open (wrong key, tampering, bad layout)."""


class DuplicateProvisionError(DiverseFLError):
    pass


class UnknownClientError(DiverseFLError, KeyError):
    pass


class NoSurvivorsError(DiverseFLError):
    """Every participating client was flagged; the model stays frozen."""

    def __init__(self, theta, decisions):
        super().__init__(f"all {len(decisions)} clients flagged as faulty")
        self.theta = theta
        self.decisions = decisions


class DomainError(DiverseFLError, ValueError):
    """Argument outside a formula's mathematical domain."""


class ConfigError(DiverseFLError, ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))
