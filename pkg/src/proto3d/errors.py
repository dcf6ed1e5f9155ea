"""Exception types raised across the package."""


class Proto3DError(Exception):
    """Base class for all package errors."""


class BehindCamera(Proto3DError, ValueError):
    pass


class SpecMismatch(Proto3DError, ValueError):
    pass


class DegenerateBox(Proto3DError, ValueError):
    pass


class EmptyDictionary(Proto3DError, ValueError):
    pass


class NoValidProposals(Proto3DError, ValueError):
    pass


class NoPositives(Proto3DError, ValueError):
    pass


class NoNegatives(Proto3DError, ValueError):
    pass


class EmptyMatrix(Proto3DError, ValueError):
    pass


class EmptyDataset(Proto3DError, ValueError):
    pass


class PlacementFailure(Proto3DError, RuntimeError):
    pass


class ConfigError(Proto3DError, ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
