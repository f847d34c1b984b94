class ZslError(Exception):
    """Base class for errors raised by zslmap."""


class DimensionError(ZslError, ValueError):
    """Matrix shapes do not conform."""


class DefinitenessError(ZslError, ValueError):
    """A matrix expected to be (semi)definite is not, or a solve is singular."""


class DatasetError(ZslError, ValueError):
    """A dataset or manifest violates its invariants."""
