class FclVitError(Exception):
    pass


class DimensionError(FclVitError, ValueError):
    """Operand shapes do not line up."""


class ContractError(FclVitError):
    """A caller broke an operation's precondition (wrong layout, non-scalar loss, ...)."""


class ProtocolError(FclVitError):
    """Continual-learning protocol violated: class overlap, training an unfrozen backbone, ..."""


class FormatError(FclVitError):
    """Malformed on-disk input (dataset records, manifests, checkpoints)."""


class ConfigError(FclVitError, ValueError):
    pass
