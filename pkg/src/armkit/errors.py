class ArmkitError(Exception):
    """Base class for all armkit errors."""


class DimensionError(ArmkitError, ValueError):
    pass


class ConfigurationError(ArmkitError, ValueError):
    pass


class ContractError(ArmkitError, RuntimeError):
    pass
