"""Exception hierarchy shared across the package."""


class KppoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(KppoError):
    """Invalid run configuration (bad values, missing files, missing credentials)."""


class ContractError(KppoError):
    """Two pieces of data that must agree (e.g. aligned instance lists) do not."""
