"""Exception types raised across the package."""


class BlindpatchError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(BlindpatchError):
    """Invalid or inconsistent configuration."""


class PatchLoadError(BlindpatchError):
    """A patch file could not be read or decoded."""


class IntegrityError(BlindpatchError):
    """Persisted data fails its digest or header check."""


class RegistrationError(BlindpatchError):
    """Duplicate adapter registration."""


class AdapterNotFoundError(BlindpatchError):
    """Requested adapter name is not registered."""
