"""Exception types shared across the package."""


class KvEvictError(Exception):
    """Base class for package-specific failures."""


class ConfigurationError(KvEvictError):
    """Budget, scope, or model configuration that cannot be satisfied."""


class CacheFullError(KvEvictError):
    """Contract violation: append attempted on a cache already at budget."""


class TraceFormatError(KvEvictError):
    """Malformed or truncated attention-trace file."""
