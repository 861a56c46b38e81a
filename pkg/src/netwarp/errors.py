"""Exception types shared across the package."""


class NetwarpError(Exception):
    pass


class DimensionError(NetwarpError, ValueError):
    """Shape/size mismatch between operands."""


class ValidationError(NetwarpError, ValueError):
    """Invalid argument value or inconsistent input data."""


class FormatError(NetwarpError, ValueError):
    """Malformed on-disk file (bad magic, truncation, dim mismatch)."""


class ConfigError(NetwarpError, ValueError):
    """Bad experiment configuration (unknown key, missing path, bad layer name)."""
