class InvalidArgument(ValueError):
    pass


class ModelConstructionError(ValueError):
    pass


class ConfigError(ValueError):
    """Bad or unknown configuration keys, digest mismatches, missing inputs."""


class FormatError(ValueError):
    """A file on disk does not have the expected layout or size."""


class NumericalFailure(ArithmeticError):
    pass


class ConflictError(ValueError):
    pass
