"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, raised before any training happens."""


class InputError(ValueError):
    """Malformed input passed to a model or loss (bad shapes, empty batches)."""


class StreamFaultError(RuntimeError):
    """A non-finite loss or sample showed up in the stream."""


class EmptySamplesError(InputError):
    """Importance estimation was asked to run on zero samples."""
