"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid run configuration or operation arguments."""


class FormatError(ValueError):
    """Malformed binary file.

    `offset` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
