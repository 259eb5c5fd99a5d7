"""Exception hierarchy shared by every mmasr module."""


class MMASRError(Exception):
    """Base class; the CLI prints ``type(err).__name__`` as the error class."""


class DimensionError(MMASRError, ValueError):
    pass


class ConfigError(MMASRError, ValueError):
    pass


class ContractError(MMASRError, RuntimeError):
    pass


class RangeError(MMASRError, IndexError):
    pass


class FormatError(MMASRError, ValueError):
    pass


class EmptyInputError(MMASRError, ValueError):
    pass


class ManifestError(FormatError):
    """Malformed manifest line; carries the 1-based line number."""

    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class ResolutionError(MMASRError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DivergenceError(MMASRError, FloatingPointError):
    pass
