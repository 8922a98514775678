class GgpfnError(Exception):
    pass


class ShapeError(GgpfnError, ValueError):
    pass


class DepthError(ShapeError):
    """Depth-valid convolution or encoder received the wrong number of slices."""


class AutogradError(GgpfnError, RuntimeError):
    pass


class ConfigError(GgpfnError, ValueError):
    pass


class ParseError(GgpfnError, ValueError):
    pass


class UnsupportedFormatError(ParseError):
    pass


class DecompositionError(ShapeError):
    pass
