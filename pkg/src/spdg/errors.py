"""Exception types shared across the package.

Every error raised by public entry points derives from SpdgError so the CLI
can map failures to a machine-readable JSON payload on stderr.
"""


class SpdgError(Exception):
    code = "error"


class ShapeError(SpdgError):
    code = "shape_error"


class DegenerateVectorError(SpdgError):
    code = "degenerate_vector"


class NormalizationError(SpdgError):
    code = "unnormalized_input"


class TokenizeError(SpdgError):
    code = "tokenize_error"


class BatchCompositionError(SpdgError):
    code = "batch_composition"


class ConfigError(SpdgError):
    code = "config_error"


class FormatError(SpdgError):
    code = "format_error"


class TrainingDiverged(SpdgError):
    code = "training_diverged"


class GradCheckError(SpdgError):
    code = "grad_check"
