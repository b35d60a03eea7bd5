"""rawkit: invertible model-based camera pipeline.

Forward rendering of packed Bayer RAW to display RGB, analytic reversal of
that rendering back to RAW, parameter fitting from paired data, dataset
packing, and RAW-domain scoring.
"""

from .model import (
    BayerPattern,
    DimensionError,
    GammaCurve,
    IspParams,
    ParamError,
    PipelineError,
    RawImage,
    RgbImage,
    validate_params,
)

__version__ = "0.1.0"

__all__ = [
    "BayerPattern",
    "DimensionError",
    "GammaCurve",
    "IspParams",
    "ParamError",
    "PipelineError",
    "RawImage",
    "RgbImage",
    "validate_params",
    "__version__",
]
