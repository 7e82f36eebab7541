from .network import (
    InvalidInputSizeError,
    LayerSpec,
    Network,
    NetworkSpec,
    ParamCount,
    ParamStore,
    ShapeMismatchError,
    TraceMismatchError,
    build_network,
    build_spec,
    param_count,
    predict_grades,
    shape_chain,
)

__all__ = [
    "InvalidInputSizeError",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "ParamCount",
    "ParamStore",
    "ShapeMismatchError",
    "TraceMismatchError",
    "build_network",
    "build_spec",
    "param_count",
    "predict_grades",
    "shape_chain",
]
