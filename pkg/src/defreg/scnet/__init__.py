from defreg.scnet.model import (
    ScNetConfig,
    ScNetModel,
    aggregate,
    classify,
    encode_input,
    forward,
    run_forward,
    backward_through,
    sca_self_attention,
)
from defreg.scnet.params_io import load_params, read_descriptor, save_params

__all__ = [
    "ScNetConfig",
    "ScNetModel",
    "aggregate",
    "classify",
    "encode_input",
    "forward",
    "run_forward",
    "backward_through",
    "sca_self_attention",
    "load_params",
    "read_descriptor",
    "save_params",
]
