"""Three-regime network execution: float, fake-quantized, integer."""

from .imageio import CROP_TOP, crop_input, read_pgm, write_pgm
from .kernels import AccumulatorOverflow
from .network import (
    INPUT_SCALE,
    QNetwork,
    QTensor,
    Signedness,
    Stage,
    infer_fakequant,
    infer_fp32,
    infer_int8,
    random_network,
    run_fakequant,
    run_fp32,
    run_int8,
)
from .quantize import (
    CalibrationError,
    RequantError,
    dyadic_approx,
    fake_quantize,
    integerize,
    quantize_pipeline,
)
from .storage import WeightFormatError, load_network, manifest_text, save_network

__all__ = [
    "AccumulatorOverflow",
    "CalibrationError",
    "CROP_TOP",
    "INPUT_SCALE",
    "QNetwork",
    "QTensor",
    "RequantError",
    "Signedness",
    "Stage",
    "WeightFormatError",
    "crop_input",
    "dyadic_approx",
    "fake_quantize",
    "infer_fakequant",
    "infer_fp32",
    "infer_int8",
    "integerize",
    "load_network",
    "manifest_text",
    "quantize_pipeline",
    "random_network",
    "read_pgm",
    "run_fakequant",
    "run_fp32",
    "run_int8",
    "save_network",
    "write_pgm",
]
