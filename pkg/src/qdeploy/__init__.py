"""Deploy-first int8 quantization toolchain.

Describe a network once against the int8 operator library; get a deployable
fixed-point execution plan and a bit-exact fake-quantized trainable twin.
"""

from .autodiff import Graph, TrainMode, backward, forward
from .blob import ParameterBlob, export_params, parse_blob
from .data import (
    ImageDataset,
    PreprocStats,
    SynthSpec,
    compute_preproc_stats,
    load_cifar10,
    mean_image_subtract,
    per_image_standardization,
    synth_dataset,
)
from .engine import (
    ConvParams,
    FCParams,
    PreprocParams,
    conv2d_q7,
    derive_shifts,
    fully_connected_q7,
    matmul_asym,
    maxpool_q7,
    preprocess_q7,
    relu_q7,
    requantize_dynamic,
    round_shift,
)
from .errors import (
    DataFormatError,
    FormatError,
    InvalidInputError,
    ManifestError,
    NumericError,
    PlanError,
    QDeployError,
    StateError,
    TrainingDiverged,
)
from .manifest import ModelManifest, builtin_manifest, cmsis_cifar10, load_manifest, parse_manifest
from .plan import ExecutionPlan, build_plan, deploy_plan, load_params, run_plan
from .pretrained import import_pretrained, post_training_quantize
from .quant import (
    AsymmetricQParams,
    QFormat,
    QTensor,
    RangeTracker,
    choose_qformat,
    dequantize,
    fake_quant,
    quantize,
    quantize_asymmetric,
    update_range,
)
from .train import adam_step, make_optimizer, sgd_step, train_loop
from .trainable import gen_trainable
from .validate import ValidationReport, validate_bitexact

__version__ = "0.1.0"
