"""Multi-stream cross-attention fusion for context-aware emotion recognition.

Pure numpy: the package carries its own reverse-mode autodiff, attention
encoders, training loop, metrics and feature-bundle I/O.
"""

from .attention import MhaParams, multi_head_attention, scaled_dot_attention
from .config import PRESETS, ConfigError, load_run_config
from .data import Bundle, SyntheticSpec, gen_synthetic, read_bundle, split_dataset, write_bundle
from .encoders import MHA_ENC, SAG_MHA_ENC, CmEncBlock, cm_enc_forward
from .metrics import EvalReport, average_precision, mean_ap
from .model import McfConfig, McfModel, McfOutput, StreamBatch, mcf_forward
from .tensor import DimensionError, InvalidMaskError, Parameter, ParameterError, RngState, Tensor
from .training import TrainConfig, TrainHistory, fit

__version__ = "0.1.0"
