"""Fine-grained urban flow inference: the PLGF network and the DualFocal loss."""

from .context import ContextEmbedding, ExternalFactors, embed_factors, encode_factors
from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetLoadError,
    NonFiniteLossError,
    PLGFError,
    RejectedInputError,
)
from .flow import FlowMap, GridRelation, MetricReport, aggregate, compute_metrics, conservation_residual
from .losses import (
    LossBreakdown,
    LossConfig,
    dual_scale_loss,
    dualfocal_elementwise,
    dualfocal_gradient_oracle,
    dualfocal_loss,
)
from .model import PLGF, ModelConfig, SimpleSRNet, build_model, count_parameters

__version__ = "0.1.0"
