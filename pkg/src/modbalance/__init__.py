"""Incomplete multi-modal segmentation with dynamic modality rebalancing.

Library pieces:
  presence / scenes / corpus  synthetic incomplete multi-modal corpora
  fusion / network            availability-masked attention fusion network
  distill                     relation + prototype distillation losses
  monitor                     gap-EMA controller, loss weights, grad scaling
  losses / metrics            task objective and DSC/HD evaluation
  training / plots / cli      run loops, reports, figures, command line
"""

from .corpus import generate_corpus, read_corpus, write_corpus
from .distill import Distiller, channel_covariance, class_prototypes
from .fusion import MaskedAttentionFusion, MaskedMultiheadAttention
from .losses import LossBreakdown, deep_supervision_loss, dice_ce_loss
from .metrics import MetricsReport, dice_score, hausdorff_distance, modality_combinations
from .monitor import GapTracker, adaptive_decay, counteractive_weights
from .network import MultiModalSegNet, NetConfig
from .presence import MissingProtocol, PresenceMatrix, sample_presence
from .scenes import ModalitySample, SceneSpec, default_scene_spec, render_sample
from .training import RunConfig, evaluate, train

__version__ = "0.1.0"
