"""Dynamic-rank LoRA with l1-sparse importance weights, on a from-scratch numpy autodiff stack."""

from .adapter import DynLoraAdapter, PruneReport, active_rank, delta_w, forward_adapted, init_adapter, merge, prune, soft_shrink_weights
from .config import TrainConfig, load_config, reference_profile
from .glyphgen import FAMILIES, GlyphDataset, generate_dataset, read_gly1, render_glyph, write_gly1
from .model import GlyphTransformer, GlyphTransformerConfig, init_params, patchify, reset_head
from .trainer import TaskSpec, train_sequential, train_task

__version__ = "0.1.0"
