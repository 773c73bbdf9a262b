from .checkpoint import (CheckpointError, checkpoint_hash, decode_arrays, encode_arrays,
                         load_checkpoint, save_checkpoint)
from .gradcheck import NonReproducibleLoss, finite_diff_grad_check
from .layers import (AttentionLayer, AttentionSpec, DegenerateMaskError, LayerNorm, Linear,
                     MultiHeadAttention, NonFiniteError, SeededModule, TransformerBlock,
                     changed_parameters, freeze, scaled_dot_attention, snapshot)
from .optim import AdamW, adamw_step, warmup_cosine
from .rng import derive_seed, seeded_init

__all__ = [
    "AdamW", "AttentionLayer", "AttentionSpec", "CheckpointError", "DegenerateMaskError",
    "LayerNorm", "Linear", "MultiHeadAttention", "NonFiniteError", "NonReproducibleLoss",
    "SeededModule", "TransformerBlock", "adamw_step", "changed_parameters", "checkpoint_hash",
    "decode_arrays", "derive_seed", "encode_arrays", "finite_diff_grad_check", "freeze",
    "load_checkpoint", "save_checkpoint", "scaled_dot_attention", "seeded_init", "snapshot",
    "warmup_cosine",
]
