from .attention import PrefixMultiheadAttention, scaled_prefix_attention
from .checkpoint import load_checkpoint, save_checkpoint
from .decoding import GenerationOutput, decode_beam, decode_greedy
from .training import fit, make_optimizer, train_step
from .transformer import (
    Batch,
    ModelConfig,
    RuleCapModel,
    Variant,
    collate,
    count_parameters,
    placement_layers,
    rule_features,
    set_variant,
)
