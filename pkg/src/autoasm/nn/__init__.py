from .checkpoint import CorruptFile, VersionMismatch, load_params, save_params
from .nets import (
    NetConfig,
    PolicyNet,
    ValueNet,
    entropy,
    loss_hybrid,
    loss_imitation,
    loss_policy_gradient,
    loss_value,
    policy_forward,
    sample_action,
    tempered_probs,
    value_forward,
)
from .optim import Adam, ShapeMismatch, optimizer_step
from .vocab import VOCAB, VOCAB_SIZE, encode_batch, encode_state

__all__ = [
    "Adam", "CorruptFile", "NetConfig", "PolicyNet", "ShapeMismatch", "VOCAB", "VOCAB_SIZE", "ValueNet",
    "VersionMismatch", "encode_batch", "encode_state", "entropy", "load_params", "loss_hybrid",
    "loss_imitation", "loss_policy_gradient", "loss_value", "optimizer_step", "policy_forward",
    "sample_action", "save_params", "tempered_probs", "value_forward",
]
