"""Two alternating role-specific language models over one shared
key/value memory, with training, decoding, evaluation, and serving.
"""

from .dialog_model import ArdmParams, DialogTooLongError, Turn, dialog_nll, \
    load_bundle, make_dialog, save_bundle
from .decoder import PRESETS, SamplerConfig, batch_decode_filtered, \
    decode_eval_mode, self_play
from .model import CapacityError, KVMemory, ModelConfig
from .tokenizer import SYSTEM, USER, Vocab, train_bpe
from .trainer import TrainConfig, train

__all__ = [
    "ArdmParams", "CapacityError", "DialogTooLongError", "KVMemory",
    "ModelConfig", "PRESETS", "SamplerConfig", "SYSTEM", "TrainConfig",
    "Turn", "USER", "Vocab", "batch_decode_filtered", "decode_eval_mode",
    "dialog_nll", "load_bundle", "make_dialog", "save_bundle", "self_play",
    "train", "train_bpe",
]
