"""1-bit quantization-aware training of JetFormer and model-size accounting.

The attention projections (query, key, value, output) and both FFN layers
of every block become BitLinear layers; the input embedding and the
classification head stay full precision. Quantized models are trained
from scratch with a plateau schedule.
"""

from dataclasses import replace

from .bitlinear import absmax_quant, bitlinear_forward, pack_signs, unpack_signs, weight_quant
from .checkpoint import to_bytes
from .model import build, is_bitlinear
from .training import TrainConfig, train

__all__ = [
    "QAT_CONFIG",
    "absmax_quant",
    "bitlinear_forward",
    "bitlinear_layers",
    "model_size",
    "pack_signs",
    "quantize_model",
    "size_report",
    "unpack_signs",
    "weight_quant",
]

QAT_CONFIG = TrainConfig(
    epochs=80,
    lr=8e-4,
    scheduler="plateau",
    plateau_factor=0.8,
    plateau_patience=5,
    plateau_min_lr=1e-4,
    early_stop_patience=80,
)


def bitlinear_layers(state):
    """Names of the weights that run as BitLinear in ``state``."""
    if not state.config.quantized:
        return []
    return [name for name in state.params if is_bitlinear(name)]


def model_size(state, fmt="packed"):
    """Serialized size in bytes.

    ``fmt="f32"`` stores every scalar at 32 bits; ``"packed"`` stores
    BitLinear weights at one bit each plus a 32-bit scale.
    """
    return len(to_bytes(state, fmt))


def size_report(config, seed=0):
    """Full-precision vs packed size of an untrained model of ``config``."""
    full = model_size(build(replace(config, quantized=False), seed), "f32")
    packed = model_size(build(replace(config, quantized=True), seed), "packed")
    return {"full_bytes": full, "packed_bytes": packed, "reduction_pct": 100.0 * (1 - packed / full)}


def quantize_model(config, train_data, val_data, seed=0, cfg=None):
    """Build a BitLinear JetFormer for ``config`` and train it from scratch.

    Returns ``(best_state, history)``.
    """
    state = build(replace(config, quantized=True), seed)
    cfg = cfg or replace(QAT_CONFIG, seed=seed)
    return train(state, train_data, val_data, cfg)
