"""1-bit weight / 8-bit activation linear layers (BitLinear).

Weights are centred by their mean ``alpha``, binarized with ``sign`` and
rescaled by ``beta = mean(|W|)``; activations are absmax-quantized to
integers in [-127, 127]. Both quantizers are simulated in float and wrapped
in a straight-through estimator so training updates the latent weights.
"""

import numpy as np

from .errors import ContractError
from .tensor import Tensor, linear, ste_wrap

ACT_LEVELS = 127


def binarize(x):
    """Elementwise sign with sign(0) = +1, as int8."""
    return np.where(x >= 0, 1, -1).astype(np.int8)


def weight_quant(weight):
    """Quantize a weight matrix to ``beta * sign(W - alpha)``.

    Returns
    -------
    alpha : float
        Mean of all entries of ``weight``.
    beta : float
        Mean absolute value of the *uncentred* weights.
    signs : np.ndarray of int8
        ``sign(W - alpha)`` with zero mapped to +1.
    dequantized : np.ndarray
        ``beta * signs`` as float64.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.size == 0:
        raise ContractError("weight_quant: empty weight matrix")
    alpha = float(w.mean())
    beta = float(np.abs(w).mean())
    signs = binarize(w - alpha)
    return alpha, beta, signs, beta * signs.astype(np.float64)


def absmax_quant(x):
    """Absmax 8-bit quantization of a whole tensor.

    Returns ``(x_q, x_deq)``: integers in [-127, 127] stored as float64 and
    their dequantized values ``max|x| / 127 * x_q``. An all-zero tensor passes
    through as zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError("absmax_quant: empty tensor")
    peak = float(np.abs(x).max())
    if peak == 0.0:
        return np.zeros_like(x), np.zeros_like(x)
    # x / peak first: 127 / peak overflows for subnormal peaks
    x_q = np.clip(np.round(x / peak * ACT_LEVELS), -ACT_LEVELS, ACT_LEVELS)
    return x_q, x_q * (peak / ACT_LEVELS)


def bitlinear_forward(x, weight, bias=None, frozen=None):
    """Linear layer on quantize-dequantized activations and binarized weights.

    ``frozen`` is an optional ``(signs, beta)`` pair loaded from a packed
    checkpoint; it replaces re-quantization of ``weight``. Gradients reach
    ``x`` and the latent ``weight`` through straight-through estimators.
    """
    _, x_deq = absmax_quant(x.data)
    x_in = ste_wrap(Tensor._wrap(x_deq), x)
    if frozen is not None:
        signs, beta = frozen
        w_in = Tensor._wrap(beta * signs.astype(np.float64))
    else:
        _, _, _, w_tilde = weight_quant(weight.data)
        w_in = ste_wrap(Tensor._wrap(w_tilde), weight)
    return linear(x_in, w_in, bias)


def pack_signs(signs):
    """Pack a ±1 matrix into bytes, row-major, LSB first; bit 1 encodes +1."""
    bits = (np.asarray(signs).reshape(-1) > 0).astype(np.uint8)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_signs(buf, shape):
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n, bitorder="little")
    return np.where(bits == 1, 1, -1).astype(np.int8).reshape(shape)
