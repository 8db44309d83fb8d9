"""JetFormer: an encoder-only transformer over unordered particle sets.

Layout of one forward pass::

    particles [B, P, F] --embed--> [B, P, d]
    class token [1, d] --expand--> [B, 1, d]
    concat -> [B, P+1, d]
    N x block:
        x = x + Dropout(Attn(BN1(x)))
        x = x + Dropout(FC2(ReLU(FC1(BN2(x)))))
    take token 0 -> BN_final -> head -> log_softmax

There is no positional encoding and no attention mask, so the output is
invariant to any reordering of the particle rows (zero-padded rows
included). Widths are stored per block so that structurally pruned
models, whose blocks may differ, use the same code path.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .bitlinear import bitlinear_forward
from .errors import ConfigError, DimensionError
from .rng import substream
from .tensor import BatchNormState, Tensor

MIN_HEAD_DIM = 4
BITLINEAR_LAYERS = ("attn.q", "attn.k", "attn.v", "attn.out", "ffn.fc1", "ffn.fc2")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``ffn_hidden`` defaults to ``2 * embed_dim``. ``head_dims`` and
    ``ffn_dims`` override the per-block widths and are only set on pruned
    models.
    """

    num_blocks: int
    embed_dim: int
    num_heads: int
    num_features: int = 3
    num_particles: int = 8
    num_classes: int = 5
    ffn_hidden: int = None
    dropout: float = 0.0
    quantized: bool = False
    head_dims: tuple = None
    ffn_dims: tuple = None
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 2 * self.embed_dim)
        if self.head_dims is not None:
            object.__setattr__(self, "head_dims", tuple(tuple(int(v) for v in h) for h in self.head_dims))
        if self.ffn_dims is not None:
            object.__setattr__(self, "ffn_dims", tuple(int(v) for v in self.ffn_dims))

    def block_head_dims(self, b):
        if self.head_dims is not None:
            return self.head_dims[b]
        return (self.embed_dim // self.num_heads,) * self.num_heads

    def block_ffn(self, b):
        return self.ffn_dims[b] if self.ffn_dims is not None else self.ffn_hidden

    def validate(self):
        """Raise :class:`ConfigError` naming the first violated invariant."""
        for name in ("num_blocks", "embed_dim", "num_heads", "num_features", "num_particles"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.head_dims is None:
            if self.embed_dim % self.num_heads:
                raise ConfigError(
                    f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
                )
            if self.embed_dim // self.num_heads < MIN_HEAD_DIM:
                raise ConfigError(
                    f"embed_dim / num_heads must be >= {MIN_HEAD_DIM}, "
                    f"got {self.embed_dim}/{self.num_heads}"
                )
        else:
            if len(self.head_dims) != self.num_blocks:
                raise ConfigError("head_dims needs one entry per block")
            if any(len(h) != self.num_heads or min(h) < 1 for h in self.head_dims):
                raise ConfigError("every block needs num_heads positive head widths")
        if self.ffn_hidden < 1:
            raise ConfigError("ffn_hidden must be >= 1")
        if self.ffn_dims is not None and (
            len(self.ffn_dims) != self.num_blocks or min(self.ffn_dims) < 1
        ):
            raise ConfigError("ffn_dims needs one positive width per block")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelState:
    """Learned parameters and batch-norm statistics of one JetFormer.

    ``params`` maps dotted names to leaf tensors (batch-norm affine
    parameters included); ``norms`` holds the batch-norm layers sharing
    those tensors. ``frozen`` carries (signs, beta) pairs of BitLinear
    layers restored from a packed checkpoint.
    """

    config: ModelConfig
    params: dict
    norms: dict
    frozen: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_params(self):
        return int(np.sum([p.size for p in self.params.values()]))

    def flatten(self):
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def buffers(self):
        """Running statistics, keyed like checkpoint tensors."""
        out = {}
        for name, bn in self.norms.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def copy(self):
        params = {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.params.items()}
        norms = {}
        for name, bn in self.norms.items():
            norms[name] = BatchNormState(
                params[f"{name}.weight"],
                params[f"{name}.bias"],
                bn.running_mean.copy(),
                bn.running_var.copy(),
                bn.eps,
                bn.momentum,
            )
        frozen = {k: (s.copy(), b) for k, (s, b) in self.frozen.items()}
        return ModelState(self.config, params, norms, frozen)


def norm_names(config):
    names = []
    for b in range(config.num_blocks):
        names += [f"blocks.{b}.norm1", f"blocks.{b}.norm2"]
    return names + ["norm_final"]


def layer_shapes(config):
    """Ordered ``name -> shape`` of every learnable tensor for ``config``."""
    d, f, c = config.embed_dim, config.num_features, config.num_classes
    shapes = {"embed.weight": (d, f), "embed.bias": (d,), "cls_token": (1, d)}
    for b in range(config.num_blocks):
        p = f"blocks.{b}"
        q = int(np.sum(config.block_head_dims(b)))
        hidden = config.block_ffn(b)
        shapes[f"{p}.norm1.weight"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        for proj in ("q", "k", "v"):
            shapes[f"{p}.attn.{proj}.weight"] = (q, d)
            shapes[f"{p}.attn.{proj}.bias"] = (q,)
        shapes[f"{p}.attn.out.weight"] = (d, q)
        shapes[f"{p}.attn.out.bias"] = (d,)
        shapes[f"{p}.norm2.weight"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
        shapes[f"{p}.ffn.fc1.weight"] = (hidden, d)
        shapes[f"{p}.ffn.fc1.bias"] = (hidden,)
        shapes[f"{p}.ffn.fc2.weight"] = (d, hidden)
        shapes[f"{p}.ffn.fc2.bias"] = (d,)
    shapes["norm_final.weight"] = (d,)
    shapes["norm_final.bias"] = (d,)
    shapes["head.weight"] = (c, d)
    shapes["head.bias"] = (c,)
    return shapes


def is_bitlinear(name):
    """True for weight names that become BitLinear under quantization."""
    return name.endswith(".weight") and any(f".{layer}." in f".{name}" for layer in BITLINEAR_LAYERS)


def assemble(config, arrays, running=None):
    """Build a ModelState from named arrays (as produced by a checkpoint)."""
    params = {name: Tensor(arrays[name], requires_grad=True) for name in layer_shapes(config)}
    norms = {}
    for name in norm_names(config):
        ch = params[f"{name}.weight"].shape[0]
        rm = running[f"{name}.running_mean"] if running else np.zeros(ch)
        rv = running[f"{name}.running_var"] if running else np.ones(ch)
        norms[name] = BatchNormState(
            params[f"{name}.weight"],
            params[f"{name}.bias"],
            np.array(rm, dtype=np.float64),
            np.array(rv, dtype=np.float64),
            config.bn_eps,
            config.bn_momentum,
        )
    return ModelState(config, params, norms)


def build(config, seed=0):
    """Initialize a JetFormer deterministically from ``seed``.

    Linear weights are uniform in ±1/sqrt(fan_in), biases zero, the class
    token normal(0, 0.02), batch-norm scale one and shift zero.
    """
    config.validate()
    rng = substream(seed, "model-init")
    arrays = {}
    for name, shape in layer_shapes(config).items():
        if name == "cls_token":
            arrays[name] = rng.normal(0.0, 0.02, size=shape)
        elif ".norm" in f".{name}":
            arrays[name] = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
        elif name.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return assemble(config, arrays)


def _features(batch):
    x = getattr(batch, "features", batch)
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _project(state, name, x):
    p = state.params
    if state.config.quantized:
        return bitlinear_forward(x, p[f"{name}.weight"], p[f"{name}.bias"], state.frozen.get(f"{name}.weight"))
    return T.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def attention(state, b, x):
    """Multi-head self-attention of block ``b`` on ``x`` of shape [B, L, d]."""
    prefix = f"blocks.{b}.attn"
    q = _project(state, f"{prefix}.q", x)
    k = _project(state, f"{prefix}.k", x)
    v = _project(state, f"{prefix}.v", x)
    heads = []
    start = 0
    for width in state.config.block_head_dims(b):
        qh = T.narrow(q, -1, start, width)
        kh = T.narrow(k, -1, start, width)
        vh = T.narrow(v, -1, start, width)
        scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(width))
        heads.append(T.matmul(T.softmax(scores, axis=-1), vh))
        start += width
    context = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return _project(state, f"{prefix}.out", context)


def encode(state, batch, training=False, rng=None):
    """Run the embedding and transformer blocks; returns [B, P+1, d]."""
    cfg = state.config
    x = _features(batch)
    if x.ndim != 3 or x.shape[-1] != cfg.num_features:
        raise DimensionError(
            f"expected features [batch, particles, {cfg.num_features}], got {x.shape}"
        )
    if training and cfg.dropout > 0 and rng is None:
        rng = substream(0, "dropout")
    p = state.params
    h = T.linear(x, p["embed.weight"], p["embed.bias"])
    cls = T.expand(p["cls_token"], (x.shape[0], 1, cfg.embed_dim))
    h = T.concat([cls, h], axis=1)
    for b in range(cfg.num_blocks):
        pre = f"blocks.{b}"
        a = attention(state, b, T.batchnorm1d(h, state.norms[f"{pre}.norm1"], training))
        h = h + T.dropout(a, cfg.dropout, rng, training)
        f = T.batchnorm1d(h, state.norms[f"{pre}.norm2"], training)
        f = _project(state, f"{pre}.ffn.fc2", T.relu(_project(state, f"{pre}.ffn.fc1", f)))
        h = h + T.dropout(f, cfg.dropout, rng, training)
    return h


def forward(state, batch, training=False, rng=None):
    """Class log-probabilities of shape [batch, num_classes]."""
    h = encode(state, batch, training, rng)
    token = T.batchnorm1d(T.take(h, 0, axis=1), state.norms["norm_final"], training)
    logits = T.linear(token, state.params["head.weight"], state.params["head.bias"])
    return T.log_softmax(logits, axis=-1)


def loss(log_probs, labels):
    """Mean negative log-likelihood."""
    return T.nll_loss(log_probs, labels)


def predict_proba(state, features, batch_size=1024):
    """Class probabilities in inference mode, without recording a graph."""
    x = np.asarray(getattr(features, "features", features))
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(np.exp(forward(state, x[i : i + batch_size]).data))
    return np.concatenate(out) if out else np.zeros((0, state.config.num_classes))


def with_widths(config, embed_dim=None, head_dims=None, ffn_dims=None):
    """Copy of ``config`` with explicit (possibly pruned) widths."""
    head_dims = head_dims or tuple(config.block_head_dims(b) for b in range(config.num_blocks))
    ffn_dims = ffn_dims or tuple(config.block_ffn(b) for b in range(config.num_blocks))
    return replace(
        config,
        embed_dim=embed_dim or config.embed_dim,
        head_dims=tuple(tuple(h) for h in head_dims),
        ffn_dims=tuple(ffn_dims),
    )
