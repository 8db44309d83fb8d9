"""Parameter and FLOP accounting for JetFormer configurations.

FLOPs are counted for a single jet in inference mode. The counting rules
live in a :class:`FlopConvention`:

``DEFAULT``
    one multiply-accumulate = 2 FLOPs, elementwise ops 1 FLOP, softmax
    5 FLOPs per element, inference batch norm 2 FLOPs per element. Linear
    bias additions are not counted.

``COMPACT``
    one multiply-accumulate = 1 FLOP and softmax free, everything else as
    above. This reproduces the published HPO table exactly for embedding
    widths up to 32 and within 4 FLOPs per block beyond that.

In both, the embedding runs over the particles only (the class token is
concatenated afterwards) and the final batch norm sees the class token only.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import layer_shapes


@dataclass(frozen=True)
class FlopConvention:
    mac: int = 2
    elementwise: int = 1
    softmax: int = 5
    batchnorm: int = 2


DEFAULT = FlopConvention()
COMPACT = FlopConvention(mac=1, softmax=0)


@dataclass
class CostReport:
    params: int = 0
    flops: int = 0
    breakdown: list = field(default_factory=list)

    def add(self, name, params, flops):
        self.breakdown.append((name, int(params), int(flops)))
        self.params += int(params)
        self.flops += int(flops)

    def to_dict(self):
        return {
            "params": self.params,
            "flops": self.flops,
            "breakdown": [{"layer": n, "params": p, "flops": f} for n, p, f in self.breakdown],
        }

    def table(self):
        width = max([len(n) for n, _, _ in self.breakdown] + [5])
        lines = [f"{'layer':<{width}}  {'params':>10}  {'flops':>12}"]
        lines += [f"{n:<{width}}  {p:>10,}  {f:>12,}" for n, p, f in self.breakdown]
        lines.append(f"{'total':<{width}}  {self.params:>10,}  {self.flops:>12,}")
        return "\n".join(lines)


def linear_flops(tokens, fan_in, fan_out, convention=DEFAULT):
    return tokens * convention.mac * fan_in * fan_out


def cost_report(config, seq_len=None, convention=DEFAULT):
    """Itemized parameter and FLOP counts for ``config``."""
    cv = convention
    seq = config.num_particles + 1 if seq_len is None else seq_len
    parts = seq - 1
    d, fin, c = config.embed_dim, config.num_features, config.num_classes
    rep = CostReport()

    rep.add("embed", fin * d + d, linear_flops(parts, fin, d, cv))
    rep.add("cls_token", d, 0)
    for b in range(config.num_blocks):
        p = f"blocks.{b}"
        heads = config.block_head_dims(b)
        q = int(np.sum(heads))
        hidden = config.block_ffn(b)
        rep.add(f"{p}.norm1", 2 * d, cv.batchnorm * seq * d)
        for proj in ("q", "k", "v"):
            rep.add(f"{p}.attn.{proj}", d * q + q, linear_flops(seq, d, q, cv))
        rep.add(f"{p}.attn.scores", 0, cv.mac * seq * seq * q)
        rep.add(f"{p}.attn.softmax", 0, cv.softmax * len(heads) * seq * seq)
        rep.add(f"{p}.attn.context", 0, cv.mac * seq * seq * q)
        rep.add(f"{p}.attn.out", q * d + d, linear_flops(seq, q, d, cv))
        rep.add(f"{p}.residual1", 0, cv.elementwise * seq * d)
        rep.add(f"{p}.norm2", 2 * d, cv.batchnorm * seq * d)
        rep.add(f"{p}.ffn.fc1", d * hidden + hidden, linear_flops(seq, d, hidden, cv))
        rep.add(f"{p}.ffn.relu", 0, cv.elementwise * seq * hidden)
        rep.add(f"{p}.ffn.fc2", hidden * d + d, linear_flops(seq, hidden, d, cv))
        rep.add(f"{p}.residual2", 0, cv.elementwise * seq * d)
    rep.add("norm_final", 2 * d, cv.batchnorm * d)
    rep.add("head", d * c + c, linear_flops(1, d, c, cv))
    rep.add("log_softmax", 0, cv.softmax * c)
    return rep


def count_params(config):
    """Exact number of learnable scalars of a model built from ``config``."""
    return int(np.sum([np.prod(s) for s in layer_shapes(config).values()]))


def count_flops(config, seq_len=None, convention=DEFAULT):
    return cost_report(config, seq_len, convention).flops
