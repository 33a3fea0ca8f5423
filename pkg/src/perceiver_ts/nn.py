"""Multi-head attention and the residual attention block.

``attn_block(U, Z)`` computes

    H   = U + Attn(LN_q(U), LN_kv(Z))
    out = H + FFN(LN_ff(H))

with pre-normalization on each sub-layer input. Query and context may have
different native widths: ``wq`` maps the query width to ``d_model``,
``wk``/``wv`` map the context width to ``d_model``, and ``wo`` maps back to
the query width.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

INIT_STD = 0.02


class ScoreCounter:
    """Tallies attention-score elements (query tokens x key tokens, per sample)."""

    def __init__(self):
        self.elements = 0
        self.calls = 0


_counter: contextvars.ContextVar[Optional[ScoreCounter]] = contextvars.ContextVar("score_counter", default=None)


@contextlib.contextmanager
def count_scores():
    counter = ScoreCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass
class AttnBlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_q_g: Tensor
    ln_q_b: Tensor
    ln_kv_g: Tensor
    ln_kv_b: Tensor
    ln_ff_g: Tensor
    ln_ff_b: Tensor
    n_heads: int = 1

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @property
    def q_dim(self) -> int:
        return self.wq.shape[0]

    @property
    def kv_dim(self) -> int:
        return self.wk.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "n_heads"}

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], n_heads: int) -> "AttnBlockParams":
        return cls(n_heads=n_heads, **tensors)


def init_attn_block(rng: np.random.Generator, q_dim: int, kv_dim: int, n_heads: int,
                    d_model: Optional[int] = None) -> AttnBlockParams:
    d_model = q_dim if d_model is None else d_model
    if d_model % n_heads:
        raise DimensionError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    d_ff = 2 * q_dim

    def w(*shape):
        return Tensor(trunc_normal(rng, shape), requires_grad=True)

    def const(n, v):
        return Tensor(np.full(n, v), requires_grad=True)

    return AttnBlockParams(
        wq=w(q_dim, d_model), wk=w(kv_dim, d_model), wv=w(kv_dim, d_model), wo=w(d_model, q_dim),
        w1=w(q_dim, d_ff), b1=const(d_ff, 0.0), w2=w(d_ff, q_dim), b2=const(q_dim, 0.0),
        ln_q_g=const(q_dim, 1.0), ln_q_b=const(q_dim, 0.0),
        ln_kv_g=const(kv_dim, 1.0), ln_kv_b=const(kv_dim, 0.0),
        ln_ff_g=const(q_dim, 1.0), ln_ff_b=const(q_dim, 0.0),
        n_heads=n_heads,
    )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, dm = x.shape
    x = T.reshape(x, (*lead, n, n_heads, dm // n_heads))
    k = len(lead)
    return T.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    k = len(lead)
    x = T.transpose(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * d))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, per_head: bool = False):
    """Scaled dot-product attention split across ``n_heads``.

    Shapes are ``(..., Nq, dm)``, ``(..., Nk, dm)``, ``(..., Nk, dm)``. Returns
    the merged output ``(..., Nq, dm)`` and the post-softmax weights,
    averaged over heads ``(..., Nq, Nk)`` unless ``per_head`` is set, in
    which case ``(..., n_heads, Nq, Nk)``.
    """
    dm = q.shape[-1]
    if k.shape[-1] != dm or v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    if dm % n_heads or v.shape[-1] % n_heads:
        raise DimensionError(f"attention: width {dm} not divisible by {n_heads} heads")
    counter = _counter.get()
    if counter is not None:
        batch = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1
        counter.elements += batch * q.shape[-2] * k.shape[-2]
        counter.calls += 1
    d = dm // n_heads
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scores = T.scale(T.matmul(qh, T.swap_last(kh)), 1.0 / math.sqrt(d))
    weights = T.softmax_rows(scores)
    out = _merge_heads(T.matmul(weights, vh))
    amap = weights.data.copy() if per_head else weights.data.mean(axis=-3)
    return out, amap


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, Tensor(keep))


def attn_block(u: Tensor, z: Tensor, p: AttnBlockParams, *, dropout: float = 0.0,
               rng: Optional[np.random.Generator] = None, per_head: bool = False):
    """Residual attention followed by a residual GELU feed-forward layer.

    Self-attention is the call with ``z`` equal to ``u``. Returns
    ``(output, attention_map)``; the output always has ``u``'s shape.
    """
    if u.shape[-1] != p.q_dim or z.shape[-1] != p.kv_dim:
        raise DimensionError(
            f"attn_block: query width {u.shape[-1]} / context width {z.shape[-1]} "
            f"do not match parameters ({p.q_dim}, {p.kv_dim})")
    un = T.layer_norm(u, p.ln_q_g, p.ln_q_b)
    zn = T.layer_norm(z, p.ln_kv_g, p.ln_kv_b)
    att, amap = attention(un @ p.wq, zn @ p.wk, zn @ p.wv, p.n_heads, per_head=per_head)
    h = u + _dropout(att @ p.wo, dropout, rng)
    hn = T.layer_norm(h, p.ln_ff_g, p.ln_ff_b)
    ff = T.gelu(hn @ p.w1 + p.b1) @ p.w2 + p.b2
    return h + _dropout(ff, dropout, rng), amap
