"""Toy ReLU-attention transformer: parameters, forward, analytic backward, SGD.

One block computes

    Q, K, V = relu(x W_q), relu(x W_k), relu(x W_v)
    A       = relu(Q K^T / d_head)
    h1      = x + relu((A V) W_o)
    h2      = h1 + relu(relu(h1 W_mlp1) W_mlp2)

Blocks are stacked, the last ``h2`` is mean-pooled over tokens and fed to a
linear classifier. No biases anywhere, so a zero input gives zero everywhere.
Inputs may carry a leading sample axis: ``(N, d_model)`` or ``(S, N, d_model)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from est.errors import ConfigError, ConsistencyError, DimensionError, DivergenceError
from est.tensor import check_shape, matmul, relu, t

BLOCK_WEIGHTS = ("W_q", "W_k", "W_v", "W_o", "W_mlp1", "W_mlp2")
MAX_BLOCKS = 4


@dataclass
class Block:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    W_mlp1: np.ndarray
    W_mlp2: np.ndarray


@dataclass
class AnnParams:
    n_tokens: int
    d_model: int
    d_head: int
    d_ff: int
    n_classes: int
    blocks: list[Block]
    W_cls: np.ndarray

    def __post_init__(self):
        for name in ("n_tokens", "d_model", "d_head", "d_ff", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= len(self.blocks) <= MAX_BLOCKS:
            raise ConfigError(f"blocks must be in 1..{MAX_BLOCKS}, got {len(self.blocks)}")
        dm, dh, dff = self.d_model, self.d_head, self.d_ff
        shapes = {
            "W_q": (dm, dh),
            "W_k": (dm, dh),
            "W_v": (dm, dh),
            "W_o": (dh, dm),
            "W_mlp1": (dm, dff),
            "W_mlp2": (dff, dm),
        }
        for i, blk in enumerate(self.blocks):
            for name, shape in shapes.items():
                arr = np.asarray(getattr(blk, name), dtype=np.float64)
                check_shape(f"block {i} {name}", arr, shape)
                setattr(blk, name, arr)
        self.W_cls = np.asarray(self.W_cls, dtype=np.float64)
        check_shape("W_cls", self.W_cls, (dm, self.n_classes))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def dims(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "d_model": self.d_model,
            "d_head": self.d_head,
            "d_ff": self.d_ff,
            "n_classes": self.n_classes,
            "blocks": self.n_blocks,
        }

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Live references to every weight, in a fixed order."""
        out = []
        for i, blk in enumerate(self.blocks):
            out.extend((f"{i}.{name}", getattr(blk, name)) for name in BLOCK_WEIGHTS)
        out.append(("W_cls", self.W_cls))
        return out

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name, arr in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def map(self, fn) -> "AnnParams":
        """New params with ``fn`` applied to every weight tensor."""
        blocks = [Block(**{n: fn(getattr(b, n)) for n in BLOCK_WEIGHTS}) for b in self.blocks]
        return AnnParams(**self.dims_kwargs(), blocks=blocks, W_cls=fn(self.W_cls))

    def dims_kwargs(self) -> dict:
        d = self.dims()
        d.pop("blocks")
        return d

    def copy(self) -> "AnnParams":
        return self.map(np.copy)


def init_params(
    n_tokens: int,
    d_model: int,
    d_head: int,
    n_classes: int,
    d_ff: int | None = None,
    blocks: int = 1,
    seed: int = 0,
) -> AnnParams:
    """Gaussian init scaled by 1/sqrt(fan_in)."""
    if d_ff is None:
        d_ff = 2 * d_model
    rng = np.random.default_rng(seed)

    def w(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    blks = []
    for _ in range(blocks):
        blks.append(
            Block(
                W_q=w(d_model, d_head),
                W_k=w(d_model, d_head),
                W_v=w(d_model, d_head),
                W_o=w(d_head, d_model),
                W_mlp1=w(d_model, d_ff),
                W_mlp2=w(d_ff, d_model),
            )
        )
    return AnnParams(
        n_tokens=n_tokens,
        d_model=d_model,
        d_head=d_head,
        d_ff=d_ff,
        n_classes=n_classes,
        blocks=blks,
        W_cls=w(d_model, n_classes),
    )


@dataclass
class BlockCache:
    x: np.ndarray
    q_pre: np.ndarray
    q: np.ndarray
    k_pre: np.ndarray
    k: np.ndarray
    v_pre: np.ndarray
    v: np.ndarray
    a_pre: np.ndarray
    a: np.ndarray
    av: np.ndarray
    ctx_pre: np.ndarray
    ctx: np.ndarray
    h1: np.ndarray
    m1_pre: np.ndarray
    m1: np.ndarray
    m2_pre: np.ndarray
    m2: np.ndarray
    h2: np.ndarray


@dataclass
class ForwardCache:
    x: np.ndarray
    blocks: list[BlockCache]
    pooled: np.ndarray
    logits: np.ndarray
    batched: bool
    fingerprint: str = field(repr=False, default="")


def _block_forward(blk: Block, x: np.ndarray, d_head: int) -> BlockCache:
    q_pre = matmul(x, blk.W_q)
    k_pre = matmul(x, blk.W_k)
    v_pre = matmul(x, blk.W_v)
    q, k, v = relu(q_pre), relu(k_pre), relu(v_pre)
    # divisor is the head width itself, not its square root
    a_pre = matmul(q, t(k)) / d_head
    a = relu(a_pre)
    av = matmul(a, v)
    ctx_pre = matmul(av, blk.W_o)
    ctx = relu(ctx_pre)
    h1 = x + ctx
    m1_pre = matmul(h1, blk.W_mlp1)
    m1 = relu(m1_pre)
    m2_pre = matmul(m1, blk.W_mlp2)
    m2 = relu(m2_pre)
    h2 = h1 + m2
    return BlockCache(x, q_pre, q, k_pre, k, v_pre, v, a_pre, a, av, ctx_pre, ctx,
                      h1, m1_pre, m1, m2_pre, m2, h2)


def ann_forward(p: AnnParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Logits for one sample ``(N, d_model)`` or a batch ``(S, N, d_model)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or x.shape[-2:] != (p.n_tokens, p.d_model):
        raise DimensionError(
            f"ann_forward: input shape {x.shape} does not match (N, d_model) = "
            f"({p.n_tokens}, {p.d_model})"
        )
    xb = x if batched else x[None]
    caches = []
    h = xb
    for blk in p.blocks:
        c = _block_forward(blk, h, p.d_head)
        caches.append(c)
        h = c.h2
    pooled = h.mean(axis=1)
    logits = matmul(pooled[:, None, :], p.W_cls)[:, 0, :]
    cache = ForwardCache(xb, caches, pooled, logits, batched, p.fingerprint())
    return (logits if batched else logits[0]), cache


def _mask(pre: np.ndarray) -> np.ndarray:
    return (pre > 0).astype(np.float64)


def _wgrad(inp: np.ndarray, delta: np.ndarray) -> np.ndarray:
    # per-sample products, then a fixed-order reduction over samples
    return matmul(t(inp), delta).sum(axis=0)


def ann_backward(p: AnnParams, cache: ForwardCache, grad_logits: np.ndarray) -> AnnParams:
    """Gradients of a scalar loss given dL/dlogits, packaged as ``AnnParams``."""
    if cache.fingerprint != p.fingerprint() or len(cache.blocks) != p.n_blocks:
        raise ConsistencyError("ann_backward: cache was produced by different parameters")
    g = np.asarray(grad_logits, dtype=np.float64)
    if not cache.batched:
        g = g[None]
    check_shape("grad_logits", g, cache.logits.shape)

    d_cls = _wgrad(cache.pooled[:, None, :], g[:, None, :])
    d_pooled = matmul(g[:, None, :], t(p.W_cls))  # (S, 1, d_model)
    dh = np.broadcast_to(d_pooled / p.n_tokens, cache.blocks[-1].h2.shape).copy()

    grads: list[Block] = []
    for blk, c in zip(reversed(p.blocks), reversed(cache.blocks)):
        d_m2_pre = dh * _mask(c.m2_pre)
        d_w2 = _wgrad(c.m1, d_m2_pre)
        d_m1_pre = matmul(d_m2_pre, t(blk.W_mlp2)) * _mask(c.m1_pre)
        d_w1 = _wgrad(c.h1, d_m1_pre)
        dh1 = dh + matmul(d_m1_pre, t(blk.W_mlp1))

        d_ctx_pre = dh1 * _mask(c.ctx_pre)
        d_wo = _wgrad(c.av, d_ctx_pre)
        d_av = matmul(d_ctx_pre, t(blk.W_o))
        d_a = matmul(d_av, t(c.v))
        d_v = matmul(t(c.a), d_av)
        d_a_pre = d_a * _mask(c.a_pre)
        d_q = matmul(d_a_pre, c.k) / p.d_head
        d_k = matmul(t(d_a_pre), c.q) / p.d_head

        d_q_pre = d_q * _mask(c.q_pre)
        d_k_pre = d_k * _mask(c.k_pre)
        d_v_pre = d_v * _mask(c.v_pre)
        d_wq = _wgrad(c.x, d_q_pre)
        d_wk = _wgrad(c.x, d_k_pre)
        d_wv = _wgrad(c.x, d_v_pre)
        dh = (
            dh1
            + matmul(d_q_pre, t(blk.W_q))
            + matmul(d_k_pre, t(blk.W_k))
            + matmul(d_v_pre, t(blk.W_v))
        )
        grads.append(Block(d_wq, d_wk, d_wv, d_wo, d_w1, d_w2))

    grads.reverse()
    return AnnParams(**p.dims_kwargs(), blocks=grads, W_cls=d_cls)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def predict(p: AnnParams, inputs: np.ndarray) -> np.ndarray:
    logits, _ = ann_forward(p, inputs)
    return np.atleast_2d(logits)


def train_sgd(
    p: AnnParams,
    data,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int | None = 32,
    history: list | None = None,
) -> AnnParams:
    """Minibatch SGD on cross-entropy; ``batch_size=None`` means full batch.

    If ``history`` is given, the full training loss after every epoch is
    appended to it.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if not lr > 0:
        raise ConfigError(f"lr must be > 0, got {lr}")
    rng = np.random.default_rng(seed)
    params = p.copy()
    n = len(data.labels)
    bs = n if batch_size is None else max(1, min(batch_size, n))
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            logits, cache = ann_forward(params, data.inputs[idx])
            loss, g = cross_entropy(logits, data.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            grads = ann_backward(params, cache, g)
            for (_, w), (_, dw) in zip(params.named_tensors(), grads.named_tensors()):
                w -= lr * dw
        full_loss, _ = cross_entropy(predict(params, data.inputs), data.labels)
        if not np.isfinite(full_loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        if history is not None:
            history.append(full_loss)
    return params


# -- serialization ---------------------------------------------------------

def weights_payload(p: AnnParams) -> dict:
    w = {name: [getattr(b, name).tolist() for b in p.blocks] for name in BLOCK_WEIGHTS}
    w["W_cls"] = p.W_cls.tolist()
    return w


def params_to_dict(p: AnnParams) -> dict:
    return {"dims": p.dims(), "weights": weights_payload(p)}


def params_from_dict(doc: dict) -> AnnParams:
    try:
        dims = dict(doc["dims"])
        weights = doc["weights"]
        n_blocks = int(dims.pop("blocks"))
        blocks = [
            Block(**{name: np.array(weights[name][i], dtype=np.float64) for name in BLOCK_WEIGHTS})
            for i in range(n_blocks)
        ]
        return AnnParams(
            **{k: int(v) for k, v in dims.items()},
            blocks=blocks,
            W_cls=np.array(weights["W_cls"], dtype=np.float64),
        )
    except (KeyError, IndexError, TypeError) as exc:
        raise ConfigError(f"malformed parameter document: {exc!r}") from exc


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=False, separators=(",", ":")) + "\n"


def load_params(path) -> AnnParams:
    return params_from_dict(json.loads(Path(path).read_text()))
