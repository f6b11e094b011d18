"""Patch encoder and projection heads with hand-written reverse-mode gradients.

Parameters are plain ``dict[str, np.ndarray]`` so that EMA, the optimizer and
checkpointing can treat them uniformly. Layout::

    embed.w (3P^2, d), embed.b (d,)
    attn.wq, attn.wk, attn.wv (d, d)            optional single-head attention
    mix{i}.w (d, d), mix{i}.b (d,)               residual token-wise MLP layers
    head.w1 (d, dh), head.b1, head.w2 (dh, dh), head.b2
    head.obj (dh, L), head.glob (dh, Lg)         the only unshared head weights

All forward functions keep the dtype of their inputs, so the same code runs in
``float64`` for training and ``longdouble`` for reference checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, EncoderConfig
from .synthdata import AugmentedView, patchify

Params = dict[str, np.ndarray]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715
_NORM_FLOOR = 1e-12


class NumericError(FloatingPointError):
    """Non-finite value encountered; ``where`` names the layer or parameter block."""

    def __init__(self, where: str, message: str = "non-finite values"):
        super().__init__(f"{message} in {where}")
        self.where = where


class StructureError(ValueError):
    """Parameter sets with mismatched names or shapes."""


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def init_params(cfg: EncoderConfig, patch_size: int, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    d, dh = cfg.dim, cfg.head_hidden

    def dense(fan_in, fan_out):
        return rng.normal(0.0, cfg.init_gain / np.sqrt(fan_in), size=(fan_in, fan_out))

    in_dim = 3 * patch_size * patch_size
    params: Params = {"embed.w": dense(in_dim, d), "embed.b": np.zeros(d)}
    if cfg.attention:
        for name in ("wq", "wk", "wv"):
            params[f"attn.{name}"] = dense(d, d)
    for i in range(cfg.depth):
        params[f"mix{i}.w"] = dense(d, d)
        params[f"mix{i}.b"] = np.zeros(d)
    params.update({
        "head.w1": dense(d, dh), "head.b1": np.zeros(dh),
        "head.w2": dense(dh, dh), "head.b2": np.zeros(dh),
        "head.obj": dense(dh, cfg.out_dim), "head.glob": dense(dh, cfg.out_dim_global),
    })
    return params


def depth_of(params: Params) -> int:
    return sum(1 for k in params if k.startswith("mix") and k.endswith(".w"))


def _check(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(where)
    return x


def view_patches(views: list[AugmentedView]) -> np.ndarray:
    """Stack views into (V, N, 3P^2) centred inputs."""
    return np.stack([patchify(v.pixels, v.patch_size) for v in views]) - 0.5


@dataclass
class DenseCache:
    x: np.ndarray
    h0: np.ndarray
    attn: tuple[np.ndarray, ...] | None = None  # (h_pre, q, k, v, A)
    mix_in: list[np.ndarray] = field(default_factory=list)
    mix_pre: list[np.ndarray] = field(default_factory=list)


def encode(params: Params, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
    """Tokens (V, N, d) for patch inputs ``x`` (V, N, 3P^2)."""
    h = _check(x @ params["embed.w"] + params["embed.b"], "layer 0 (patch embedding)")
    cache = DenseCache(x=x, h0=h)
    if "attn.wq" in params:
        d = h.shape[-1]
        q, k, v = h @ params["attn.wq"], h @ params["attn.wk"], h @ params["attn.wv"]
        a = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(d))
        cache.attn = (h, q, k, v, a)
        h = _check(h + a @ v, "layer 1 (attention)")
    offset = 2 if cache.attn is not None else 1
    for i in range(depth_of(params)):
        pre = h @ params[f"mix{i}.w"] + params[f"mix{i}.b"]
        cache.mix_in.append(h)
        cache.mix_pre.append(pre)
        h = _check(h + gelu(pre), f"layer {i + offset} (mixer {i})")
    return h, cache


def encode_backward(params: Params, cache: DenseCache, dtokens: np.ndarray, grads: Params) -> None:
    dh = dtokens
    for i in reversed(range(len(cache.mix_pre))):
        dpre = dh * gelu_grad(cache.mix_pre[i])
        h_in = cache.mix_in[i]
        grads[f"mix{i}.w"] += np.einsum("vnd,vne->de", h_in, dpre)
        grads[f"mix{i}.b"] += dpre.sum(axis=(0, 1))
        dh = dh + dpre @ params[f"mix{i}.w"].T
    if cache.attn is not None:
        h0, q, k, v, a = cache.attn
        d = h0.shape[-1]
        dv = np.swapaxes(a, -1, -2) @ dh
        da = dh @ np.swapaxes(v, -1, -2)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(d)
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        grads["attn.wq"] += np.einsum("vnd,vne->de", h0, dq)
        grads["attn.wk"] += np.einsum("vnd,vne->de", h0, dk)
        grads["attn.wv"] += np.einsum("vnd,vne->de", h0, dv)
        dh = dh + dq @ params["attn.wq"].T + dk @ params["attn.wk"].T + dv @ params["attn.wv"].T
    grads["embed.w"] += np.einsum("vnf,vnd->fd", cache.x, dh)
    grads["embed.b"] += dh.sum(axis=(0, 1))


def forward_dense(params: Params, view: AugmentedView) -> tuple[np.ndarray, np.ndarray]:
    """Dense tokens (N, d) and their row mean for a single view."""
    if view.pixels.shape[0] % view.patch_size or view.pixels.shape[1] % view.patch_size:
        raise ConfigError("view size not divisible by patch size")
    tokens, _ = encode(params, view_patches([view]))
    return tokens[0], tokens[0].mean(axis=0)


@dataclass
class HeadCache:
    reps: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    norm: np.ndarray
    u: np.ndarray


def head_forward(params: Params, reps: np.ndarray, kind: str) -> tuple[np.ndarray, HeadCache]:
    """Logits for (M, d) reps; ``kind`` selects the final layer (``object`` or ``global``)."""
    a1 = reps @ params["head.w1"] + params["head.b1"]
    h1 = gelu(a1)
    a2 = h1 @ params["head.w2"] + params["head.b2"]
    h2 = gelu(a2)
    norm = np.maximum(np.sqrt((h2 * h2).sum(axis=-1, keepdims=True)), _NORM_FLOOR)
    u = h2 / norm
    logits = u @ params[_last_layer(kind)]
    return _check(logits, f"head ({kind})"), HeadCache(reps, a1, h1, a2, norm, u)


def head_backward(params: Params, cache: HeadCache, dlogits: np.ndarray, kind: str, grads: Params) -> np.ndarray:
    last = _last_layer(kind)
    grads[last] += cache.u.T @ dlogits
    du = dlogits @ params[last].T
    dh2 = (du - cache.u * (cache.u * du).sum(axis=-1, keepdims=True)) / cache.norm
    da2 = dh2 * gelu_grad(cache.a2)
    grads["head.w2"] += cache.h1.T @ da2
    grads["head.b2"] += da2.sum(axis=0)
    da1 = (da2 @ params["head.w2"].T) * gelu_grad(cache.a1)
    grads["head.w1"] += cache.reps.T @ da1
    grads["head.b1"] += da1.sum(axis=0)
    return da1 @ params["head.w1"].T


def _last_layer(kind: str) -> str:
    if kind == "object":
        return "head.obj"
    if kind == "global":
        return "head.glob"
    raise ValueError(f"unknown head kind {kind!r}")


def head_params(params: Params) -> Params:
    return {k: v for k, v in params.items() if k.startswith("head.")}


def project(head: Params, rep: np.ndarray, temperature: float, kind: str = "object",
            center: np.ndarray | None = None) -> np.ndarray:
    """softmax((head(rep) - center) / temperature) over the output dimension."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    logits, _ = head_forward(head, np.atleast_2d(rep), kind)
    if center is not None:
        logits = logits - center
    probs = softmax(logits / temperature)
    return probs[0] if np.ndim(rep) == 1 else probs


def ema_update(teacher: Params, student: Params, momentum: float) -> Params:
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
    if teacher.keys() != student.keys():
        raise StructureError(f"parameter names differ: {sorted(set(teacher) ^ set(student))}")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise StructureError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        out[name] = momentum * t + (1.0 - momentum) * s
    return out


@dataclass
class TeacherCenter:
    """Running means of teacher logits subtracted before the teacher softmax."""

    center_object: np.ndarray
    center_global: np.ndarray
    momentum: float = 0.9

    @classmethod
    def zeros(cls, out_dim: int, out_dim_global: int, momentum: float = 0.9) -> TeacherCenter:
        return cls(np.zeros(out_dim), np.zeros(out_dim_global), momentum)

    def update(self, object_logits: np.ndarray | None, global_logits: np.ndarray | None) -> None:
        m = self.momentum
        if object_logits is not None and len(object_logits):
            self.center_object = _check(m * self.center_object + (1 - m) * object_logits.mean(axis=0),
                                        "teacher center (object)")
        if global_logits is not None and len(global_logits):
            self.center_global = _check(m * self.center_global + (1 - m) * global_logits.mean(axis=0),
                                        "teacher center (global)")


@dataclass
class LossGraph:
    """Student-branch forward record plus upstream gradients w.r.t. student logits.

    Object rows are pooled from tokens as ``reps[m] = pool_weights[m] @ tokens[pool_view[m]]``;
    the weights come from the (constant) clustering.
    """

    dense: DenseCache
    num_patches: int
    global_cache: HeadCache | None = None
    dglobal_logits: np.ndarray | None = None  # (V, Lg)
    object_cache: HeadCache | None = None
    dobject_logits: np.ndarray | None = None  # (M, L)
    pool_view: np.ndarray | None = None  # (M,)
    pool_weights: np.ndarray | None = None  # (M, N)


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def backward(params: Params, graph: LossGraph) -> Params:
    grads = zeros_like(params)
    x = graph.dense.x
    dtokens = np.zeros(x.shape[:2] + (params["embed.w"].shape[1],), dtype=x.dtype)
    if graph.dglobal_logits is not None:
        drep = head_backward(params, graph.global_cache, graph.dglobal_logits, "global", grads)
        dtokens += drep[:, None, :] / graph.num_patches
    if graph.dobject_logits is not None and len(graph.dobject_logits):
        drep = head_backward(params, graph.object_cache, graph.dobject_logits, "object", grads)
        np.add.at(dtokens, graph.pool_view, graph.pool_weights[:, :, None] * drep[:, None, :])
    encode_backward(params, graph.dense, dtokens, grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(name, "non-finite gradient")
    return grads


def pool_tokens(tokens: np.ndarray, pool_view: np.ndarray, pool_weights: np.ndarray) -> np.ndarray:
    return np.einsum("mn,mnd->md", pool_weights, tokens[pool_view])
