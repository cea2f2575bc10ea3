"""Hybrid Tree-Transformer power predictor and a full-attention baseline.

Pipeline for a batch of ``B`` scenarios with ``L`` APs and ``K`` UEs::

    AP MLP + mean        (B, L, 2)  -> (B, d_enc)
    UE embedding         (B, K, 2)  -> (B, K, d_enc)
    fusion               -> z       (B, K, 2 d_enc)
    tree compressor      -> z_root  (B, d_mod)       ceil(log2 K) pairwise merge stages
    root encoder         -> z_root' (B, d_mod)       S single-token encoder layers
    shared decoder       -> (B, K, 2) in (0, 1)      [z_k ; z_root'] -> MLP -> sigmoid
    rescaler             -> UL / DL watts            affine UL, budget-preserving DL

Parameters live in a flat ``dict`` of float64 arrays keyed by dotted names;
the forward functions take the same keys mapped to :class:`Tensor` objects.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


TREE_PADDINGS = ("carry", "zero")


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int = 32
    d_mod: int = 64
    A: int = 4
    S: int = 2
    decoder_hidden: int = 64
    ffn_hidden: int | None = None
    tree_weight_sharing: str = "shared"
    tree_padding: str = "carry"
    max_tree_depth: int = 7
    layer_norm: bool = True

    def __post_init__(self):
        for name in ("d_enc", "d_mod", "A", "decoder_hidden", "max_tree_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.S < 0:
            raise ValueError("ModelConfig.S must be >= 0")
        if self.d_mod % self.A:
            raise ValueError(f"ModelConfig: d_mod={self.d_mod} is not divisible by A={self.A}")
        if self.tree_weight_sharing not in ("shared", "per_stage"):
            raise ValueError("ModelConfig.tree_weight_sharing must be 'shared' or 'per_stage'")
        if self.tree_padding not in TREE_PADDINGS:
            raise ValueError(f"ModelConfig.tree_padding must be one of {TREE_PADDINGS}")

    @property
    def ffn(self) -> int:
        return 4 * self.d_mod if self.ffn_hidden is None else self.ffn_hidden

    @property
    def head_dim(self) -> int:
        return self.d_mod // self.A

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class RescaleConfig:
    ul_min: float
    ul_max: float
    dl_min: float
    dl_max: float
    total_dl_budget: float

    def __post_init__(self):
        if self.ul_max < self.ul_min or self.dl_max < self.dl_min:
            raise ValueError("RescaleConfig: max must be >= min")
        if not self.total_dl_budget > 0:
            raise ValueError("RescaleConfig: total_dl_budget must be positive")

    @classmethod
    def from_meta(cls, meta, total_dl_budget: float) -> "RescaleConfig":
        return cls(meta.p_ul_min, meta.p_ul_max, meta.p_dl_min, meta.p_dl_max, total_dl_budget)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig, kind: str = "tree") -> dict:
    """Ordered parameter names and shapes; ``kind`` is ``tree`` or ``full_attention``."""
    e, d = cfg.d_enc, cfg.d_mod
    shapes = {
        "ap.l1.W": (e, 2), "ap.l1.b": (e,),
        "ap.l2.W": (e, e), "ap.l2.b": (e,),
        "ue.W": (e, 2), "ue.b": (e,),
        "proj0.W": (d, 2 * e), "proj0.b": (d,),
    }
    if kind == "tree":
        if cfg.tree_weight_sharing == "shared":
            shapes.update({"tree.W": (d, 2 * d), "tree.b": (d,)})
        else:
            for m in range(cfg.max_tree_depth):
                shapes.update({f"tree.{m}.W": (d, 2 * d), f"tree.{m}.b": (d,)})
    elif kind != "full_attention":
        raise ValueError(f"unknown model kind {kind!r}")
    for s in range(cfg.S):
        p = f"enc.{s}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + proj + ".W"] = (d, d)
            shapes[p + proj + ".b"] = (d,)
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ff1.W": (cfg.ffn, d), p + "ff1.b": (cfg.ffn,),
            p + "ff2.W": (d, cfg.ffn), p + "ff2.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    shapes.update({
        "dec.l1.W": (cfg.decoder_hidden, 2 * e + d), "dec.l1.b": (cfg.decoder_hidden,),
        "dec.l2.W": (2, cfg.decoder_hidden), "dec.l2.b": (2,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, kind: str = "tree") -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; unit/zero layer norms."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg, kind)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif ".ln" in name and name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shapes[name[:-1] + "W"][1]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def param_count(params: dict) -> int:
    return int(sum(np.size(v) for v in params.values()))


def as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _batched(x) -> Tensor:
    x = ad.as_tensor(x)
    return x if x.ndim == 3 else ad.reshape(x, (1,) + x.shape)


def ap_encode(ap, P: dict):
    """Per-AP embeddings ``(B, L, d_enc)`` and their mean ``(B, d_enc)``.

    APs are encoded in a canonical (lexicographic) order and the mean sums
    that order, which makes the global embedding bitwise invariant to the
    AP ordering.  ``per_ap`` is returned in input order.
    """
    ap = _batched(ap)
    B, L, _ = ap.shape
    if L < 1:
        raise ValueError("ap_encode: need at least one AP")
    order = np.lexsort((ap.data[..., 1], ap.data[..., 0]), axis=-1)
    rows = np.arange(B)[:, None]
    canon = ad.getitem(ap, (rows, order))
    h = ad.relu(ad.linear(canon, P["ap.l1.W"], P["ap.l1.b"]))
    per_canon = ad.linear(h, P["ap.l2.W"], P["ap.l2.b"])
    per_ap = ad.getitem(per_canon, (rows, np.argsort(order, axis=-1)))
    return per_ap, ad.mean(per_canon, axis=1)


def ue_embed(ue, P: dict) -> Tensor:
    return ad.linear(_batched(ue), P["ue.W"], P["ue.b"])


def fuse(ue_emb: Tensor, ap_global: Tensor) -> Tensor:
    """``z_k = [e_k^UE ; e^AP]`` for every user."""
    B, K, e = ue_emb.shape
    if ap_global.shape != (B, e):
        raise ValueError(f"fuse: AP context {ap_global.shape} does not match UE embeddings {ue_emb.shape}")
    ctx = ad.broadcast_to(ad.reshape(ap_global, (B, 1, e)), (B, K, e))
    return ad.concat([ue_emb, ctx], axis=-1)


def tree_schedule(K: int, padding: str = "carry") -> list:
    """Widths and padding of each merge stage: ``[(n_in, padded), ...]``.

    ``len(schedule) == ceil(log2 K)`` and stage ``m`` performs
    ``(n_in + padded) // 2`` merges.  With ``padding="zero"`` an odd level
    gets a zero vector appended; with ``"carry"`` its last node moves up
    unmerged, so the whole tree uses exactly ``K - 1`` merges.
    """
    if K < 1:
        raise ValueError("tree_schedule: K must be >= 1")
    if padding not in TREE_PADDINGS:
        raise ValueError(f"tree_schedule: padding must be one of {TREE_PADDINGS}")
    stages = []
    n = K
    while n > 1:
        pad = n % 2 if padding == "zero" else 0
        stages.append((n, pad))
        n = (n + 1) // 2
    return stages


def n_merges(K: int, padding: str = "carry") -> int:
    return sum((n + pad) // 2 for n, pad in tree_schedule(K, padding))


def tree_compress(z: Tensor, P: dict, cfg: ModelConfig) -> Tensor:
    """Project fused descriptors to ``d_mod`` and merge pairwise down to one root."""
    x = ad.linear(z, P["proj0.W"], P["proj0.b"])
    B, K, d = x.shape
    for m, (n, pad) in enumerate(tree_schedule(K, cfg.tree_padding)):
        if pad:
            x = ad.pad_zeros(x, 1, axis=1)
        carry = None
        if (n + pad) % 2:
            carry = x[:, n - 1:, :]
            x = x[:, :n - 1, :]
        x = ad.reshape(x, (B, (n + pad) // 2, 2 * d))
        if cfg.tree_weight_sharing == "shared":
            W, b = P["tree.W"], P["tree.b"]
        else:
            if m >= cfg.max_tree_depth:
                raise ValueError(f"tree_compress: K={K} needs more than max_tree_depth stages")
            W, b = P[f"tree.{m}.W"], P[f"tree.{m}.b"]
        x = ad.linear(x, W, b)
        if carry is not None:
            x = ad.concat([x, carry], axis=1)
    return ad.reshape(x, (B, d))


def _heads(x: Tensor, A: int) -> Tensor:
    B, T, d = x.shape
    return ad.swapaxes(ad.reshape(x, (B, T, A, d // A)), 1, 2)


def self_attention(x: Tensor, P: dict, prefix: str, cfg: ModelConfig, trace: list | None = None) -> Tensor:
    """Multi-head self-attention over the ``T`` tokens of ``x`` ``(B, T, d_mod)``."""
    B, T, d = x.shape
    q = _heads(ad.linear(x, P[prefix + "q.W"], P[prefix + "q.b"]), cfg.A)
    k = _heads(ad.linear(x, P[prefix + "k.W"], P[prefix + "k.b"]), cfg.A)
    v = _heads(ad.linear(x, P[prefix + "v.W"], P[prefix + "v.b"]), cfg.A)
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(cfg.head_dim))
    attn = ad.softmax(scores, axis=-1)  # (B, A, T, T)
    if trace is not None:
        trace.append(attn.data)
    out = ad.reshape(ad.swapaxes(ad.matmul(attn, v), 1, 2), (B, T, d))
    return ad.linear(out, P[prefix + "o.W"], P[prefix + "o.b"])


def encoder_layer(x: Tensor, P: dict, prefix: str, cfg: ModelConfig, trace: list | None = None) -> Tensor:
    """Post-norm Transformer encoder layer: attention, add & norm, FFN, add & norm."""
    h = ad.add(x, self_attention(x, P, prefix, cfg, trace))
    if cfg.layer_norm:
        h = ad.layer_norm(h, P[prefix + "ln1.g"], P[prefix + "ln1.b"])
    f = ad.relu(ad.linear(h, P[prefix + "ff1.W"], P[prefix + "ff1.b"]))
    f = ad.linear(f, P[prefix + "ff2.W"], P[prefix + "ff2.b"])
    out = ad.add(h, f)
    if cfg.layer_norm:
        out = ad.layer_norm(out, P[prefix + "ln2.g"], P[prefix + "ln2.b"])
    return out


def mha_single_token(z, P: dict, cfg: ModelConfig, layer: int = 0, trace: list | None = None) -> Tensor:
    """One encoder layer applied to a single ``d_mod`` token (or a batch ``(B, d_mod)``).

    With a single token every attention weight is exactly one, so the
    attention block reduces to ``W_O (W_V z + b_V) + b_O`` per head group.
    """
    z = ad.as_tensor(z)
    shape = z.shape
    x = ad.reshape(z, (-1, 1, cfg.d_mod))
    return ad.reshape(encoder_layer(x, P, f"enc.{layer}.", cfg, trace), shape)


def root_encode(z_root: Tensor, P: dict, cfg: ModelConfig, trace: list | None = None) -> Tensor:
    """``S`` stacked single-token encoder layers on ``(B, d_mod)``."""
    x = ad.reshape(z_root, (z_root.shape[0], 1, cfg.d_mod))
    for s in range(cfg.S):
        x = encoder_layer(x, P, f"enc.{s}.", cfg, trace)
    return ad.reshape(x, (z_root.shape[0], cfg.d_mod))


def decode(z: Tensor, z_ctx: Tensor, P: dict) -> Tensor:
    """Shared per-user MLP on ``[z_k ; context]``; ``z_ctx`` is ``(B, d)`` or per-user ``(B, K, d)``."""
    B, K, _ = z.shape
    if z_ctx.ndim == 2:
        d = z_ctx.shape[1]
        z_ctx = ad.broadcast_to(ad.reshape(z_ctx, (B, 1, d)), (B, K, d))
    x = ad.concat([z, z_ctx], axis=-1)
    h = ad.relu(ad.linear(x, P["dec.l1.W"], P["dec.l1.b"]))
    return ad.sigmoid(ad.linear(h, P["dec.l2.W"], P["dec.l2.b"]))


# --------------------------------------------------------------------------
# full models
# --------------------------------------------------------------------------

def forward(ap, ue, P: dict, cfg: ModelConfig, trace: list | None = None) -> Tensor:
    """Normalized ``(B, K, 2)`` predictions ``[p_ul, p_dl]`` of the Tree-Transformer."""
    _, ap_global = ap_encode(ap, P)
    z = fuse(ue_embed(ue, P), ap_global)
    z_root = root_encode(tree_compress(z, P, cfg), P, cfg, trace)
    return decode(z, z_root, P)


def baseline_full_attention_forward(ap, ue, P: dict, cfg: ModelConfig, trace: list | None = None) -> Tensor:
    """Standard Transformer baseline: ``K`` UE tokens with ``K x K`` attention in every layer."""
    _, ap_global = ap_encode(ap, P)
    z = fuse(ue_embed(ue, P), ap_global)
    x = ad.linear(z, P["proj0.W"], P["proj0.b"])
    for s in range(cfg.S):
        x = encoder_layer(x, P, f"enc.{s}.", cfg, trace)
    return decode(z, x, P)


def rescale(p_norm, rc: RescaleConfig, total_dl_budget: float | None = None):
    """Map normalized ``(..., K, 2)`` outputs back to watts.

    UL: ``Delta_UL * p + P_UL_min`` (clipped to the label range).
    DL: ``p_check = Delta_DL * p + P_DL_min`` then proportional scaling so
    the K powers sum to the total budget; an all-zero ``p_check`` falls back
    to the uniform split.
    """
    p_norm = np.asarray(p_norm, dtype=float)
    budget = rc.total_dl_budget if total_dl_budget is None else total_dl_budget
    p_ul = (rc.ul_max - rc.ul_min) * p_norm[..., 0] + rc.ul_min
    p_ul = np.clip(p_ul, rc.ul_min, rc.ul_max)
    p_check = (rc.dl_max - rc.dl_min) * p_norm[..., 1] + rc.dl_min
    total = p_check.sum(axis=-1, keepdims=True)
    K = p_check.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        p_dl = np.where(total > 0, p_check * (budget / total), budget / K)
    return p_ul, p_dl


def predict(params: dict, ap_norm, ue_norm, cfg: ModelConfig, rc: RescaleConfig | None = None,
            kind: str = "tree", total_dl_budget: float | None = None):
    """Inference without graph recording.

    Returns the normalized ``(K, 2)`` outputs if ``rc`` is None, else the
    rescaled ``(p_ul, p_dl)`` in watts.
    """
    fwd = forward if kind == "tree" else baseline_full_attention_forward
    with ad.no_grad():
        P = {k: Tensor(v) for k, v in params.items()}
        out = fwd(ap_norm, ue_norm, P, cfg).data
    if np.ndim(ap_norm) == 2:
        out = out[0]
    if rc is None:
        return out
    return rescale(out, rc, total_dl_budget)
