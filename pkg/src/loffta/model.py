"""Projection stem, compact pre-norm transformer classifier, loss, exact grads.

The network consumes cached feature tokens directly (no patchifier). One
shared linear projection + LayerNorm maps provider width d to classifier
width m for both the grid tokens and the offline CLS vector. The projected
offline CLS is merged with a learned CLS vector by elementwise sum, the
sequence gets positional embeddings, runs through L pre-norm blocks
(multi-head self-attention + 4x GELU MLP), a final LayerNorm, and a linear
head read off the CLS position.

Everything is plain numpy with a hand-written reverse pass, so gradients are
exact, deterministic, and checkable against finite differences in float64.
No dropout anywhere: training stochasticity lives entirely in augmentation.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import memtrack
from .errors import CorruptShard, InvalidValue, ShapeMismatch, StorageError
from .rng import RngStream

LN_EPS = 1e-6
# python floats, not numpy scalars: keeps float32 math in float32 (NEP 50)
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

CKPT_MAGIC = b"LFTC"


@dataclass(frozen=True)
class ModelConfig:
    """Classifier geometry. Defaults follow the DeiT-S shape (384/12/6)."""

    feature_dim: int
    grid_h: int
    grid_w: int
    num_classes: int
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6

    def __post_init__(self):
        if min(self.feature_dim, self.grid_h, self.grid_w, self.num_classes,
               self.embed_dim, self.depth, self.heads) < 1:
            raise InvalidValue("all model dimensions must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise InvalidValue(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def seq_len(self) -> int:
        return self.grid_h * self.grid_w + 1

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim, "grid_h": self.grid_h,
            "grid_w": self.grid_w, "num_classes": self.num_classes,
            "embed_dim": self.embed_dim, "depth": self.depth,
            "heads": self.heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def param_order(cfg: ModelConfig) -> list[str]:
    """The fixed parameter ordering used by init and checkpoints."""
    names = ["proj.weight", "proj.bias", "proj.ln_gain", "proj.ln_bias",
             "learned_cls", "pos_embed"]
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        names += [
            f"{b}.ln1.gain", f"{b}.ln1.bias",
            f"{b}.attn.qkv.weight", f"{b}.attn.qkv.bias",
            f"{b}.attn.out.weight", f"{b}.attn.out.bias",
            f"{b}.ln2.gain", f"{b}.ln2.bias",
            f"{b}.mlp.fc1.weight", f"{b}.mlp.fc1.bias",
            f"{b}.mlp.fc2.weight", f"{b}.mlp.fc2.bias",
        ]
    names += ["final_ln.gain", "final_ln.bias", "head.weight", "head.bias"]
    return names


def param_shape(name: str, cfg: ModelConfig) -> tuple[int, ...]:
    d, m, C = cfg.feature_dim, cfg.embed_dim, cfg.num_classes
    if name == "proj.weight":
        return (d, m)
    if name in ("proj.bias", "proj.ln_gain", "proj.ln_bias", "learned_cls"):
        return (m,)
    if name == "pos_embed":
        return (cfg.seq_len, m)
    if name == "head.weight":
        return (m, C)
    if name == "head.bias":
        return (C,)
    if name.startswith("final_ln."):
        return (m,)
    # block-level parameters
    leaf = name.split(".", 2)[2]
    return {
        "ln1.gain": (m,), "ln1.bias": (m,),
        "attn.qkv.weight": (m, 3 * m), "attn.qkv.bias": (3 * m,),
        "attn.out.weight": (m, m), "attn.out.bias": (m,),
        "ln2.gain": (m,), "ln2.bias": (m,),
        "mlp.fc1.weight": (m, 4 * m), "mlp.fc1.bias": (4 * m,),
        "mlp.fc2.weight": (4 * m, m), "mlp.fc2.bias": (m,),
    }[leaf]


def decays(name: str) -> bool:
    """Weight decay hits 2-D weight matrices only: never LN parameters,
    biases, the learned CLS, or positional embeddings."""
    return name.endswith(".weight")


def _trunc_normal(rng: RngStream, shape, std: float) -> np.ndarray:
    """Normal(0, std) with draws beyond two standard deviations resampled."""
    x = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, rng: RngStream,
                dtype=np.float32) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for idx, name in enumerate(param_order(cfg)):
        shape = param_shape(name, cfg)
        if name.endswith((".gain",)) or name.endswith("ln_gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias") or name.endswith("ln_bias"):
            arr = np.zeros(shape)
        else:
            # weights, learned_cls, and pos_embed get truncated normal 0.02
            arr = _trunc_normal(rng.derive(idx), shape, 0.02)
        params[name] = memtrack.track(arr.astype(dtype))
    return params


# -- primitive forward/backward pieces ---------------------------------------

def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    """Per-token LN over the last axis, population variance, eps 1e-6.
    Returns (out, xhat, inv_std) so the backward pass can reuse them."""
    mu = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mu).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std


def layer_norm_backward(dout: np.ndarray, xhat: np.ndarray,
                        inv_std: np.ndarray, gain: np.ndarray):
    """Returns (dx, dgain, dbias); dgain/dbias summed over all tokens."""
    m = xhat.shape[-1]
    dxhat = dout * gain
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    axes = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=axes)
    dbias = dout.sum(axis=axes)
    return dx, dgain, dbias


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, m = x.shape
    return x.reshape(b, n, heads, m // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, heads, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, heads * hd)


def merge_cls(offline_cls_projected: np.ndarray,
              learned_cls: np.ndarray) -> np.ndarray:
    """Elementwise sum of the projected offline CLS and the learned CLS."""
    if offline_cls_projected.shape[-1] != learned_cls.shape[-1]:
        raise ShapeMismatch(
            f"cls widths differ: {offline_cls_projected.shape[-1]} vs "
            f"{learned_cls.shape[-1]}")
    return offline_cls_projected + learned_cls


def project(tokens: np.ndarray, weight: np.ndarray, bias: np.ndarray,
            ln_gain: np.ndarray, ln_bias: np.ndarray) -> np.ndarray:
    """The projection stem on its own: LN(tokens @ weight + bias)."""
    if tokens.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(
            f"token width {tokens.shape[-1]} != projection input {weight.shape[0]}")
    out, _, _ = layer_norm(tokens @ weight + bias, ln_gain, ln_bias)
    return out


# -- full network -------------------------------------------------------------

def forward_pass(params: dict[str, np.ndarray], cfg: ModelConfig,
                 grid_tokens: np.ndarray, cls_vec: np.ndarray,
                 want_cache: bool = False):
    """Compute logits for a batch.

    grid_tokens: (B, h*w, d) row-major token grids; cls_vec: (B, d).
    Returns (logits, cache); cache is None unless want_cache.
    """
    if grid_tokens.ndim != 3 or cls_vec.ndim != 2:
        raise ShapeMismatch("expected grid_tokens (B, k, d) and cls_vec (B, d)")
    b, k, d = grid_tokens.shape
    if d != cfg.feature_dim or cls_vec.shape != (b, d):
        raise ShapeMismatch(
            f"feature width mismatch: got d={d}, cls {cls_vec.shape}, "
            f"expected d={cfg.feature_dim}")
    n = k + 1
    if n > params["pos_embed"].shape[0]:
        raise ShapeMismatch(
            f"sequence length {n} exceeds pos_embed rows "
            f"{params['pos_embed'].shape[0]}")
    dtype = params["proj.weight"].dtype
    scale = float(1.0 / np.sqrt(cfg.embed_dim // cfg.heads))

    xin = np.concatenate([cls_vec[:, None, :], grid_tokens], axis=1).astype(dtype)
    z = xin @ params["proj.weight"] + params["proj.bias"]
    p, proj_xhat, proj_inv = layer_norm(z, params["proj.ln_gain"],
                                        params["proj.ln_bias"])
    x = p.copy()
    x[:, 0, :] = merge_cls(p[:, 0, :], params["learned_cls"])
    x = x + params["pos_embed"][None, :n, :]

    cache = {"xin": xin, "proj_xhat": proj_xhat, "proj_inv": proj_inv,
             "n": n, "blocks": []} if want_cache else None

    for i in range(cfg.depth):
        bkey = f"blocks.{i}"
        xn1, xhat1, inv1 = layer_norm(x, params[f"{bkey}.ln1.gain"],
                                      params[f"{bkey}.ln1.bias"])
        qkv = xn1 @ params[f"{bkey}.attn.qkv.weight"] + params[f"{bkey}.attn.qkv.bias"]
        q, kk, v = np.split(qkv, 3, axis=-1)
        q = _split_heads(q, cfg.heads)
        kk = _split_heads(kk, cfg.heads)
        v = _split_heads(v, cfg.heads)
        att = _softmax((q @ kk.transpose(0, 1, 3, 2)) * scale)
        ctx = _merge_heads(att @ v)
        attn_out = ctx @ params[f"{bkey}.attn.out.weight"] + params[f"{bkey}.attn.out.bias"]
        x_mid = x + attn_out

        xn2, xhat2, inv2 = layer_norm(x_mid, params[f"{bkey}.ln2.gain"],
                                      params[f"{bkey}.ln2.bias"])
        h1 = xn2 @ params[f"{bkey}.mlp.fc1.weight"] + params[f"{bkey}.mlp.fc1.bias"]
        g1 = gelu(h1)
        mlp_out = g1 @ params[f"{bkey}.mlp.fc2.weight"] + params[f"{bkey}.mlp.fc2.bias"]
        x_next = x_mid + mlp_out

        if want_cache:
            cache["blocks"].append({
                "xhat1": memtrack.track(xhat1), "inv1": inv1,
                "xn1": memtrack.track(xn1), "q": memtrack.track(q),
                "k": memtrack.track(kk), "v": memtrack.track(v),
                "att": memtrack.track(att), "ctx": memtrack.track(ctx),
                "xhat2": memtrack.track(xhat2), "inv2": inv2,
                "xn2": memtrack.track(xn2), "h1": memtrack.track(h1),
                "g1": memtrack.track(g1),
            })
        x = x_next

    xf, xhatf, invf = layer_norm(x, params["final_ln.gain"],
                                 params["final_ln.bias"])
    cls_repr = xf[:, 0, :]
    logits = cls_repr @ params["head.weight"] + params["head.bias"]
    if want_cache:
        cache["xhatf"] = xhatf
        cache["invf"] = invf
        cache["cls_repr"] = cls_repr
        cache["scale"] = scale
    return logits, cache


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy. Returns (loss, dlogits, probs);
    dlogits = (softmax - onehot) / batch."""
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({b},)")
    if (labels < 0).any() or (labels >= c).any():
        raise IndexError(f"label outside [0, {c})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    loss = float(np.mean(lse - shifted[np.arange(b), labels]))
    probs = _softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits, probs


def backward_pass(params: dict[str, np.ndarray], cfg: ModelConfig,
                  cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every parameter tensor."""
    n = cache["n"]
    scale = cache["scale"]
    grads: dict[str, np.ndarray] = {}

    grads["head.weight"] = cache["cls_repr"].T @ dlogits
    grads["head.bias"] = dlogits.sum(axis=0)
    dcls_repr = dlogits @ params["head.weight"].T

    dxf = np.zeros_like(cache["xhatf"])
    dxf[:, 0, :] = dcls_repr
    dx, dgain, dbias = layer_norm_backward(dxf, cache["xhatf"], cache["invf"],
                                           params["final_ln.gain"])
    grads["final_ln.gain"] = dgain
    grads["final_ln.bias"] = dbias

    for i in reversed(range(cfg.depth)):
        bkey = f"blocks.{i}"
        blk = cache["blocks"][i]

        # MLP branch; dx is the gradient at the block output = residual path
        dmlp_out = dx
        flat_g1 = blk["g1"].reshape(-1, blk["g1"].shape[-1])
        flat_dmlp = dmlp_out.reshape(-1, dmlp_out.shape[-1])
        grads[f"{bkey}.mlp.fc2.weight"] = flat_g1.T @ flat_dmlp
        grads[f"{bkey}.mlp.fc2.bias"] = flat_dmlp.sum(axis=0)
        dg1 = dmlp_out @ params[f"{bkey}.mlp.fc2.weight"].T
        dh1 = dg1 * gelu_grad(blk["h1"])
        flat_xn2 = blk["xn2"].reshape(-1, blk["xn2"].shape[-1])
        flat_dh1 = dh1.reshape(-1, dh1.shape[-1])
        grads[f"{bkey}.mlp.fc1.weight"] = flat_xn2.T @ flat_dh1
        grads[f"{bkey}.mlp.fc1.bias"] = flat_dh1.sum(axis=0)
        dxn2 = dh1 @ params[f"{bkey}.mlp.fc1.weight"].T
        dx_mid, dgain2, dbias2 = layer_norm_backward(
            dxn2, blk["xhat2"], blk["inv2"], params[f"{bkey}.ln2.gain"])
        grads[f"{bkey}.ln2.gain"] = dgain2
        grads[f"{bkey}.ln2.bias"] = dbias2
        dx = dx + dx_mid

        # attention branch
        dattn_out = dx
        ctx = blk["ctx"]
        flat_ctx = ctx.reshape(-1, ctx.shape[-1])
        flat_dattn = dattn_out.reshape(-1, dattn_out.shape[-1])
        grads[f"{bkey}.attn.out.weight"] = flat_ctx.T @ flat_dattn
        grads[f"{bkey}.attn.out.bias"] = flat_dattn.sum(axis=0)
        dctx = _split_heads(dattn_out @ params[f"{bkey}.attn.out.weight"].T,
                            cfg.heads)
        datt = dctx @ blk["v"].transpose(0, 1, 3, 2)
        dv = blk["att"].transpose(0, 1, 3, 2) @ dctx
        att = blk["att"]
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dscores @ blk["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ blk["q"]) * scale
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        flat_xn1 = blk["xn1"].reshape(-1, blk["xn1"].shape[-1])
        flat_dqkv = dqkv.reshape(-1, dqkv.shape[-1])
        grads[f"{bkey}.attn.qkv.weight"] = flat_xn1.T @ flat_dqkv
        grads[f"{bkey}.attn.qkv.bias"] = flat_dqkv.sum(axis=0)
        dxn1 = dqkv @ params[f"{bkey}.attn.qkv.weight"].T
        dx_in, dgain1, dbias1 = layer_norm_backward(
            dxn1, blk["xhat1"], blk["inv1"], params[f"{bkey}.ln1.gain"])
        grads[f"{bkey}.ln1.gain"] = dgain1
        grads[f"{bkey}.ln1.bias"] = dbias1
        dx = dx + dx_in

    dpos = np.zeros_like(params["pos_embed"])
    dpos[:n] = dx.sum(axis=0)
    grads["pos_embed"] = dpos
    grads["learned_cls"] = dx[:, 0, :].sum(axis=0)

    # both CLS and grid tokens flowed through the shared projection stem
    dp = dx
    dz, dgainp, dbiasp = layer_norm_backward(dp, cache["proj_xhat"],
                                             cache["proj_inv"],
                                             params["proj.ln_gain"])
    grads["proj.ln_gain"] = dgainp
    grads["proj.ln_bias"] = dbiasp
    flat_xin = cache["xin"].reshape(-1, cache["xin"].shape[-1])
    flat_dz = dz.reshape(-1, dz.shape[-1])
    grads["proj.weight"] = flat_xin.T @ flat_dz
    grads["proj.bias"] = flat_dz.sum(axis=0)

    for name in grads:
        grads[name] = memtrack.track(np.ascontiguousarray(grads[name]))
    return grads


def loss_and_grads(params: dict[str, np.ndarray], cfg: ModelConfig,
                   grid_tokens: np.ndarray, cls_vec: np.ndarray,
                   labels: np.ndarray):
    """One full step of math: forward, loss, backward. Returns (loss, grads)."""
    logits, cache = forward_pass(params, cfg, grid_tokens, cls_vec,
                                 want_cache=True)
    loss, dlogits, _ = cross_entropy(logits, labels)
    grads = backward_pass(params, cfg, cache, dlogits)
    return loss, grads


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], cfg: ModelConfig,
                    step: int, extra: dict | None = None) -> None:
    """Magic + u32 header length + JSON header + little-endian f32 blob.
    Parameters are serialized in param_order; the order is also recorded in
    the header so the file is self-describing."""
    names = param_order(cfg)
    header = {
        "config": cfg.to_dict(),
        "step": int(step),
        "params": [{"name": nm, "shape": list(params[nm].shape)} for nm in names],
    }
    if extra:
        header["extra"] = extra
    head_bytes = json.dumps(header).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(head_bytes)))
            f.write(head_bytes)
            for nm in names:
                f.write(np.ascontiguousarray(params[nm], dtype="<f4").tobytes())
            f.flush()
            os.fsync(f.fileno())
    except OSError as e:
        raise StorageError(f"failed writing checkpoint {path}: {e}") from e


def load_checkpoint(path):
    """Returns (params, ModelConfig, step, extra)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != CKPT_MAGIC:
        raise CorruptShard(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    off = 8 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        params[entry["name"]] = memtrack.track(
            arr.reshape(shape).astype(np.float32))
        off += count * 4
    if off != len(blob):
        raise CorruptShard(f"{path}: trailing or missing parameter bytes")
    return params, cfg, int(header["step"]), header.get("extra", {})
