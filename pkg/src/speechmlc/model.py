"""Style-query transformer decoder for multi-label classification, in numpy.

Learnable style queries (one per label) pass through pre-norm decoder layers:
self-attention among the queries, cross-attention onto projected acoustic
frames, and a GELU feed-forward block. Each decoded query vector feeds its own
affine head producing one logit. ``backward`` returns exact gradients for every
trainable array from the activations kept in a :class:`ForwardTrace`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError, NumericError

Params = Dict[str, np.ndarray]

_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
_GELU_C = math.sqrt(2.0 / math.pi)
BUFFER_NAMES = ("input_norm.mean", "input_norm.scale")


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    n_labels: int = 8
    input_dim: int = 80
    ffn_dim: int = 0  # 0 means 4 * d_model
    target_frames: int = 500
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model
        for name in ("d_model", "n_layers", "n_heads", "n_labels", "input_dim", "ffn_dim", "target_frames"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable arrays in canonical order."""
    d, F = cfg.d_model, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "input.weight": (cfg.input_dim, d),
        "input.bias": (d,),
        "style_queries": (cfg.n_labels, d),
    }
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        for norm, attn in (("norm1", "self_attn"), ("norm2", "cross_attn")):
            shapes[pre + norm + ".gain"] = (d,)
            shapes[pre + norm + ".bias"] = (d,)
            for k in _ATTN_KEYS:
                shapes[f"{pre}{attn}.{k}"] = (d, d) if k.startswith("w") else (d,)
        shapes[pre + "norm3.gain"] = (d,)
        shapes[pre + "norm3.bias"] = (d,)
        shapes[pre + "ffn.w1"] = (d, F)
        shapes[pre + "ffn.b1"] = (F,)
        shapes[pre + "ffn.w2"] = (F, d)
        shapes[pre + "ffn.b2"] = (d,)
    shapes["heads.weight"] = (cfg.n_labels, d)
    shapes["heads.bias"] = (cfg.n_labels,)
    return shapes


def all_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = parameter_shapes(cfg)
    for name in BUFFER_NAMES:
        shapes[name] = (cfg.input_dim,)
    return shapes


def trainable_names(cfg: ModelConfig) -> list[str]:
    return list(parameter_shapes(cfg))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_parameters(cfg: ModelConfig, seed: int, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "style_queries":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name == "heads.weight":
            arr = _xavier(rng, cfg.d_model, 1, shape)
        elif leaf == "gain":
            arr = np.ones(shape)
        elif len(shape) == 2:
            arr = _xavier(rng, shape[0], shape[1], shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    params["input_norm.mean"] = np.zeros(cfg.input_dim, dtype=dtype)
    params["input_norm.scale"] = np.ones(cfg.input_dim, dtype=dtype)
    return params


def positional_encoding(n_frames: int, d_model: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    rates = 10000.0 ** (-np.arange(0, d_model, 2) / d_model)
    pe = np.zeros((n_frames, d_model))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d_model // 2])
    return pe.astype(dtype)


# -- building blocks -----------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict(logits) -> np.ndarray:
    """Per-label presence probabilities."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain non-finite values")
    return sigmoid(logits)


def _layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def _layer_norm_backward(dy, cache):
    xhat, rstd, gain = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _affine(x, w, b):
    return x @ w + b


def _affine_backward(dy, x, w):
    d_in = w.shape[0]
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.T, dw, db


def _split_heads(x, n_heads):
    B, N, d = x.shape
    return x.reshape(B, N, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * dh)


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def multi_head_attention(p: Mapping[str, np.ndarray], queries, keys, values, n_heads: int):
    """Scaled dot-product attention with input and output projections.

    ``p`` holds wq, bq, wk, bk, wv, bv, wo, bo. Inputs are (B, M, d) and
    (B, N, d), or unbatched (M, d)/(N, d). Returns ``(output, cache)``; the
    attention weights are ``cache["weights"]`` with shape (B, H, M, N).
    """
    unbatched = np.ndim(queries) == 2
    if unbatched:
        queries, keys, values = queries[None], keys[None], values[None]
    d = queries.shape[-1]
    if d % n_heads:
        raise ConfigurationError(f"model width {d} is not divisible by n_heads={n_heads}")
    for arr in (queries, keys, values):
        if not np.all(np.isfinite(arr)):
            raise NumericError("attention inputs contain non-finite values")
    scale = 1.0 / math.sqrt(d // n_heads)
    q = _split_heads(_affine(queries, p["wq"], p["bq"]), n_heads)
    k = _split_heads(_affine(keys, p["wk"], p["bk"]), n_heads)
    v = _split_heads(_affine(values, p["wv"], p["bv"]), n_heads)
    weights = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = _merge_heads(weights @ v)
    out = _affine(o, p["wo"], p["bo"])
    cache = {"xq": queries, "xk": keys, "xv": values, "q": q, "k": k, "v": v,
             "weights": weights, "o": o, "scale": scale, "n_heads": n_heads}
    if unbatched:
        out = out[0]
    return out, cache


def multi_head_attention_backward(dout, p, cache):
    """Returns (d_queries, d_keys, d_values, grads) with grads keyed like ``p``."""
    n_heads, scale = cache["n_heads"], cache["scale"]
    if dout.ndim == 2:
        dout = dout[None]
    grads = {}
    do, grads["wo"], grads["bo"] = _affine_backward(dout, cache["o"], p["wo"])
    do = _split_heads(do, n_heads)
    A = cache["weights"]
    dA = do @ cache["v"].transpose(0, 1, 3, 2)
    dv = A.transpose(0, 1, 3, 2) @ do
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dq = dS @ cache["k"]
    dk = dS.transpose(0, 1, 3, 2) @ cache["q"]
    dxq, grads["wq"], grads["bq"] = _affine_backward(_merge_heads(dq), cache["xq"], p["wq"])
    dxk, grads["wk"], grads["bk"] = _affine_backward(_merge_heads(dk), cache["xk"], p["wk"])
    dxv, grads["wv"], grads["bv"] = _affine_backward(_merge_heads(dv), cache["xv"], p["wv"])
    return dxq, dxk, dxv, grads


def attention(queries, keys, values, n_heads: int, p: Mapping[str, np.ndarray] | None = None):
    """Multi-head attention output for (M, d) queries over (N, d) keys/values.

    Without ``p`` the projections are identities with zero bias.
    """
    d = np.shape(queries)[-1]
    if p is None:
        eye, zero = np.eye(d), np.zeros(d)
        p = {k: (eye if k.startswith("w") else zero) for k in _ATTN_KEYS}
    out, _ = multi_head_attention(p, queries, keys, values, n_heads)
    return out


# -- model -----------------------------------------------------------------------------


def _sub(params: Params, prefix: str) -> dict[str, np.ndarray]:
    return {k: params[prefix + k] for k in _ATTN_KEYS}


@dataclass
class ForwardTrace:
    x: np.ndarray
    memory: np.ndarray
    layers: list = field(default_factory=list)
    decoded: np.ndarray | None = None
    param_refs: tuple = ()

    def attention_weights(self):
        """All attention-weight tensors, self then cross per layer."""
        out = []
        for layer in self.layers:
            out.append(layer["self"]["weights"])
            out.append(layer["cross"]["weights"])
        return out


def _dropout_mask(rng, shape, rate, dtype):
    if rng is None or rate <= 0.0:
        return None
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


def forward(params: Params, cfg: ModelConfig, features, rng: np.random.Generator | None = None):
    """Logits (B, K) for a batch of fixed-length feature matrices (B, T, D).

    ``features`` is an array or a sequence of FeatureSequence objects. Dropout
    is applied only when ``rng`` is given and ``cfg.dropout > 0``.
    """
    if isinstance(features, np.ndarray):
        x = features
    else:
        x = np.stack([getattr(f, "frames", f) for f in features])
    dtype = params["input.weight"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or x.shape[1] != cfg.target_frames or x.shape[2] != cfg.input_dim:
        raise ConfigurationError(
            f"expected features of shape (B, {cfg.target_frames}, {cfg.input_dim}), got {x.shape}")
    B = x.shape[0]
    K, d = cfg.n_labels, cfg.d_model
    xn = (x - params["input_norm.mean"]) * params["input_norm.scale"]
    memory = _affine(xn, params["input.weight"], params["input.bias"])
    memory = memory + positional_encoding(cfg.target_frames, d, dtype)
    trace = ForwardTrace(x=xn, memory=memory)
    q = np.broadcast_to(params["style_queries"], (B, K, d)).copy()
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        cache = {}
        a, cache["norm1"] = _layer_norm(q, params[pre + "norm1.gain"], params[pre + "norm1.bias"], cfg.ln_eps)
        sa, cache["self"] = multi_head_attention(_sub(params, pre + "self_attn."), a, a, a, cfg.n_heads)
        cache["drop1"] = _dropout_mask(rng, sa.shape, cfg.dropout, dtype)
        q = q + (sa if cache["drop1"] is None else sa * cache["drop1"])
        b, cache["norm2"] = _layer_norm(q, params[pre + "norm2.gain"], params[pre + "norm2.bias"], cfg.ln_eps)
        ca, cache["cross"] = multi_head_attention(_sub(params, pre + "cross_attn."), b, memory, memory,
                                                  cfg.n_heads)
        cache["drop2"] = _dropout_mask(rng, ca.shape, cfg.dropout, dtype)
        q = q + (ca if cache["drop2"] is None else ca * cache["drop2"])
        c, cache["norm3"] = _layer_norm(q, params[pre + "norm3.gain"], params[pre + "norm3.bias"], cfg.ln_eps)
        h = _affine(c, params[pre + "ffn.w1"], params[pre + "ffn.b1"])
        g, t = _gelu(h)
        f = _affine(g, params[pre + "ffn.w2"], params[pre + "ffn.b2"])
        cache["ffn"] = (c, h, g, t)
        cache["drop3"] = _dropout_mask(rng, f.shape, cfg.dropout, dtype)
        q = q + (f if cache["drop3"] is None else f * cache["drop3"])
        trace.layers.append(cache)
    trace.decoded = q
    logits = (q * params["heads.weight"]).sum(axis=-1) + params["heads.bias"]
    trace.param_refs = tuple(params[name] for name in trainable_names(cfg))
    return logits, trace


def backward(params: Params, cfg: ModelConfig, trace: ForwardTrace, dlogits) -> Params:
    """Gradients of a scalar loss for every trainable array, given d loss / d logits."""
    names = trainable_names(cfg)
    if len(trace.param_refs) != len(names) or any(
            params.get(n) is not ref for n, ref in zip(names, trace.param_refs)):
        raise ContractError("forward trace was produced with different parameters")
    B = trace.decoded.shape[0]
    dlogits = np.asarray(dlogits, dtype=trace.decoded.dtype)
    if dlogits.shape != (B, cfg.n_labels):
        raise ContractError(f"dlogits has shape {dlogits.shape}, expected {(B, cfg.n_labels)}")
    grads: Params = {}
    grads["heads.weight"] = (dlogits[:, :, None] * trace.decoded).sum(axis=0)
    grads["heads.bias"] = dlogits.sum(axis=0)
    dq = dlogits[:, :, None] * params["heads.weight"][None]
    dmem = np.zeros_like(trace.memory)
    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}."
        cache = trace.layers[l]

        df = dq if cache["drop3"] is None else dq * cache["drop3"]
        c, h, g, t = cache["ffn"]
        dg, grads[pre + "ffn.w2"], grads[pre + "ffn.b2"] = _affine_backward(df, g, params[pre + "ffn.w2"])
        dh = dg * _gelu_grad(h, t)
        dc, grads[pre + "ffn.w1"], grads[pre + "ffn.b1"] = _affine_backward(dh, c, params[pre + "ffn.w1"])
        dn, grads[pre + "norm3.gain"], grads[pre + "norm3.bias"] = _layer_norm_backward(dc, cache["norm3"])
        dq = dq + dn

        dca = dq if cache["drop2"] is None else dq * cache["drop2"]
        db, dk, dv, ag = multi_head_attention_backward(dca, _sub(params, pre + "cross_attn."), cache["cross"])
        dmem += dk + dv
        for k, v in ag.items():
            grads[pre + "cross_attn." + k] = v
        dn, grads[pre + "norm2.gain"], grads[pre + "norm2.bias"] = _layer_norm_backward(db, cache["norm2"])
        dq = dq + dn

        dsa = dq if cache["drop1"] is None else dq * cache["drop1"]
        da_q, da_k, da_v, ag = multi_head_attention_backward(dsa, _sub(params, pre + "self_attn."), cache["self"])
        for k, v in ag.items():
            grads[pre + "self_attn." + k] = v
        dn, grads[pre + "norm1.gain"], grads[pre + "norm1.bias"] = _layer_norm_backward(
            da_q + da_k + da_v, cache["norm1"])
        dq = dq + dn
    grads["style_queries"] = dq.sum(axis=0)
    _, grads["input.weight"], grads["input.bias"] = _affine_backward(dmem, trace.x, params["input.weight"])
    return {n: grads[n].astype(params[n].dtype, copy=False) for n in names}


# -- checkpoints -------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SMLCCKPT"
CHECKPOINT_VERSION = 1
_INT_TAG, _FLOAT_TAG = 0, 1


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(params: Params, cfg: ModelConfig, path) -> Path:
    """Little-endian binary: magic, version, tagged config fields, then named float32 arrays."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    cfg_items = list(asdict(cfg).items())
    out += struct.pack("<I", len(cfg_items))
    for name, value in cfg_items:
        out += _pack_name(name)
        if isinstance(value, float):
            out += struct.pack("<Bd", _FLOAT_TAG, value)
        else:
            out += struct.pack("<Bq", _INT_TAG, int(value))
    shapes = all_shapes(cfg)
    out += struct.pack("<I", len(shapes))
    for name, shape in shapes.items():
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise ConfigurationError(f"parameter {name} has shape {arr.shape}, config implies {shape}")
        out += _pack_name(name)
        out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    path.write_bytes(bytes(out))
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def name(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        return raw.decode("utf-8")


def load_checkpoint(path, expect: Mapping[str, object] | None = None) -> tuple[Params, ModelConfig]:
    """Read a checkpoint; ``expect`` pins config fields (mismatch -> ConfigurationError)."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:8]!r}")
    r.pos = 8
    (version,) = r.take("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (n_fields,) = r.take("<I")
    known = {f.name for f in fields(ModelConfig)}
    values = {}
    for _ in range(n_fields):
        name = r.name()
        (tag,) = r.take("<B")
        if tag == _FLOAT_TAG:
            (values[name],) = r.take("<d")
        elif tag == _INT_TAG:
            (values[name],) = r.take("<q")
        else:
            raise FormatError(f"{path}: unknown config tag {tag} for {name}")
        if name not in known:
            raise FormatError(f"{path}: unknown config field {name!r}")
    try:
        cfg = ModelConfig(**values)
    except (TypeError, ConfigurationError) as exc:
        raise FormatError(f"{path}: invalid stored config ({exc})") from exc
    for key, want in (expect or {}).items():
        if key not in known:
            raise ConfigurationError(f"unknown config field {key!r}")
        if getattr(cfg, key) != want:
            raise ConfigurationError(f"checkpoint field {key}={getattr(cfg, key)} does not match expected {want}")
    shapes = all_shapes(cfg)
    (n_groups,) = r.take("<I")
    if n_groups != len(shapes):
        raise FormatError(f"{path}: {n_groups} parameter groups, config implies {len(shapes)}")
    params: Params = {}
    for want_name, want_shape in shapes.items():
        name = r.name()
        if name != want_name:
            raise FormatError(f"{path}: expected parameter {want_name!r}, found {name!r}")
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        if tuple(shape) != want_shape:
            raise FormatError(f"{path}: {name} has shape {tuple(shape)}, config implies {want_shape}")
        count = int(np.prod(shape))
        if r.pos + 4 * count > len(data):
            raise FormatError(f"{path}: truncated data for {name}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=r.pos).reshape(shape).astype(np.float32)
        r.pos += 4 * count
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return params, cfg
