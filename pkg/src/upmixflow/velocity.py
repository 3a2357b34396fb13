"""Transformer velocity field ``v(z_t, t, z_cond)`` over latent time frames.

Tokens are latent frames: a ``[C, D, T']`` latent becomes ``T'`` tokens of
``C*D`` features.  Every block runs pre-norm self-attention over the target
tokens, pre-norm cross-attention into the projected stereo tokens and a
pre-norm GELU feed-forward.  A conditioning vector (time embedding plus the
mean-pooled stereo tokens) drives a FiLM modulation at each block input and
a per-feature gate on a latent skip path at the output.  The output
projection and the skip gate start at zero, so an untrained net is the zero
field.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import AdamState, Tensor

_CKPT_MAGIC = b"IFCK"
_CKPT_VERSION = 1
_INIT_STD = 0.02


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    num_blocks: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    latent_dim: int = 8
    target_channels: int = 12
    cond_channels: int = 2
    time_embed_dim: int = 64
    max_frames: int = 250
    ff_mult: int = 4
    use_film: bool = True
    use_cross_attention: bool = True
    latent_skip: bool = True

    def __post_init__(self):
        for name in ("num_blocks", "hidden_dim", "num_heads", "latent_dim", "target_channels",
                     "cond_channels", "time_embed_dim", "max_frames", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @classmethod
    def desk(cls, **kw) -> "NetConfig":
        return cls(**{**dict(num_blocks=2, num_heads=4, hidden_dim=64, latent_dim=8), **kw})

    @classmethod
    def full(cls, **kw) -> "NetConfig":
        return cls(**{**dict(num_blocks=12, num_heads=16, hidden_dim=1024, latent_dim=64,
                             time_embed_dim=256), **kw})

    @property
    def target_features(self) -> int:
        return self.target_channels * self.latent_dim

    @property
    def cond_features(self) -> int:
        return self.cond_channels * self.latent_dim


def parameter_count(cfg: NetConfig) -> int:
    """Closed-form size of :func:`init_parameters` for ``cfg``."""
    h, f, fc, e = cfg.hidden_dim, cfg.target_features, cfg.cond_features, cfg.time_embed_dim
    linear = lambda i, o: i * o + o  # noqa: E731
    attn = 2 * h + 4 * linear(h, h)
    block = attn + 2 * h + linear(h, cfg.ff_mult * h) + linear(cfg.ff_mult * h, h)
    if cfg.use_cross_attention:
        block += attn
    if cfg.use_film:
        block += 2 * linear(h, h)
    total = linear(f, h) + linear(fc, h) + 2 * h + cfg.max_frames * h
    total += linear(e, h) + linear(h, h)
    total += cfg.num_blocks * block
    total += 2 * h + linear(h, f)
    if cfg.latent_skip:
        total += linear(h, f)
    return total


class VelocityField:
    def __init__(self, config: NetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __call__(self, z_t, t, z_cond) -> np.ndarray:
        return forward(self, z_t, t, z_cond).data

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=np.float64)


def init_parameters(cfg: NetConfig, seed: int = 0) -> VelocityField:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    h = cfg.hidden_dim

    def weight(name, shape, std=_INIT_STD):
        params[name] = Tensor(rng.normal(0.0, std, shape) if std else np.zeros(shape),
                              requires_grad=True, name=name)

    def linear(name, i, o, zero=False):
        weight(name + ".w", (i, o), 0.0 if zero else _INIT_STD)
        weight(name + ".b", (o,), 0.0)

    def norm(name):
        params[name + ".g"] = Tensor(np.ones(h), requires_grad=True, name=name + ".g")
        weight(name + ".b", (h,), 0.0)

    linear("in_proj", cfg.target_features, h)
    linear("cond_proj", cfg.cond_features, h)
    norm("cond_norm")
    weight("pos_emb", (cfg.max_frames, h))
    linear("time.fc1", cfg.time_embed_dim, h)
    linear("time.fc2", h, h)
    for b in range(cfg.num_blocks):
        p = f"blocks.{b}."
        if cfg.use_film:
            linear(p + "film_scale", h, h)
            linear(p + "film_shift", h, h)
        norm(p + "norm1")
        for proj in "qkvo":
            linear(p + f"self.{proj}", h, h)
        if cfg.use_cross_attention:
            norm(p + "norm2")
            for proj in "qkvo":
                linear(p + f"cross.{proj}", h, h)
        norm(p + "norm3")
        linear(p + "ff.fc1", h, cfg.ff_mult * h)
        linear(p + "ff.fc2", cfg.ff_mult * h, h)
    norm("final_norm")
    linear("out_proj", h, cfg.target_features, zero=True)
    if cfg.latent_skip:
        linear("skip_gate", h, cfg.target_features, zero=True)
    return VelocityField(cfg, params)


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """``[sin(1000 t w_i), cos(1000 t w_i)]`` with ``w_i = 10000^(-i / (dim/2))``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t.min()}..{t.max()}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def time_embed(net: VelocityField, t) -> Tensor:
    """Sinusoidal features of ``t`` through the two-layer time MLP, ``[B, hidden]``."""
    P = net.params
    feat = Tensor(sinusoidal_features(t, net.config.time_embed_dim))
    h = T.gelu(_linear(feat, P, "time.fc1"))
    return _linear(h, P, "time.fc2")


def _linear(x: Tensor, P, name: str) -> Tensor:
    return T.add(T.matmul(x, P[name + ".w"]), P[name + ".b"])


def _norm(x: Tensor, P, name: str) -> Tensor:
    return T.layer_norm(x, P[name + ".g"], P[name + ".b"], 1e-6)


def _heads(x: Tensor, n: int) -> Tensor:
    b, t, h = x.shape
    return T.transpose(T.reshape(x, (b, t, n, h // n)), (0, 2, 1, 3))


def _attention(q_in: Tensor, kv_in: Tensor, P, prefix: str, heads: int) -> Tensor:
    b, tq, h = q_in.shape
    q = _heads(_linear(q_in, P, prefix + ".q"), heads)
    k = _heads(_linear(kv_in, P, prefix + ".k"), heads)
    v = _heads(_linear(kv_in, P, prefix + ".v"), heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(h // heads))
    ctx = T.matmul(T.softmax(scores), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, h))
    return _linear(ctx, P, prefix + ".o")


def _tokens(z, channels: int, latent_dim: int) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(getattr(z, "data", z)))
    b, c, d, frames = z.shape
    if c != channels or d != latent_dim:
        raise T.ShapeError(f"expected [*, {channels}, {latent_dim}, T'] latent, got {list(z.shape)}")
    return T.reshape(T.transpose(z, (0, 3, 1, 2)), (b, frames, c * d))


def film(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return T.film(x, scale, shift)


def forward(net: VelocityField, z_t, t, z_cond) -> Tensor:
    """Velocity for a single latent ``[C, D, T']`` or a batch ``[B, C, D, T']``.

    ``t`` is a scalar or one value per batch item.  The result has the shape of ``z_t``.
    """
    cfg, P = net.config, net.params
    zt = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(getattr(z_t, "data", z_t)))
    zc = z_cond if isinstance(z_cond, Tensor) else Tensor(np.asarray(getattr(z_cond, "data", z_cond)))
    single = zt.ndim == 3
    if single:
        zt, zc = T.reshape(zt, (1,) + zt.shape), T.reshape(zc, (1,) + zc.shape)
    if not np.all(np.isfinite(zt.data)) or not np.all(np.isfinite(zc.data)):
        raise T.NonFiniteError("velocity input contains non-finite values")
    batch, frames = zt.shape[0], zt.shape[-1]
    if zc.shape[0] != batch or zc.shape[-1] != frames:
        raise T.ShapeError(f"z_t {list(zt.shape)} and z_cond {list(zc.shape)} disagree on batch/frames")
    if frames > cfg.max_frames:
        raise T.ShapeError(f"{frames} frames exceeds max_frames={cfg.max_frames}")
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))

    x = _tokens(zt, cfg.target_channels, cfg.latent_dim)
    pos = T.take_rows(P["pos_emb"], frames)
    h = T.add(_linear(x, P, "in_proj"), pos)
    ctok = T.add(_linear(_tokens(zc, cfg.cond_channels, cfg.latent_dim), P, "cond_proj"), pos)
    ctok = _norm(ctok, P, "cond_norm")
    cvec = T.gelu(T.add(time_embed(net, tt), T.mean(ctok, axis=1)))

    for b in range(cfg.num_blocks):
        p = f"blocks.{b}."
        if cfg.use_film:
            h = film(h, _linear(cvec, P, p + "film_scale"), _linear(cvec, P, p + "film_shift"))
        a = _norm(h, P, p + "norm1")
        h = T.add(h, _attention(a, a, P, p + "self", cfg.num_heads))
        if cfg.use_cross_attention:
            a = _norm(h, P, p + "norm2")
            h = T.add(h, _attention(a, ctok, P, p + "cross", cfg.num_heads))
        a = _norm(h, P, p + "norm3")
        h = T.add(h, _linear(T.gelu(_linear(a, P, p + "ff.fc1")), P, p + "ff.fc2"))

    v = _linear(_norm(h, P, "final_norm"), P, "out_proj")
    if cfg.latent_skip:
        v = T.add(v, T.token_mul(x, _linear(cvec, P, "skip_gate")))
    v = T.transpose(T.reshape(v, (batch, frames, cfg.target_channels, cfg.latent_dim)), (0, 2, 3, 1))
    if single:
        v = T.reshape(v, v.shape[1:])
    return v


# --- checkpoints -------------------------------------------------------------

_CFG_INTS = ("num_blocks", "hidden_dim", "num_heads", "latent_dim", "target_channels",
             "cond_channels", "time_embed_dim", "max_frames", "ff_mult")
_CFG_FLAGS = ("use_film", "use_cross_attention", "latent_skip")


def _pack_config(cfg: NetConfig) -> bytes:
    flags = sum(1 << i for i, f in enumerate(_CFG_FLAGS) if getattr(cfg, f))
    return struct.pack("<" + "I" * (len(_CFG_INTS) + 1), *(getattr(cfg, f) for f in _CFG_INTS), flags)


def _unpack_config(blob: bytes, off: int) -> tuple[NetConfig, int]:
    n = len(_CFG_INTS) + 1
    vals = struct.unpack_from("<" + "I" * n, blob, off)
    kw = dict(zip(_CFG_INTS, vals))
    kw.update({f: bool(vals[-1] >> i & 1) for i, f in enumerate(_CFG_FLAGS)})
    return NetConfig(**kw), off + 4 * n


def save_checkpoint(net: VelocityField, optimizer_state: AdamState | None, step: int,
                    path: str | os.PathLike, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters, optimiser moments and auxiliary arrays in the IFCK format."""
    tensors: list[tuple[str, np.ndarray]] = [("param/" + k, p.data) for k, p in net.params.items()]
    adam_t = 0
    if optimizer_state is not None:
        adam_t = optimizer_state.step
        tensors += [("adam_m/" + k, v) for k, v in optimizer_state.m.items()]
        tensors += [("adam_v/" + k, v) for k, v in optimizer_state.v.items()]
    tensors += [("extra/" + k, np.asarray(v, dtype=np.float64)) for k, v in (extra or {}).items()]
    parts = [struct.pack("<4sI", _CKPT_MAGIC, _CKPT_VERSION), _pack_config(net.config),
             struct.pack("<QQI", step, adam_t, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I" + "I" * arr.ndim, arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    body = b"".join(parts)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    net: VelocityField
    optimizer_state: AdamState | None
    step: int
    extra: dict[str, np.ndarray]


def load_checkpoint(path: str | os.PathLike, expect: NetConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != _CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {_CKPT_VERSION}")
    if len(blob) < 12 or zlib.crc32(blob[:-4]) != struct.unpack_from("<I", blob, len(blob) - 4)[0]:
        raise CorruptCheckpointError(f"{path}: CRC mismatch (truncated or corrupt tensor block)")
    body = blob[:-4]
    try:
        cfg, off = _unpack_config(body, 8)
        step, adam_t, count = struct.unpack_from("<QQI", body, off)
        off += 20
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + nlen].decode("utf-8")
            off += 4 + nlen
            (rank,) = struct.unpack_from("<I", body, off)
            dims = struct.unpack_from("<" + "I" * rank, body, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 8 * size > len(body):
                raise CorruptCheckpointError(f"{path}: tensor {name!r} runs past end of file")
            arrays[name] = np.frombuffer(body, "<f8", size, off).astype(np.float64).reshape(dims)
            off += 8 * size
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    if off != len(body):
        raise CorruptCheckpointError(f"{path}: {len(body) - off} trailing bytes")
    if expect is not None and asdict(expect) != asdict(cfg):
        raise ConfigMismatchError(f"{path}: checkpoint config {cfg} does not match {expect}")

    net = init_parameters(cfg, 0)
    for k, p in net.params.items():
        arr = arrays.get("param/" + k)
        if arr is None or arr.shape != p.shape:
            raise ConfigMismatchError(f"{path}: parameter {k!r} missing or mis-shaped")
        p.data = arr
    opt = None
    if any(n.startswith("adam_m/") for n in arrays):
        opt = AdamState(adam_t, {k: arrays["adam_m/" + k] for k in net.params},
                        {k: arrays["adam_v/" + k] for k in net.params})
    extra = {n[6:]: a for n, a in arrays.items() if n.startswith("extra/")}
    return Checkpoint(net, opt, int(step), extra)


