"""Per-channel frame codec: each hop-sized frame keeps its first D orthonormal DCT-II coefficients.

Encoding is linear and channel-independent; ``decode(encode(x))`` is the
orthogonal projection of every frame onto the span of the first D cosines.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .layout import ChannelLayout, MultichannelAudio

_MAGIC = b"IFLT"
_VERSION = 1


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    frame_rate: int = 25
    latent_dim: int = 8
    sample_rate: int = 48000

    def __post_init__(self):
        if self.frame_rate <= 0 or self.sample_rate % self.frame_rate:
            raise CodecError(f"sample rate {self.sample_rate} not divisible by frame rate {self.frame_rate}")
        if not 1 <= self.latent_dim <= self.hop:
            raise CodecError(f"latent_dim must be in [1, {self.hop}]")

    @property
    def hop(self) -> int:
        return self.sample_rate // self.frame_rate


@dataclass
class LatentTensor:
    data: np.ndarray  # [C, D, T']
    frame_rate: int = 25

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise CodecError(f"latent must be [C, D, T'], got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.data.shape[1]

    @property
    def frames(self) -> int:
        return self.data.shape[2]


@lru_cache(maxsize=8)
def dct_basis(n: int, d: int) -> np.ndarray:
    """First ``d`` rows of the orthonormal DCT-II matrix of size ``n``."""
    k = np.arange(d)[:, None]
    i = np.arange(n)[None, :]
    basis = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    basis[0] *= np.sqrt(0.5)
    basis.flags.writeable = False
    return basis


def encode(audio: MultichannelAudio, cfg: CodecConfig) -> LatentTensor:
    if audio.sample_rate != cfg.sample_rate:
        raise CodecError(f"audio at {audio.sample_rate} Hz, codec expects {cfg.sample_rate} Hz")
    hop = cfg.hop
    frames = audio.num_samples // hop
    if frames < 1:
        raise CodecError(f"audio of {audio.num_samples} samples is shorter than one {hop}-sample frame")
    x = audio.samples[:, :frames * hop].reshape(audio.num_channels, frames, hop)
    z = x @ dct_basis(hop, cfg.latent_dim).T  # [C, T', D]
    return LatentTensor(np.ascontiguousarray(z.transpose(0, 2, 1)), cfg.frame_rate)


def decode(z: LatentTensor, cfg: CodecConfig, layout: ChannelLayout | None = None) -> MultichannelAudio:
    if z.latent_dim != cfg.latent_dim or z.frame_rate != cfg.frame_rate:
        raise CodecError(f"latent D={z.latent_dim} @ {z.frame_rate} fps does not match codec "
                         f"D={cfg.latent_dim} @ {cfg.frame_rate} fps")
    frames = z.data.transpose(0, 2, 1) @ dct_basis(cfg.hop, cfg.latent_dim)  # [C, T', hop]
    samples = frames.reshape(z.channels, -1)
    return MultichannelAudio(cfg.sample_rate, samples,
                             layout or ChannelLayout.for_channel_count(z.channels))


def latent_stats(z: LatentTensor) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (population) variance over time for every (channel, dim) bin."""
    mu = z.data.mean(axis=2)
    var = ((z.data - mu[:, :, None]) ** 2).mean(axis=2)
    return mu, var


@dataclass
class LatentNormalizer:
    """Per-(C, D) standardisation fitted on training latents."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, latents: list[LatentTensor], floor: float = 1e-6) -> "LatentNormalizer":
        stacked = np.concatenate([z.data for z in latents], axis=2)
        mu, var = latent_stats(LatentTensor(stacked))
        std = np.sqrt(var)
        return cls(mu, np.where(std < floor, 1.0, std))

    def standardize(self, z: LatentTensor) -> LatentTensor:
        return LatentTensor((z.data - self.mean[:, :, None]) / self.std[:, :, None], z.frame_rate)

    def destandardize(self, z: LatentTensor) -> LatentTensor:
        return LatentTensor(z.data * self.std[:, :, None] + self.mean[:, :, None], z.frame_rate)


def write_latent(z: LatentTensor, path: str | os.PathLike) -> None:
    c, d, t = z.data.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIII", _MAGIC, _VERSION, c, d, t, z.frame_rate))
        fh.write(z.data.astype("<f4").tobytes())


def read_latent(path: str | os.PathLike) -> LatentTensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != _MAGIC:
        raise CodecError(f"{path}: not a latent cache file")
    version, c, d, t, rate = struct.unpack_from("<IIIII", blob, 4)
    if version != _VERSION:
        raise CodecError(f"{path}: unsupported latent cache version {version}")
    if len(blob) != 24 + 4 * c * d * t:
        raise CodecError(f"{path}: expected {c * d * t} values, file has {(len(blob) - 24) // 4}")
    data = np.frombuffer(blob, "<f4", c * d * t, 24).astype(np.float64).reshape(c, d, t)
    return LatentTensor(data, rate)
