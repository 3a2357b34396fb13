"""Fréchet distance between Gaussian fits of embedding sets, and per-channel diagnostics.

The default embedding is a fixed signal-statistics vector (``EMBED_DIM`` = 37):

====== =====================================================================
index  feature
====== =====================================================================
0-31   mean power in 32 triangular mel bands over 0..Nyquist, dB, floor -80
32     spectral centroid, Hz
33     85 % spectral rolloff, Hz
34     spectral flatness (geometric / arithmetic mean power), 0..1
35     mean of per-frame energy, dB, floor -80
36     variance of per-frame energy (dB^2)
====== =====================================================================

Frames are Hann-windowed, ``N_FFT`` samples long with 50 % overlap.  Inputs
shorter than one frame are zero-padded to a single frame.  Externally computed
embeddings can be imported from IFEM files (``read_embeddings``).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .layout import MultichannelAudio

FLOOR_DB = -80.0
N_FFT = 2048
HOP = N_FFT // 2
N_MELS = 32
ROLLOFF = 0.85
EMBED_DIM = N_MELS + 5
PROVIDER = "dsp-stats-v1"
UNAVAILABLE = ("visqol", "pam", "mad")  # need external pretrained models

_EM_MAGIC = b"IFEM"


class MetricsError(ValueError):
    pass


def _db(power) -> np.ndarray:
    p = np.asarray(power, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(p)
    return np.maximum(out, FLOOR_DB)


@lru_cache(maxsize=4)
def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]`` on the HTK mel scale, peak 1."""
    to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)  # noqa: E731
    from_mel = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)  # noqa: E731
    edges = from_mel(np.linspace(0.0, to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.flags.writeable = False
    return fb


def _frames(x: np.ndarray) -> np.ndarray:
    if x.size < N_FFT:
        x = np.pad(x, (0, N_FFT - x.size))
    count = 1 + (x.size - N_FFT) // HOP
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(count)[:, None]
    return x[idx]


def power_spectrogram(x: np.ndarray) -> np.ndarray:
    """``[frames, N_FFT // 2 + 1]`` power of the Hann-windowed STFT."""
    win = np.hanning(N_FFT)
    return np.abs(np.fft.rfft(_frames(x) * win, axis=1)) ** 2


def embed(signal: np.ndarray, sample_rate: int) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise MetricsError("embed expects a non-empty single-channel signal")
    if not np.all(np.isfinite(x)):
        raise MetricsError("embed input contains non-finite samples")
    spec = power_spectrogram(x)
    mean_pow = spec.mean(axis=0)
    bands = _db(mel_filterbank(sample_rate) @ mean_pow)

    freqs = np.fft.rfftfreq(N_FFT, 1.0 / sample_rate)
    total = mean_pow.sum()
    if total > 0:
        centroid = float(freqs @ mean_pow / total)
        rolloff = float(freqs[np.searchsorted(np.cumsum(mean_pow), ROLLOFF * total)])
        tiny = np.finfo(np.float64).tiny
        flatness = float(np.exp(np.mean(np.log(mean_pow + tiny))) / np.mean(mean_pow))
    else:
        centroid = rolloff = flatness = 0.0

    frame_db = _db(np.mean(_frames(x) ** 2, axis=1))
    return np.concatenate([bands, [centroid, rolloff, flatness, frame_db.mean(), frame_db.var()]])


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # [n, d]
    provider: str = PROVIDER
    channel: str = ""

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.ndim != 2:
            raise MetricsError("embedding set must be a matrix [n, d]")
        if not np.all(np.isfinite(self.vectors)):
            raise MetricsError("embedding set contains non-finite values")


def windowed_embeddings(signal: np.ndarray, sample_rate: int, window: int = N_FFT,
                        hop: int = HOP, channel: str = "") -> EmbeddingSet:
    """One embedding per ``window``-sample slice, slices ``hop`` apart."""
    x = np.asarray(signal, dtype=np.float64)
    starts = range(0, max(x.size - window, 0) + 1, hop)
    return EmbeddingSet(np.stack([embed(x[s:s + window], sample_rate) for s in starts]),
                        channel=channel)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(emb: EmbeddingSet) -> GaussianStats:
    n, d = emb.vectors.shape
    if n < d + 1:
        raise MetricsError(f"need at least d+1={d + 1} vectors for a covariance, got {n}")
    mu = emb.vectors.mean(axis=0)
    centred = emb.vectors - mu
    cov = centred.T @ centred / (n - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T))


def sqrtm_psd(s: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition; tiny negative eigenvalues clamp to 0."""
    s = 0.5 * (s + s.T)
    w, v = np.linalg.eigh(s)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < -1e-10 * scale:
        raise MetricsError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``, clamped at 0.

    Since ``S_a^1/2 S_b S_a^1/2 = (S_a^1/2 S_b^1/2)(S_a^1/2 S_b^1/2)^T``, the trace of
    its square root is the sum of singular values of ``S_a^1/2 S_b^1/2``.  Taking
    it that way avoids square-rooting round-off-sized eigenvalues of the
    product, which matters for the near-singular covariances of short clips.
    """
    if a.dim != b.dim:
        raise MetricsError(f"dimension mismatch: {a.dim} vs {b.dim}")
    cross = np.linalg.svd(sqrtm_psd(a.cov) @ sqrtm_psd(b.cov), compute_uv=False).sum()
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross
    return max(0.0, float(value))


def write_embeddings(emb: EmbeddingSet, path) -> None:
    n, d = emb.vectors.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _EM_MAGIC, d, n))
        fh.write(emb.vectors.astype("<f8").tobytes())


def read_embeddings(path, provider: str = "imported", channel: str = "") -> EmbeddingSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _EM_MAGIC:
        raise MetricsError(f"{path}: not an embedding file")
    d, n = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 8 * n * d:
        raise MetricsError(f"{path}: expected {n}x{d} values")
    data = np.frombuffer(blob, "<f8", n * d, 12).reshape(n, d).astype(np.float64)
    return EmbeddingSet(data, provider, channel)


# --- per-channel report ----------------------------------------------------

def rms_db(x: np.ndarray) -> float:
    return float(_db(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def spectral_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of the mean magnitude spectra; 0 when either is flat."""
    ma = np.sqrt(power_spectrogram(a)).mean(axis=0)
    mb = np.sqrt(power_spectrogram(b)).mean(axis=0)
    ma, mb = ma - ma.mean(), mb - mb.mean()
    den = np.sqrt((ma @ ma) * (mb @ mb))
    return float(ma @ mb / den) if den > 0 else 0.0


@dataclass
class ChannelRow:
    channel: str
    rms_db_ref: float
    rms_db_gen: float
    rms_db_error: float
    spectral_correlation: float
    frechet: float


@dataclass
class ChannelReport:
    rows: list[ChannelRow]
    length_adjustment: int = 0  # samples added (+) or dropped (-) from gen
    unavailable: tuple[str, ...] = field(default=UNAVAILABLE)

    COLUMNS = ("channel", "rms_db_ref", "rms_db_gen", "rms_db_error", "spectral_correlation", "frechet")

    def write_tsv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.channel] + [repr(getattr(r, c)) for c in self.COLUMNS[1:]])


def channel_report(ref: MultichannelAudio, gen: MultichannelAudio) -> ChannelReport:
    """Per-channel RMS error in dB, spectral correlation and windowed-embedding Fréchet distance.

    ``gen`` is zero-padded or trimmed to the length of ``ref``.  The Fréchet
    column is NaN when a channel is too short for ``EMBED_DIM + 1`` windows.
    """
    if ref.layout.names != gen.layout.names:
        raise MetricsError(f"layout mismatch: {ref.layout.names} vs {gen.layout.names}")
    if ref.sample_rate != gen.sample_rate:
        raise MetricsError(f"sample rate mismatch: {ref.sample_rate} vs {gen.sample_rate}")
    n = ref.num_samples
    adjust = n - gen.num_samples
    g = gen.samples[:, :n] if adjust <= 0 else np.pad(gen.samples, ((0, 0), (0, adjust)))
    rows = []
    for i, name in enumerate(ref.layout.names):
        r_db, g_db = rms_db(ref.samples[i]), rms_db(g[i])
        try:
            fd = frechet_distance(
                fit_gaussian(windowed_embeddings(ref.samples[i], ref.sample_rate, channel=name)),
                fit_gaussian(windowed_embeddings(g[i], ref.sample_rate, channel=name)))
        except MetricsError:
            fd = float("nan")
        rows.append(ChannelRow(name, r_db, g_db, abs(r_db - g_db),
                               spectral_correlation(ref.samples[i], g[i]), fd))
    return ChannelReport(rows, adjust)


def rms_pattern_correlation(ref: MultichannelAudio, gen: MultichannelAudio) -> float:
    """Pearson correlation of the per-channel RMS vectors of two equal-layout signals."""
    n = min(ref.num_samples, gen.num_samples)
    a = np.sqrt(np.mean(ref.samples[:, :n] ** 2, axis=1))
    b = np.sqrt(np.mean(gen.samples[:, :n] ** 2, axis=1))
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0
