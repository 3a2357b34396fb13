"""Binaural rendering of loudspeaker layouts over a set of measured (or synthetic) HRIRs.

Each directional channel is placed with VBAP over the three nearest HRIR
directions; the weighted HRIR pair is convolved with the channel and summed
into the ears.  The LFE channel bypasses the HRIRs and is added to both ears
6 dB down.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .layout import ChannelLayout, MultichannelAudio, direction_vector

LFE_GAIN = 10.0 ** (-6.0 / 20.0)

_HRIR_MAGIC = b"IFIR"
_HRIR_VERSION = 1


class HrirFormatError(ValueError):
    pass


@dataclass
class HrirSet:
    azimuths: np.ndarray
    elevations: np.ndarray
    left: np.ndarray   # [M, L]
    right: np.ndarray  # [M, L]
    sample_rate: int

    def __post_init__(self):
        self.azimuths = np.asarray(self.azimuths, dtype=np.float64)
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        self.left = np.atleast_2d(np.asarray(self.left, dtype=np.float64))
        self.right = np.atleast_2d(np.asarray(self.right, dtype=np.float64))
        m = len(self.azimuths)
        if len(self.elevations) != m or self.left.shape[0] != m or self.right.shape != self.left.shape:
            raise HrirFormatError("directions and impulse responses disagree in count or length")
        if m < 4 or np.linalg.matrix_rank(self.directions, tol=1e-9) < 3:
            raise HrirFormatError("need at least 4 non-coplanar directions")

    @property
    def directions(self) -> np.ndarray:
        return np.stack([direction_vector(a, e) for a, e in zip(self.azimuths, self.elevations)])

    @property
    def ir_length(self) -> int:
        return self.left.shape[1]

    def mirrored(self) -> "HrirSet":
        """Reflect about the median plane: negate azimuths and swap ears."""
        az = np.where(self.azimuths == 180.0, 180.0, -self.azimuths)
        return HrirSet(az, self.elevations.copy(), self.right.copy(), self.left.copy(), self.sample_rate)


@dataclass
class VbapGains:
    triplet: tuple[int, int, int]
    gains: np.ndarray
    fallback: bool = False


def vbap_gains(target, directions: np.ndarray) -> VbapGains:
    """Energy-normalised VBAP gains over the three directions closest to ``target``.

    ``target`` is a unit 3-vector.  Negative gains (target outside the chosen
    triplet) are clamped to zero before renormalising.  If the three
    directions are coplanar with the origin the two nearest are panned
    pairwise instead and ``fallback`` is set.
    """
    p = np.asarray(target, dtype=np.float64)
    if abs(np.linalg.norm(p) - 1.0) > 1e-9:
        raise ValueError("vbap target must be a unit vector")
    dirs = np.asarray(directions, dtype=np.float64)
    order = np.argsort(-(dirs @ p), kind="stable")
    tri = order[:3]
    base = dirs[tri]
    fallback = abs(np.linalg.det(base)) < 1e-9
    if fallback:
        pair = base[:2]
        g2, *_ = np.linalg.lstsq(pair.T, p, rcond=None)
        g = np.array([g2[0], g2[1], 0.0])
    else:
        g = np.linalg.solve(base.T, p)
    g = np.where(g < 0.0, 0.0, g)
    norm = math.sqrt(float(g @ g))
    if norm == 0.0:
        g = np.array([1.0, 0.0, 0.0])
    else:
        g = g / norm
    return VbapGains(tuple(int(i) for i in tri), g, fallback)


def convolve(signal: np.ndarray, ir: np.ndarray, method: str = "auto") -> np.ndarray:
    """Full linear convolution (length ``len(signal) + len(ir) - 1``)."""
    x = np.asarray(signal, dtype=np.float64)
    h = np.asarray(ir, dtype=np.float64)
    if x.size == 0 or h.size == 0:
        raise ValueError("convolve needs non-empty inputs")
    if method == "auto":
        method = "direct" if min(x.size, h.size) <= 32 else "fft"
    if method == "direct":
        return np.convolve(x, h)
    n = x.size + h.size - 1
    nfft = 1 << (n - 1).bit_length()
    return np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)[:n]


def binauralize(audio: MultichannelAudio, hrirs: HrirSet,
                layout: ChannelLayout | None = None) -> MultichannelAudio:
    layout = layout or audio.layout
    if audio.sample_rate != hrirs.sample_rate:
        raise ValueError(f"audio at {audio.sample_rate} Hz, HRIRs at {hrirs.sample_rate} Hz")
    if len(layout) != audio.num_channels:
        raise ValueError(f"layout has {len(layout)} directions for {audio.num_channels} channels")
    n = audio.num_samples + hrirs.ir_length - 1
    out = np.zeros((2, n))
    dirs = hrirs.directions
    for ch, spk in enumerate(layout.channels):
        x = audio.samples[ch]
        if spk.is_lfe:
            out[:, :x.size] += LFE_GAIN * x
            continue
        vg = vbap_gains(spk.unit_vector(), dirs)
        idx = list(vg.triplet)
        hl = vg.gains @ hrirs.left[idx]
        hr = vg.gains @ hrirs.right[idx]
        out[0] += convolve(x, hl)
        out[1] += convolve(x, hr)
    return MultichannelAudio(audio.sample_rate, out, ChannelLayout.stereo())


def synthetic_hrir_set(sample_rate: int = 48000, ir_length: int = 64, azimuth_step: float = 15.0,
                       elevations=(-45.0, 0.0, 45.0)) -> HrirSet:
    """Spherical-head style HRIRs on a regular grid plus the zenith.

    Interaural delay follows Woodworth's formula; the far ear gets a one-pole
    low-pass whose strength grows with lateral angle.  The grid is symmetric
    about the median plane, so ``mirrored()`` returns the same responses in a
    different order.
    """
    head_radius, speed = 0.0875, 343.0
    azs, els = [], []
    for el in elevations:
        steps = int(round(360.0 / azimuth_step))
        for k in range(steps):
            az = -180.0 + (k + 1) * azimuth_step
            azs.append(az)
            els.append(el)
    azs.append(0.0)
    els.append(90.0)
    base_delay = 4.0
    taps = np.arange(ir_length)
    left = np.zeros((len(azs), ir_length))
    right = np.zeros_like(left)
    for i, (az, el) in enumerate(zip(azs, els)):
        lateral = direction_vector(az, el)[1]
        lat = abs(lateral) if abs(lateral) > 1e-9 else 0.0
        itd = head_radius / speed * (math.asin(lat) + lat) * sample_rate
        near = _frac_delay(taps, base_delay) * (1.0 + 0.25 * lat)
        far = _one_pole(_frac_delay(taps, base_delay + itd), 0.7 * lat) * (1.0 - 0.25 * lat)
        if lat == 0.0:
            left[i], right[i] = near, near.copy()
        elif lateral > 0:
            left[i], right[i] = near, far
        else:
            left[i], right[i] = far, near
    return HrirSet(np.array(azs), np.array(els), left, right, sample_rate)


def _frac_delay(taps: np.ndarray, delay: float, half_width: int = 8) -> np.ndarray:
    d = taps - delay
    win = np.where(np.abs(d) <= half_width, 0.5 * (1.0 + np.cos(np.pi * d / half_width)), 0.0)
    return np.sinc(d) * win


def _one_pole(x: np.ndarray, a: float) -> np.ndarray:
    y = np.empty_like(x)
    acc = 0.0
    for i, v in enumerate(x):
        acc = (1.0 - a) * v + a * acc
        y[i] = acc
    return y


def write_hrir_set(hrirs: HrirSet, path: str | os.PathLike) -> None:
    m, n = hrirs.left.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", _HRIR_MAGIC, _HRIR_VERSION, hrirs.sample_rate, m, n))
        for i in range(m):
            fh.write(struct.pack("<dd", hrirs.azimuths[i], hrirs.elevations[i]))
            fh.write(hrirs.left[i].astype("<f8").tobytes())
            fh.write(hrirs.right[i].astype("<f8").tobytes())


def read_hrir_set(path: str | os.PathLike) -> HrirSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != _HRIR_MAGIC:
        raise HrirFormatError(f"{path}: bad magic")
    version, rate, m, n = struct.unpack_from("<IIII", blob, 4)
    if version != _HRIR_VERSION:
        raise HrirFormatError(f"{path}: unsupported version {version}")
    rec = 16 + 16 * n
    if len(blob) != 20 + m * rec:
        raise HrirFormatError(f"{path}: expected {20 + m * rec} bytes, found {len(blob)}")
    az, el = np.empty(m), np.empty(m)
    left, right = np.empty((m, n)), np.empty((m, n))
    for i in range(m):
        off = 20 + i * rec
        az[i], el[i] = struct.unpack_from("<dd", blob, off)
        left[i] = np.frombuffer(blob, "<f8", n, off + 16)
        right[i] = np.frombuffer(blob, "<f8", n, off + 16 + 8 * n)
    return HrirSet(az, el, left, right, rate)
