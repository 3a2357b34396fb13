"""Channel layouts, the multichannel buffer type, clip segmentation and downmix.

Azimuths follow the usual loudspeaker convention: degrees, positive to the
listener's left, 0 straight ahead.  Elevation is positive upwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LAYOUT_714_NAMES = ("L", "R", "C", "LFE", "Lss", "Rss", "Lrs", "Rrs", "Ltf", "Rtf", "Ltb", "Rtb")

# nominal ITU-R BS.2051 positions, [azimuth, elevation]
_POSITIONS_714 = {
    "L": (30.0, 0.0), "R": (-30.0, 0.0), "C": (0.0, 0.0), "LFE": (0.0, -30.0),
    "Lss": (90.0, 0.0), "Rss": (-90.0, 0.0), "Lrs": (135.0, 0.0), "Rrs": (-135.0, 0.0),
    "Ltf": (45.0, 45.0), "Rtf": (-45.0, 45.0), "Ltb": (135.0, 45.0), "Rtb": (-135.0, 45.0),
}


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Speaker:
    name: str
    azimuth: float
    elevation: float
    is_lfe: bool = False

    def __post_init__(self):
        if not (-180.0 < self.azimuth <= 180.0) or not (-90.0 <= self.elevation <= 90.0):
            raise LayoutError(f"{self.name}: position ({self.azimuth}, {self.elevation}) out of range")

    def unit_vector(self) -> np.ndarray:
        return direction_vector(self.azimuth, self.elevation)


def direction_vector(azimuth: float, elevation: float) -> np.ndarray:
    """Unit vector for (azimuth, elevation) in degrees: x front, y left, z up."""
    az, el = math.radians(azimuth), math.radians(elevation)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


@dataclass(frozen=True)
class ChannelLayout:
    channels: tuple[Speaker, ...]
    name: str = "custom"

    @classmethod
    def layout_714(cls) -> "ChannelLayout":
        return cls(tuple(Speaker(n, *_POSITIONS_714[n], is_lfe=(n == "LFE")) for n in LAYOUT_714_NAMES),
                   "7.1.4")

    @classmethod
    def stereo(cls) -> "ChannelLayout":
        return cls((Speaker("L", 30.0, 0.0), Speaker("R", -30.0, 0.0)), "stereo")

    @classmethod
    def generic(cls, n: int) -> "ChannelLayout":
        return cls(tuple(Speaker(f"ch{i}", 0.0, 0.0) for i in range(n)), f"{n}ch")

    @classmethod
    def for_channel_count(cls, n: int) -> "ChannelLayout":
        if n == 12:
            return cls.layout_714()
        if n == 2:
            return cls.stereo()
        return cls.generic(n)

    def __len__(self) -> int:
        return len(self.channels)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.channels)

    def index(self, name: str) -> int:
        for i, s in enumerate(self.channels):
            if s.name == name:
                return i
        raise LayoutError(f"no channel named {name!r} in {self.name} layout")


@dataclass
class MultichannelAudio:
    sample_rate: int
    samples: np.ndarray
    layout: ChannelLayout = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.layout is None:
            self.layout = ChannelLayout.for_channel_count(self.samples.shape[0])
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.shape[0] != len(self.layout):
            raise LayoutError(f"{self.samples.shape[0]} sample rows for a "
                              f"{len(self.layout)}-channel layout")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


def segment(audio: MultichannelAudio, clip_seconds: float) -> list[MultichannelAudio]:
    """Cut into consecutive, non-overlapping clips; the trailing remainder is dropped."""
    if clip_seconds <= 0:
        raise ValueError("clip_seconds must be positive")
    n = int(round(clip_seconds * audio.sample_rate))
    count = audio.num_samples // n
    return [MultichannelAudio(audio.sample_rate, audio.samples[:, i * n:(i + 1) * n].copy(), audio.layout)
            for i in range(count)]


@dataclass(frozen=True)
class DownmixMatrix:
    coefficients: np.ndarray
    version: str

    @classmethod
    def ac3_714(cls, normalize: bool = True) -> "DownmixMatrix":
        """12 -> 2 fold-down extending the AC-3 -3 dB centre/surround gains to heights.

        Each side takes its full front channel plus -3 dB of C and of every
        same-side surround/height channel; LFE is dropped.  With ``normalize``
        the whole matrix is scaled by ``1 / (1 + 4 * 0.7071)``.
        """
        g = math.sqrt(0.5)
        m = np.zeros((2, 12))
        idx = {n: i for i, n in enumerate(LAYOUT_714_NAMES)}
        for row, side in ((0, "L"), (1, "R")):
            m[row, idx[side]] = 1.0
            m[row, idx["C"]] = g
            for suffix in ("ss", "rs", "tf", "tb"):
                m[row, idx[side + suffix]] = g
        if normalize:
            m = m * (1.0 / (1.0 + 4.0 * g))
            return cls(m, "ac3-714-v1-norm")
        return cls(m, "ac3-714-v1-raw")


def downmix(audio: MultichannelAudio, matrix: DownmixMatrix | None = None) -> MultichannelAudio:
    if audio.num_channels != 12:
        raise LayoutError(f"downmix expects 12 channels, got {audio.num_channels}")
    matrix = matrix or DownmixMatrix.ac3_714()
    return MultichannelAudio(audio.sample_rate, matrix.coefficients @ audio.samples,
                             ChannelLayout.stereo())
