"""Deterministic synthetic 7.1.4 scenes.

A scene file is plain text: ``key = value`` header lines followed by one
``source`` line per source, each a list of ``key=value`` tokens::

    sample_rate = 48000
    duration = 2.0
    seed = 3
    source wave=sine freq=440 amp=0.5 channel=Ltf
    source wave=noise amp=0.1 azimuth=60 elevation=20 onset=0.5 length=1.0

A source is routed either to a named channel or to a direction, in which case
it is amplitude-panned over the non-LFE loudspeakers with VBAP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layout import ChannelLayout, MultichannelAudio, direction_vector
from .spatial import vbap_gains

WAVEFORMS = ("sine", "square", "saw", "noise")


class SceneError(ValueError):
    pass


@dataclass
class Source:
    wave: str = "sine"
    freq: float = 440.0
    amp: float = 0.5
    channel: str | None = None
    azimuth: float | None = None
    elevation: float = 0.0
    onset: float = 0.0
    length: float | None = None
    phase: float = 0.0


@dataclass
class SceneSpec:
    sample_rate: int = 48000
    duration: float = 2.0
    seed: int = 0
    sources: list[Source] = field(default_factory=list)


def parse_scene(text: str) -> SceneSpec:
    spec = SceneSpec()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("source"):
            src = Source()
            for tok in line.split()[1:]:
                key, sep, val = tok.partition("=")
                if not sep or not hasattr(src, key):
                    raise SceneError(f"line {lineno}: bad source field {tok!r}")
                if key in ("wave", "channel"):
                    setattr(src, key, val)
                else:
                    setattr(src, key, float(val))
            spec.sources.append(src)
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep or key not in ("sample_rate", "duration", "seed"):
            raise SceneError(f"line {lineno}: unexpected {line!r}")
        setattr(spec, key, float(val) if key == "duration" else int(val))
    return spec


def format_scene(spec: SceneSpec) -> str:
    lines = [f"sample_rate = {spec.sample_rate}", f"duration = {spec.duration!r}",
             f"seed = {spec.seed}"]
    for s in spec.sources:
        toks = [f"wave={s.wave}", f"freq={s.freq!r}", f"amp={s.amp!r}"]
        if s.channel is not None:
            toks.append(f"channel={s.channel}")
        else:
            toks += [f"azimuth={s.azimuth!r}", f"elevation={s.elevation!r}"]
        toks += [f"onset={s.onset!r}", f"phase={s.phase!r}"]
        if s.length is not None:
            toks.append(f"length={s.length!r}")
        lines.append("source " + " ".join(toks))
    return "\n".join(lines) + "\n"


def synth_scene(spec: SceneSpec, layout: ChannelLayout | None = None) -> MultichannelAudio:
    layout = layout or ChannelLayout.layout_714()
    rate = spec.sample_rate
    n = int(round(spec.duration * rate))
    out = np.zeros((len(layout), n))
    t = np.arange(n) / rate
    speakers = [i for i, s in enumerate(layout.channels) if not s.is_lfe]
    spk_dirs = np.stack([layout.channels[i].unit_vector() for i in speakers])
    for k, src in enumerate(spec.sources):
        if src.wave not in WAVEFORMS:
            raise SceneError(f"unknown waveform {src.wave!r}")
        if src.wave != "noise" and not (0.0 < src.freq < rate / 2):
            raise SceneError(f"frequency {src.freq} Hz outside (0, Nyquist={rate / 2})")
        if not (0.0 <= src.amp <= 1.0):
            raise SceneError(f"amplitude {src.amp} outside [0, 1]")
        sig = _waveform(src, t, np.random.default_rng([spec.seed, k]))
        start = int(round(src.onset * rate))
        stop = n if src.length is None else min(n, start + int(round(src.length * rate)))
        gate = np.zeros(n)
        gate[start:stop] = 1.0
        sig = sig * gate
        if src.channel is not None:
            out[layout.index(src.channel)] += sig
        else:
            if src.azimuth is None:
                raise SceneError("source needs a channel or an azimuth")
            vg = vbap_gains(direction_vector(src.azimuth, src.elevation), spk_dirs)
            for j, g in zip(vg.triplet, vg.gains):
                if g:
                    out[speakers[j]] += g * sig
    return MultichannelAudio(rate, out, layout)


def _waveform(src: Source, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if src.wave == "noise":
        return src.amp * rng.uniform(-1.0, 1.0, t.size)
    ph = 2 * math.pi * src.freq * t + src.phase
    if src.wave == "sine":
        return src.amp * np.sin(ph)
    if src.wave == "square":
        return src.amp * np.sign(np.sin(ph))
    return src.amp * (2.0 * ((ph / (2 * math.pi)) % 1.0) - 1.0)


# per-role tone bands (Hz) and level ranges for random mixes; the levels give
# the front-heavy energy profile typical of produced music
_ROLES = {
    "L": ((25.0, 75.0), (0.20, 0.35)), "R": ((25.0, 75.0), (0.20, 0.35)),
    "C": ((37.5, 62.5), (0.15, 0.30)), "LFE": ((12.5, 25.0), (0.20, 0.40)),
    "Lss": ((50.0, 87.5), (0.06, 0.14)), "Rss": ((50.0, 87.5), (0.06, 0.14)),
    "Lrs": ((50.0, 87.5), (0.04, 0.10)), "Rrs": ((50.0, 87.5), (0.04, 0.10)),
    "Ltf": ((62.5, 87.5), (0.03, 0.08)), "Rtf": ((62.5, 87.5), (0.03, 0.08)),
    "Ltb": ((62.5, 87.5), (0.02, 0.06)), "Rtb": ((62.5, 87.5), (0.02, 0.06)),
}


def random_scene(seed: int, duration: float = 2.0, sample_rate: int = 48000) -> SceneSpec:
    """A seeded multitrack-like mix: one or two tones per channel role."""
    rng = np.random.default_rng(seed)
    sources = []
    for name, ((flo, fhi), (alo, ahi)) in _ROLES.items():
        for _ in range(int(rng.integers(1, 3))):
            sources.append(Source(
                wave="sine", freq=float(np.round(rng.uniform(flo, fhi), 2)),
                amp=float(np.round(rng.uniform(alo, ahi) / 1.5, 4)), channel=name,
                phase=float(np.round(rng.uniform(0, 2 * math.pi), 4))))
    # one source panned between the front speakers
    sources.append(Source(wave="sine", freq=float(np.round(rng.uniform(30.0, 60.0), 2)),
                          amp=float(np.round(rng.uniform(0.1, 0.25), 4)),
                          azimuth=float(np.round(rng.uniform(-30.0, 30.0), 2)), elevation=0.0))
    return SceneSpec(sample_rate, float(duration), int(seed), sources)
