"""RIFF/WAVE reading and writing for PCM16, PCM24 and IEEE float32."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .layout import ChannelLayout, MultichannelAudio

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavError(Exception):
    pass


class MalformedHeaderError(WavError):
    pass


class UnsupportedFormatError(WavError):
    pass


class TruncatedDataError(WavError):
    pass


@dataclass(frozen=True)
class WavInfo:
    sample_rate: int
    channels: int
    bits: int
    format_tag: int
    num_frames: int


def _parse(path) -> tuple[tuple, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedHeaderError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        size = struct.unpack_from("<I", blob, pos + 4)[0]
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(blob):
                raise MalformedHeaderError(f"{path}: bad fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", blob, body)
            tag = fmt[0]
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise MalformedHeaderError(f"{path}: short WAVE_FORMAT_EXTENSIBLE chunk")
                tag = struct.unpack_from("<H", blob, body + 24)[0]
            fmt = (tag,) + fmt[1:]
        elif cid == b"data":
            if body + size > len(blob):
                raise TruncatedDataError(f"{path}: data chunk claims {size} bytes, "
                                         f"{len(blob) - body} present")
            data = blob[body:body + size]
            break
        pos = body + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedHeaderError(f"{path}: missing {'fmt' if fmt is None else 'data'} chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedHeaderError(f"{path}: {channels} channels at {rate} Hz")
    return fmt, data


def read_wav_info(path: str | os.PathLike) -> WavInfo:
    (tag, channels, rate, _, block_align, bits), data = _parse(path)
    return WavInfo(rate, channels, bits, tag, len(data) // max(block_align, 1))


def read_wav(path: str | os.PathLike, layout: ChannelLayout | None = None) -> MultichannelAudio:
    (tag, channels, rate, _, block_align, bits), data = _parse(path)
    if (tag, bits) == (_PCM, 16):
        raw = np.frombuffer(data, dtype="<i2")
        x = raw.astype(np.float64) / 32768.0
    elif (tag, bits) == (_PCM, 24):
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif (tag, bits) == (_FLOAT, 32):
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: format tag {tag} with {bits} bits is not supported")
    if len(data) % block_align or block_align != channels * bits // 8:
        raise TruncatedDataError(f"{path}: {len(data)} data bytes is not a whole number of frames")
    samples = x.reshape(-1, channels).T.copy()
    layout = layout or ChannelLayout.for_channel_count(channels)
    return MultichannelAudio(rate, samples, layout)


def write_wav(audio: MultichannelAudio, path: str | os.PathLike, bit_depth="32f") -> int:
    """Write ``audio`` and return how many samples had to be hard-clipped to [-1, 1]."""
    x = audio.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    x = np.clip(x, -1.0, 1.0).T  # interleave frames
    depth = str(bit_depth)
    if depth == "16":
        tag, bits = _PCM, 16
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif depth == "24":
        tag, bits = _PCM, 24
        v = np.clip(np.round(x * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32)
        v = v.reshape(-1).astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3]
        payload = v.tobytes()
    elif depth in ("32", "32f"):
        tag, bits = _FLOAT, 32
        payload = x.astype("<f4").tobytes()
    else:
        raise UnsupportedFormatError(f"bit depth {bit_depth!r} not in 16, 24, 32f")
    ch = audio.num_channels
    block = ch * bits // 8
    pad = len(payload) & 1
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload) + pad, b"WAVE", b"fmt ", 16,
                         tag, ch, audio.sample_rate, audio.sample_rate * block, block, bits,
                         b"data", len(payload))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(b"\0" * pad)
    return clipped
