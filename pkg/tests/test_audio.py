import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upmixflow.layout import (
    LAYOUT_714_NAMES, ChannelLayout, DownmixMatrix, LayoutError, MultichannelAudio, downmix, segment,
)
from upmixflow.scene import SceneError, SceneSpec, Source, format_scene, parse_scene, random_scene, synth_scene
from upmixflow.wavio import (
    MalformedHeaderError, TruncatedDataError, UnsupportedFormatError, read_wav, write_wav,
)


def audio(x, rate=48000):
    return MultichannelAudio(rate, x)


class TestLayout:
    def test_714_order(self):
        lay = ChannelLayout.layout_714()
        assert lay.names == LAYOUT_714_NAMES
        assert [i for i, s in enumerate(lay.channels) if s.is_lfe] == [3]
        assert all(lay.index(n) == i for i, n in enumerate(LAYOUT_714_NAMES))
        with pytest.raises(LayoutError):
            lay.index("Cs")

    def test_mirror_pairs(self):
        lay = ChannelLayout.layout_714()
        for n in LAYOUT_714_NAMES:
            if n.startswith("L") and n != "LFE":
                a, b = lay.channels[lay.index(n)], lay.channels[lay.index("R" + n[1:])]
                assert a.azimuth == -b.azimuth and a.elevation == b.elevation
        for s in lay.channels:
            assert -180 < s.azimuth <= 180 and -90 <= s.elevation <= 90

    def test_row_count_checked(self):
        with pytest.raises(LayoutError):
            MultichannelAudio(48000, np.zeros((3, 10)), ChannelLayout.stereo())


class TestWav:
    def test_stereo_16bit(self, tmp_path, rng):
        x = np.round(rng.uniform(-1, 1, (2, 480)) * 32767) / 32768
        write_wav(audio(x), tmp_path / "a.wav", 16)
        back = read_wav(tmp_path / "a.wav")
        assert back.samples.shape == (2, 480) and back.sample_rate == 48000
        np.testing.assert_array_equal(back.samples, x)

    def test_24bit(self, tmp_path, rng):
        x = np.round(rng.uniform(-1, 1, (3, 101)) * 2 ** 23 - 1) / 2 ** 23
        write_wav(audio(x, 44100), tmp_path / "a.wav", 24)
        back = read_wav(tmp_path / "a.wav")
        np.testing.assert_array_equal(back.samples, x)

    def test_float_round_trip_12ch(self, tmp_path, rng):
        x = rng.uniform(-1, 1, (12, 777)).astype(np.float32).astype(np.float64)
        write_wav(audio(x), tmp_path / "a.wav", "32f")
        back = read_wav(tmp_path / "a.wav")
        assert back.samples.tobytes() == x.tobytes()
        assert back.layout.names == LAYOUT_714_NAMES

    def test_silence_file_length(self, tmp_path):
        write_wav(audio(np.zeros((2, 100))), tmp_path / "s.wav", 16)
        assert (tmp_path / "s.wav").stat().st_size == 44 + 2 * 100 * 2
        write_wav(audio(np.zeros((12, 10))), tmp_path / "f.wav", "32f")
        assert (tmp_path / "f.wav").stat().st_size == 44 + 12 * 10 * 4

    def test_clipping_reported(self, tmp_path):
        x = np.zeros((1, 4))
        x[0, 1] = 1.5
        assert write_wav(audio(x), tmp_path / "c.wav") == 1
        assert read_wav(tmp_path / "c.wav").samples[0, 1] == 1.0

    def test_corrupt_magic(self, tmp_path):
        write_wav(audio(np.zeros((2, 8))), tmp_path / "a.wav", 16)
        blob = bytearray((tmp_path / "a.wav").read_bytes())
        blob[0:4] = b"RIFX"
        (tmp_path / "a.wav").write_bytes(bytes(blob))
        with pytest.raises(MalformedHeaderError):
            read_wav(tmp_path / "a.wav")

    def test_truncated(self, tmp_path):
        write_wav(audio(np.zeros((2, 8))), tmp_path / "a.wav", 16)
        blob = (tmp_path / "a.wav").read_bytes()
        (tmp_path / "a.wav").write_bytes(blob[:-5])
        with pytest.raises(TruncatedDataError):
            read_wav(tmp_path / "a.wav")

    def test_unsupported_codec(self, tmp_path):
        write_wav(audio(np.zeros((1, 8))), tmp_path / "a.wav", 16)
        blob = bytearray((tmp_path / "a.wav").read_bytes())
        struct.pack_into("<H", blob, 20, 2)  # MS ADPCM
        (tmp_path / "a.wav").write_bytes(bytes(blob))
        with pytest.raises(UnsupportedFormatError):
            read_wav(tmp_path / "a.wav")
        with pytest.raises(UnsupportedFormatError):
            write_wav(audio(np.zeros((1, 8))), tmp_path / "b.wav", 8)


class TestSegment:
    def test_ten_second_clips(self):
        a = audio(np.zeros((1, 25 * 48000)))
        clips = segment(a, 10)
        assert len(clips) == 2 and all(c.num_samples == 480000 for c in clips)

    def test_short_input(self):
        assert segment(audio(np.zeros((1, 9 * 48000))), 10) == []

    def test_partition(self, rng):
        x = rng.normal(size=(2, 20 * 4800)) * 0.1
        clips = segment(audio(x, 4800), 10)
        np.testing.assert_array_equal(np.concatenate([c.samples for c in clips], axis=1), x)


class TestDownmix:
    def test_silence(self):
        assert not downmix(audio(np.zeros((12, 16)))).samples.any()

    def test_center_impulse(self):
        x = np.zeros((12, 4))
        x[2, 0] = 1.0
        raw = downmix(audio(x), DownmixMatrix.ac3_714(normalize=False)).samples
        np.testing.assert_allclose(raw[:, 0], [0.7071, 0.7071], atol=1e-4)
        m = DownmixMatrix.ac3_714()
        out = downmix(audio(x), m).samples
        np.testing.assert_array_equal(out[:, 0], m.coefficients[:, 2])
        assert out[0, 0] == pytest.approx(0.7071067811865476 / (1 + 4 * 0.7071067811865476), abs=1e-15)

    def test_linearity(self, rng):
        x, y = rng.normal(size=(12, 64)), rng.normal(size=(12, 64))
        lhs = downmix(audio(2.5 * x - 0.75 * y)).samples
        rhs = 2.5 * downmix(audio(x)).samples - 0.75 * downmix(audio(y)).samples
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_mirror_symmetry_bit_exact(self, rng):
        x = rng.normal(size=(12, 64))
        names = list(LAYOUT_714_NAMES)
        swap = [names.index({"L": "R", "R": "L"}.get(n[0], n[0]) + n[1:]) if n not in ("C", "LFE") else i
                for i, n in enumerate(names)]
        a = downmix(audio(x)).samples
        b = downmix(audio(x[swap])).samples
        assert a[::-1].tobytes() == b.tobytes()

    def test_channel_count(self):
        with pytest.raises(LayoutError):
            downmix(audio(np.zeros((2, 4))))


class TestScene:
    def test_routing(self):
        spec = SceneSpec(48000, 0.1, 0, [Source("sine", 440.0, 0.5, channel="Ltf")])
        a = synth_scene(spec)
        energy = (a.samples ** 2).sum(axis=1)
        assert energy[8] > 0 and np.count_nonzero(energy) == 1

    def test_symmetry(self):
        spec = SceneSpec(48000, 0.1, 0, [Source("sine", 100.0, 0.3, channel="L"),
                                          Source("sine", 100.0, 0.3, channel="R")])
        rms = np.sqrt((synth_scene(spec).samples ** 2).mean(axis=1))
        assert abs(rms[0] - rms[1]) < 1e-12

    def test_determinism_and_text_round_trip(self):
        spec = random_scene(11, 0.5)
        spec.sources.append(Source("noise", amp=0.2, azimuth=60.0, elevation=20.0, onset=0.1, length=0.2))
        a = synth_scene(spec)
        b = synth_scene(parse_scene(format_scene(spec)))
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_invalid(self):
        with pytest.raises(SceneError):
            synth_scene(SceneSpec(48000, 0.1, 0, [Source("sine", 24000.0, 0.5, channel="L")]))
        with pytest.raises(SceneError):
            synth_scene(SceneSpec(48000, 0.1, 0, [Source("sine", 100.0, 1.5, channel="L")]))
        with pytest.raises(SceneError):
            parse_scene("source wave=sine colour=blue")
