import math

import numpy as np
import pytest

from upmixflow.layout import LAYOUT_714_NAMES, ChannelLayout, MultichannelAudio, direction_vector
from upmixflow.spatial import (
    LFE_GAIN, HrirFormatError, HrirSet, binauralize, convolve, read_hrir_set, synthetic_hrir_set,
    vbap_gains, write_hrir_set,
)

OCTA = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1.0]])


@pytest.fixture(scope="module")
def hrirs():
    return synthetic_hrir_set(48000, 64)


def angle_deg(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return math.degrees(math.acos(min(1.0, float(a @ b))))


class TestVbap:
    def test_at_measured_direction(self, hrirs):
        dirs = hrirs.directions
        for i in (0, 17, 40, len(dirs) - 1):
            vg = vbap_gains(dirs[i], dirs)
            assert vg.triplet[0] == i
            np.testing.assert_allclose(vg.gains, [1, 0, 0], atol=1e-12)

    def test_equilateral_centroid(self):
        vg = vbap_gains(np.ones(3) / math.sqrt(3), OCTA)
        assert sorted(vg.triplet) == [0, 1, 2]
        np.testing.assert_allclose(vg.gains, [1 / math.sqrt(3)] * 3, atol=1e-12)

    def test_reconstruction_inside_triplet(self, rng):
        for _ in range(200):
            p = np.abs(rng.normal(size=3))
            p /= np.linalg.norm(p)
            vg = vbap_gains(p, OCTA)
            assert abs((vg.gains ** 2).sum() - 1) < 1e-10
            assert angle_deg(vg.gains @ OCTA[list(vg.triplet)], p) < 1.0

    def test_reconstruction_on_grid(self, hrirs, rng):
        dirs = hrirs.directions
        inside = 0
        for _ in range(300):
            p = rng.normal(size=3)
            p /= np.linalg.norm(p)
            vg = vbap_gains(p, dirs)
            assert abs((vg.gains ** 2).sum() - 1) < 1e-10
            raw = np.linalg.solve(dirs[list(vg.triplet)].T, p) if not vg.fallback else None
            if raw is not None and (raw >= 0).all():
                inside += 1
                assert angle_deg(vg.gains @ dirs[list(vg.triplet)], p) < 1.0
        assert inside > 20

    def test_degenerate_falls_back(self):
        ring = np.array([direction_vector(a, 0) for a in (0, 10, 20, 180)] + [[0, 0, 1.0]])
        vg = vbap_gains(direction_vector(5, 0), ring)
        assert vg.fallback and vg.gains[2] == 0
        assert abs((vg.gains ** 2).sum() - 1) < 1e-10


class TestConvolve:
    def test_delta(self, rng):
        x = rng.normal(size=50)
        np.testing.assert_array_equal(convolve(x, [1.0], "direct"), x)

    def test_hand(self):
        np.testing.assert_array_equal(convolve([1, 1], [1, 1], "direct"), [1, 2, 1])
        np.testing.assert_allclose(convolve([1, 1], [1, 1], "fft"), [1, 2, 1], atol=1e-12)

    def test_fft_vs_direct(self, rng):
        x, h = rng.normal(size=3000), rng.normal(size=257)
        direct = np.array([sum(x[k] * h[n - k] for k in range(max(0, n - 256), min(n, 2999) + 1))
                           for n in range(0, 3256, 97)])
        assert np.abs(convolve(x, h, "fft")[::97] - direct).max() < 1e-9
        assert np.abs(convolve(x, h, "fft") - convolve(x, h, "direct")).max() < 1e-9


def _mirror_channels(x):
    names = list(LAYOUT_714_NAMES)
    idx = []
    for n in names:
        if n in ("C", "LFE"):
            idx.append(names.index(n))
        else:
            idx.append(names.index(("R" if n[0] == "L" else "L") + n[1:]))
    return x[idx]


class TestBinauralize:
    def test_silence(self, hrirs):
        out = binauralize(MultichannelAudio(48000, np.zeros((12, 100))), hrirs)
        assert out.samples.shape == (2, 163) and not out.samples.any()

    def test_identity_hrir_at_l(self):
        dirs = [(30.0, 0.0), (-30.0, 0.0), (0.0, 90.0), (180.0, -40.0)]
        delta = np.zeros((4, 8))
        delta[:, 0] = 1.0
        hs = HrirSet([d[0] for d in dirs], [d[1] for d in dirs], delta, delta.copy(), 48000)
        x = np.zeros((12, 16))
        x[0, 0] = 1.0
        out = binauralize(MultichannelAudio(48000, x), hs)
        g = vbap_gains(direction_vector(30, 0), hs.directions)
        assert g.triplet[0] == 0 and g.gains[0] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(out.samples[:, 0], [g.gains[0]] * 2, atol=1e-12)
        assert np.abs(out.samples[:, 1:]).max() < 1e-12

    def test_lfe(self, hrirs):
        x = np.zeros((12, 32))
        x[3, 0] = 1.0
        out = binauralize(MultichannelAudio(48000, x), hrirs).samples
        assert out[0, 0] == out[1, 0] == pytest.approx(0.5012, abs=1e-4)
        assert LFE_GAIN == 10 ** (-6 / 20)
        assert np.count_nonzero(out) == 2

    def test_linear(self, hrirs, rng):
        x, y = rng.normal(size=(12, 500)), rng.normal(size=(12, 500))
        f = lambda a: binauralize(MultichannelAudio(48000, a), hrirs).samples
        assert np.abs(f(0.3 * x + 2 * y) - (0.3 * f(x) + 2 * f(y))).max() < 1e-10

    def test_mirror_symmetry(self, hrirs, rng):
        x = rng.normal(size=(12, 400))
        a = binauralize(MultichannelAudio(48000, x), hrirs).samples
        b = binauralize(MultichannelAudio(48000, _mirror_channels(x)), hrirs.mirrored()).samples
        assert np.abs(a[::-1] - b).max() < 1e-9
        assert np.all(np.isfinite(a))

    def test_rate_mismatch(self, hrirs):
        with pytest.raises(ValueError):
            binauralize(MultichannelAudio(44100, np.zeros((12, 10))), hrirs)


class TestHrirFile:
    def test_round_trip(self, hrirs, tmp_path):
        write_hrir_set(hrirs, tmp_path / "h.ifir")
        back = read_hrir_set(tmp_path / "h.ifir")
        assert back.left.tobytes() == hrirs.left.tobytes()
        assert back.azimuths.tobytes() == hrirs.azimuths.tobytes()

    def test_bad_files(self, hrirs, tmp_path):
        write_hrir_set(hrirs, tmp_path / "h.ifir")
        blob = (tmp_path / "h.ifir").read_bytes()
        (tmp_path / "t.ifir").write_bytes(blob[:-3])
        with pytest.raises(HrirFormatError):
            read_hrir_set(tmp_path / "t.ifir")
        (tmp_path / "m.ifir").write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(HrirFormatError):
            read_hrir_set(tmp_path / "m.ifir")

    def test_needs_non_coplanar(self):
        with pytest.raises(HrirFormatError):
            HrirSet([0, 90, 180, -90], [0, 0, 0, 0], np.zeros((4, 4)), np.zeros((4, 4)), 48000)
