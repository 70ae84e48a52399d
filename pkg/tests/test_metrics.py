import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from tvsr.dataio import DatasetManifest, DegradationSpec, ManifestEntry, save_sequence, synthetic_sequence
from tvsr.metrics import (EvalProtocol, psnr, psnr_curve, psnr_over_time, rgb_to_y, score_sequence,
                          ssim, ssim_window, temporal_profile, write_curve_tsv, evaluate)
from tvsr.models import ModelSpec, build_model, zero_output_
from tvsr.training import TrainSpec, train


def brute_psnr(a, b, border=0):
    h, w = a.shape[:2]
    total, n = 0.0, 0
    for i in range(border, h - border):
        for j in range(border, w - border):
            d = a[i, j] - b[i, j]
            total += float(np.sum(d * d))
            n += np.size(d)
    return 10 * math.log10(1.0 / (total / n))


def brute_ssim(a, b, size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g2 = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    g2 /= g2.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = np.sum(g2 * pa), np.sum(g2 * pb)
            va = np.sum(g2 * (pa - ma) ** 2)
            vb = np.sum(g2 * (pb - mb) ** 2)
            cv = np.sum(g2 * (pa - ma) * (pb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestY:
    def test_black_white(self):
        assert rgb_to_y(np.zeros(3)) == pytest.approx(16 / 255, abs=1e-12)
        assert rgb_to_y(np.ones(3)) == pytest.approx(235 / 255, abs=1e-12)

    @pytest.mark.parametrize("v", [0.0, 0.25, 0.5, 0.9])
    def test_gray_linear(self, v):
        assert rgb_to_y(np.full(3, v)) == pytest.approx((219 * v + 16) / 255, abs=1e-12)

    @settings(max_examples=100)
    @given(arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)))
    def test_range(self, f):
        y = rgb_to_y(f)
        assert y.shape == (4, 4)
        assert np.all(y >= 16 / 255 - 1e-12) and np.all(y <= 235 / 255 + 1e-12)


class TestPSNR:
    def test_cap(self):
        a = np.random.default_rng(0).random((8, 8))
        assert psnr(a, a) == 99.0

    def test_half_offset(self):
        a = np.random.default_rng(0).random((8, 8)) * 0.5
        assert psnr(a + 0.5, a) == pytest.approx(10 * math.log10(4), abs=1e-9)

    @pytest.mark.parametrize("border", [0, 3])
    def test_brute_force(self, border):
        rng = np.random.default_rng(1)
        a, b = rng.random((16, 12, 3)), rng.random((16, 12, 3))
        assert abs(psnr(a, b, border) - brute_psnr(a, b, border)) < 1e-9

    def test_border_ignores_edges(self):
        a = np.zeros((10, 10))
        b = a.copy()
        b[0, :] = 1.0
        assert psnr(a, b, border_crop=1) == 99.0
        assert psnr(a, b) < 99.0

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 4)), border_crop=2)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((6, 6)), rng.random((6, 6))
        assert psnr(a, b) == psnr(b, a)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(2)
        a = rng.random((32, 32))
        n = rng.standard_normal((32, 32))
        vals = [psnr(a, a + s * n) for s in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]


class TestSSIM:
    def test_identity(self):
        a = np.random.default_rng(0).random((20, 20))
        assert ssim(a, a) == 1.0

    def test_window(self):
        g = ssim_window()
        assert len(g) == 11 and g.sum() == pytest.approx(1.0) and g.argmax() == 5

    def test_checkerboard_inverse(self):
        a = (np.indices((16, 16)).sum(0) % 2).astype(float)
        v = ssim(a, 1 - a)
        assert v < 0
        assert abs(v - brute_ssim(a, 1 - a)) < 1e-9

    def test_random_brute_force(self):
        rng = np.random.default_rng(3)
        a = rng.random((15, 18))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert abs(ssim(a, b) - brute_ssim(a, b)) < 1e-9

    def test_constant_closed_form(self):
        c1 = 0.01**2
        expected = (2 * 0.3 * 0.7 + c1) / (0.3**2 + 0.7**2 + c1)
        assert ssim(np.full((12, 12), 0.3), np.full((12, 12), 0.7)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.7241854852611619, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))
        with pytest.raises(ValueError):
            ssim(np.zeros((12, 12, 3)), np.zeros((12, 12, 3)))


class TestEvaluate:
    @pytest.fixture
    def manifest(self, tmp_path):
        rng = np.random.default_rng(4)
        entries = []
        for name in ("walk", "city", "foliage"):
            save_sequence(synthetic_sequence(rng, 4, 34, 42), tmp_path / name)
            entries.append(ManifestEntry(name, 4, "test"))
        return DatasetManifest(entries, DegradationSpec(scale=2), tmp_path)

    def test_ground_truth_vs_itself(self, manifest):
        for e in manifest.entries:
            gt = manifest.load(e)
            s = score_sequence(e.path, gt, gt)
            assert (s.psnr_y, s.ssim_y, s.psnr_rgb, s.ssim_rgb) == (99.0, 1.0, 99.0, 1.0)

    def test_bicubic_report(self, manifest):
        outputs = {}
        rep = evaluate(None, manifest, EvalProtocol(border_crop=4), outputs=outputs)
        assert [s.name for s in rep.sequences] == ["city", "foliage", "walk"]
        for key in ("psnr_y", "ssim_y", "psnr_rgb", "ssim_rgb"):
            vals = [getattr(s, key) for s in rep.sequences]
            assert abs(rep.mean(key) - sum(vals) / len(vals)) < 1e-9
        assert all(20 < s.psnr_y < 99 for s in rep.sequences)
        assert outputs["walk"].shape == (4, 34, 42, 3)
        lines = rep.to_tsv().splitlines()
        assert lines[0].startswith("# border_crop=4")
        assert lines[1] == "sequence\tpsnr_y\tssim_y\tpsnr_rgb\tssim_rgb"
        assert lines[-1].startswith("mean\t") and len(lines) == 6
        assert "Y PSNR/SSIM" in rep.to_table()

    def test_zero_residual_model_equals_bicubic(self, manifest):
        m = build_model(ModelSpec("rrn", 1, 4, 2), 0)
        zero_output_(m)
        a = evaluate(m, manifest, EvalProtocol(border_crop=4))
        b = evaluate(None, manifest, EvalProtocol(border_crop=4))
        assert abs(a.mean("psnr_y") - b.mean("psnr_y")) < 1e-6

    def test_skip_frames(self):
        gt = synthetic_sequence(0, 5, 16, 16)
        pred = gt.copy()
        pred[0] += 0.1
        pred[-1] += 0.1
        assert score_sequence("x", pred, gt, EvalProtocol(border_crop=0, skip_frames=1)).psnr_y == 99.0
        assert len(score_sequence("x", pred, gt, EvalProtocol(border_crop=0)).psnr_y_per_frame) == 5

    def test_missing_ground_truth(self, manifest, tmp_path):
        manifest.entries.append(ManifestEntry("gone", 4, "test"))
        with pytest.raises(OSError):
            evaluate(None, manifest)


class TestCurves:
    def test_identity_flat(self, tmp_path):
        gt = synthetic_sequence(0, 6, 16, 16)
        curve = psnr_curve(gt, gt)
        assert curve == [99.0] * 6
        write_curve_tsv(curve, tmp_path / "c.tsv")
        assert (tmp_path / "c.tsv").read_text().splitlines()[1] == "0\t99.000000"

    def test_length(self):
        m = build_model(ModelSpec("rrn", 1, 4, 2), 0)
        gt = synthetic_sequence(1, 5, 16, 16)
        assert len(psnr_over_time(m, gt, DegradationSpec(scale=2))) == 5

    def test_information_accumulates(self, capsys):
        # trained on slow pans; later frames see more history than the zero-state first frame
        rng = np.random.default_rng(0)
        deg = DegradationSpec(scale=2)
        clips = [synthetic_sequence(rng, 10, 48, 48, velocity=(0.3, 0.5)) for _ in range(12)]
        spec = TrainSpec(schedule="rrn", base_lr=1e-3, decay_points=(), total_epochs=1, batch_size=4,
                         clip_len=10, patch_lr=16, steps_per_epoch=300, val_clips=0)
        m = train(build_model(ModelSpec("rrn", 3, 16, 2), 0), clips, spec, degradation=deg).model
        curve = psnr_over_time(m, synthetic_sequence(100, 10, 48, 48, velocity=(0.3, 0.5)), deg, border_crop=4)
        with capsys.disabled():
            print(f"\n  psnr over time: {' '.join(f'{v:.2f}' for v in curve)}")
        assert curve[0] <= curve[9]


class TestProfile:
    def test_static(self):
        f = synthetic_sequence(0, 1, 12, 10)[0]
        p = temporal_profile(np.stack([f] * 5), 4)
        assert p.image.shape == (5, 10, 3)
        assert all(np.array_equal(p.image[t], f[4]) for t in range(5))

    def test_rows_are_frame_lines(self):
        seq = synthetic_sequence(1, 6, 12, 10)
        p = temporal_profile(seq, 7)
        for t in range(6):
            assert np.array_equal(p.image[t], seq[t, 7])

    def test_flicker_locality(self):
        seq = np.stack([synthetic_sequence(0, 1, 12, 10)[0]] * 6)
        seq[3] = np.clip(seq[3] + 0.2, 0, 1)
        p = temporal_profile(seq, 5)
        diff = [t for t in range(6) if not np.array_equal(p.image[t], p.image[0])]
        assert diff == [3]

    @pytest.mark.parametrize("row", [-1, 12])
    def test_row_out_of_range(self, row):
        with pytest.raises(ValueError):
            temporal_profile(synthetic_sequence(0, 2, 12, 10), row)

    def test_png(self, tmp_path):
        p = temporal_profile(synthetic_sequence(0, 4, 12, 10), 2)
        p.save_png(tmp_path / "p.png")
        assert Image.open(tmp_path / "p.png").size == (10, 4)

