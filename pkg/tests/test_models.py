import numpy as np
import pytest
import torch

from tvsr.dataio import bicubic_upsample
from tvsr.models import (HiddenState, ModelSpec, UnrollTrace, Variant, build_model,
                         depth_to_space, forward_early2d, forward_slow3d, forward_video,
                         layer_inventory, load_checkpoint, rrn_step, save_checkpoint,
                         space_to_depth, window_indices, zero_output_)
from tvsr.profiling import count_params

from oracles import fd_gradcheck

RRN_FUSION, BLOCK_2D, RRN_HEAD_H, RRN_HEAD_O = 209_792, 295_168, 147_584, 55_344


def small(variant, blocks=2, channels=8, scale=2, **kw):
    return build_model(ModelSpec(variant, blocks, channels, scale, **kw), rng_seed=0)


def clip(seed, length, h, w, batch=1, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, length, 3, h, w, generator=g, dtype=dtype)


class TestParameterInventory:
    def test_rrn_large(self):
        assert count_params(ModelSpec(Variant.RRN, 10)) == 3_364_400
        assert RRN_FUSION + 10 * BLOCK_2D + RRN_HEAD_H + RRN_HEAD_O == 3_364_400

    def test_rrn_small(self):
        assert count_params(ModelSpec(Variant.RRN, 5)) == 1_888_560

    @pytest.mark.parametrize("k", [1, 2, 5, 10, 17])
    def test_rrn_closed_form(self, k):
        assert count_params(ModelSpec(Variant.RRN, k)) == 209_792 + k * 295_168 + 202_928

    def test_early2d_block_delta(self):
        d = count_params(ModelSpec(Variant.EARLY_2D, 10)) - count_params(ModelSpec(Variant.EARLY_2D, 5))
        assert d == 5 * 2 * (128**2 * 9 + 128) == 5 * BLOCK_2D

    def test_slow3d_block_delta(self):
        d = count_params(ModelSpec(Variant.SLOW_3D, 10)) - count_params(ModelSpec(Variant.SLOW_3D, 5))
        assert d == 5 * 2 * (128**2 * 27 + 128)

    def test_fusion_inputs(self):
        assert layer_inventory(ModelSpec(Variant.RRN, 1))[0].in_channels == 182
        assert layer_inventory(ModelSpec(Variant.EARLY_2D, 1))[0].in_channels == 21

    @pytest.mark.parametrize("variant", list(Variant))
    def test_matches_realized_tensors(self, variant):
        m = small(variant, blocks=3, channels=16, scale=4)
        assert sum(p.numel() for p in m.parameters()) == count_params(m)

    def test_realized_large_rrn(self):
        m = build_model(ModelSpec(Variant.RRN, 10))
        assert sum(p.numel() for p in m.parameters()) == 3_364_400

    def test_deterministic_init(self):
        a, b = small(Variant.RRN), small(Variant.RRN)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n
        c = build_model(ModelSpec(Variant.RRN, 2, 8, 2), rng_seed=1)
        assert not torch.equal(a.fusion.weight, c.fusion.weight)

    def test_zero_bias_init(self):
        m = small(Variant.EARLY_2D)
        assert all(torch.count_nonzero(mod.bias) == 0 for mod in m.modules() if hasattr(mod, "bias") and mod.bias is not None)

    def test_unsupported_variant(self):
        with pytest.raises(ValueError):
            ModelSpec("lstm", 2)


class TestDepthToSpace:
    def test_example(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
        assert depth_to_space(x, 2).reshape(2, 2).tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_definition(self):
        r, c, h, w = 3, 2, 4, 5
        x = torch.randn(c * r * r, h, w)
        y = depth_to_space(x, r)
        for ch in range(c):
            for dy in range(r):
                for dx in range(r):
                    assert torch.equal(y[ch, dy::r, dx::r], x[ch * r * r + dy * r + dx])

    def test_matches_pixel_shuffle(self):
        x = torch.randn(2, 48, 5, 6)
        assert torch.equal(depth_to_space(x, 4), torch.nn.functional.pixel_shuffle(x, 4))

    @pytest.mark.parametrize("r", [1, 2, 4])
    def test_round_trip(self, r):
        x = torch.randn(2, 3 * r * r, 7, 5)
        assert torch.equal(space_to_depth(depth_to_space(x, r), r), x)

    def test_identity(self):
        x = torch.randn(1, 3, 4, 4)
        assert torch.equal(depth_to_space(x, 1), x)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            depth_to_space(torch.zeros(1, 5, 2, 2), 2)


@pytest.mark.parametrize("variant,fn", [(Variant.EARLY_2D, forward_early2d), (Variant.SLOW_3D, forward_slow3d)])
class TestCNNForward:
    def test_zero_tail_is_bicubic(self, variant, fn):
        m = zero_output_(small(variant, scale=4).double())
        window = np.random.default_rng(0).random((7, 6, 5, 3))
        np.testing.assert_array_equal(fn(m, window), bicubic_upsample(window[3], 4))

    def test_shape(self, variant, fn):
        m = small(variant, blocks=1, channels=4, scale=4)
        assert fn(m, np.zeros((7, 64, 64, 3))).shape == (256, 256, 3)

    def test_deterministic(self, variant, fn):
        m = small(variant)
        w = clip(1, 7, 6, 6)
        assert torch.equal(fn(m, w), fn(m, w))

    def test_wrong_window(self, variant, fn):
        with pytest.raises(ValueError):
            fn(small(variant), np.zeros((5, 6, 6, 3)))

    def test_variant_mismatch(self, variant, fn):
        with pytest.raises(ValueError):
            fn(small(Variant.RRN), np.zeros((7, 6, 6, 3)))


def test_slow3d_temporal_padding_is_zero_frames():
    m = small(Variant.SLOW_3D, blocks=1)
    x = clip(0, 7, 5, 5).transpose(1, 2)  # (B, C, N, h, w)
    conv = m.head
    padded = torch.nn.functional.pad(x, (0, 0, 0, 0, 1, 1))
    manual = torch.nn.functional.conv3d(padded, conv.weight, conv.bias, padding=(0, 1, 1))
    out = conv(x)
    assert out.shape[2] == 7
    torch.testing.assert_close(out, manual, rtol=0, atol=1e-6)


class TestRRN:
    def test_zero_state_at_start(self):
        m = small(Variant.RRN)
        x = clip(0, 3, 6, 6)
        zero = HiddenState.zeros(m, 1, 6, 6)
        _, sr0 = m.step(x[:, 0], x[:, 0], zero)
        with torch.no_grad():
            out = m(x)
        assert torch.equal(out[:, 0], sr0.detach())
        other = HiddenState(torch.ones_like(zero.h), torch.ones_like(zero.o))
        _, sr_other = m.step(x[:, 0], x[:, 0], other)
        assert not torch.equal(out[:, 0], sr_other.detach())

    def test_identity_propagation(self):
        m = small(Variant.RRN, blocks=4)
        with torch.no_grad():
            for b in m.blocks:
                b.conv2.weight.zero_()
                b.conv2.bias.zero_()
        trace = UnrollTrace()
        x = clip(2, 2, 6, 6)
        rrn_step(m, x[:, 0], x[:, 1], None, trace)
        assert len(trace.activations) == 5
        for a in trace.activations[1:]:
            assert torch.equal(a, trace.activations[0])

    def test_hidden_nonnegative(self):
        m = small(Variant.RRN)
        x = clip(3, 2, 6, 6) * 4 - 2
        state, _ = rrn_step(m, x[:, 0], x[:, 1])
        assert state.h.min() >= 0
        assert state.o.min() < 0  # o is not rectified

    def test_dimension_mismatch(self):
        m = small(Variant.RRN)
        with pytest.raises(ValueError):
            rrn_step(m, torch.zeros(1, 3, 6, 6), torch.zeros(1, 3, 6, 7))
        with pytest.raises(ValueError):
            rrn_step(m, torch.zeros(1, 3, 6, 6), torch.zeros(1, 3, 6, 6), HiddenState.zeros(m, 1, 5, 5))

    def test_numpy_step(self):
        m = small(Variant.RRN).double()
        f = np.random.default_rng(0).random((6, 6, 3))
        state, sr = rrn_step(m, f, f)
        assert sr.shape == (12, 12, 3) and state.h.shape == (1, 8, 6, 6)

    def test_markov_replay(self):
        m = small(Variant.RRN)
        x = clip(4, 8, 6, 6)
        with torch.no_grad():
            full = m(x)
            state = None
            for t in range(4):
                state, _ = m.step(x[:, max(t - 1, 0)], x[:, t], state)
            saved = state.clone()
            cont = []
            for t in range(4, 8):
                saved, sr = m.step(x[:, t - 1], x[:, t], saved)
                cont.append(sr)
        assert torch.equal(torch.stack(cont, 1), full[:, 4:])

    def test_plain_hidden_stack(self):
        m = small(Variant.RRN, residual_hidden=False)
        assert not m.blocks[0].skip
        assert count_params(m) == count_params(small(Variant.RRN))


class TestForwardVideo:
    @pytest.mark.parametrize("variant", list(Variant))
    @pytest.mark.parametrize("length", [1, 2, 5])
    def test_length(self, variant, length):
        m = small(variant)
        out = forward_video(m, np.random.default_rng(0).random((length, 6, 5, 3)))
        assert out.shape == (length, 12, 10, 3)

    @pytest.mark.parametrize("variant", list(Variant))
    def test_black_stays_black(self, variant):
        m = zero_output_(small(variant))
        out = forward_video(m, np.zeros((4, 6, 6, 3)))
        assert np.array_equal(out, np.zeros((4, 12, 12, 3)))

    def test_empty(self):
        with pytest.raises(ValueError):
            forward_video(small(Variant.RRN), np.zeros((0, 6, 6, 3)))

    def test_symmetric_windows(self):
        idx = window_indices(5, 3)
        assert idx[0].tolist() == [2, 1, 0, 0, 1, 2, 3]
        assert idx[4].tolist() == [1, 2, 3, 4, 4, 3, 2]
        assert window_indices(1, 3).tolist() == [[0] * 7]

    def test_cnn_video_uses_windows(self):
        m = small(Variant.EARLY_2D)
        x = clip(5, 5, 6, 6)
        with torch.no_grad():
            out = m.forward_video(x)
            mid = m(x[:, torch.tensor(window_indices(5, 3)[2])])
        assert torch.equal(out[:, 2], mid)


@pytest.mark.parametrize("variant", [Variant.EARLY_2D, Variant.SLOW_3D])
def test_cnn_gradients_match_finite_differences(variant):
    m = build_model(ModelSpec(variant, 1, 4, 2, temporal_radius=1), rng_seed=0).double()
    x = clip(0, 3, 8, 8, dtype=torch.float64)
    y = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert fd_gradcheck(m, x, y) < 1e-3



def test_rrn_gradients_match_finite_differences():
    m = build_model(ModelSpec(Variant.RRN, 1, 4, 2), rng_seed=0).double()
    x = clip(0, 3, 8, 8, dtype=torch.float64)
    y = clip(1, 3, 16, 16, dtype=torch.float64)
    assert fd_gradcheck(m, x, y) < 1e-3

class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = small(Variant.SLOW_3D)
        save_checkpoint(tmp_path / "m.ckpt", m, step=17)
        back, step, _ = load_checkpoint(tmp_path / "m.ckpt")
        assert step == 17 and back.spec == m.spec
        for (n, p), (_, q) in zip(m.state_dict().items(), back.state_dict().items()):
            assert torch.equal(p, q), n

    def test_inventory_mismatch(self, tmp_path):
        import zipfile
        m = small(Variant.RRN)
        save_checkpoint(tmp_path / "m.ckpt", m)
        with zipfile.ZipFile(tmp_path / "m.ckpt") as zf:
            members = {n: zf.read(n) for n in zf.namelist()}
        members["spec.txt"] = members["spec.txt"].replace(b"blocks=2", b"blocks=3")
        with zipfile.ZipFile(tmp_path / "bad.ckpt", "w") as zf:
            for n, d in members.items():
                zf.writestr(n, d)
        with pytest.raises(ValueError, match="disagree"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.ckpt")
