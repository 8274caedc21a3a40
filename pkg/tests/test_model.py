import math
from dataclasses import replace

import numpy as np
import pytest

from stgaze import autodiff as ad
from stgaze.autodiff import Tensor
from stgaze.errors import InvalidArgument, NumericFailure
from stgaze.gradcheck_suite import tiny_model_config
from stgaze.model import (ABLATIONS, EncoderConfig, GazeStream, ModelConfig, RegressionHead, STGaze, StreamState,
                          average_gaze, patchify, unpatchify)


def numpy_gru_scan(layers, xs, h0):
    """Reference 2-layer GRU over an S×D sequence; layers are (W_ih, W_hh, b_ih, b_hh) tuples."""
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    hs = [h.copy() for h in h0]
    outs = []
    for x in xs:
        inp = x
        for i, (wi, wh, bi, bh) in enumerate(layers):
            h = hs[i]
            n_h = h.shape[0]
            gi, gh = wi @ inp + bi, wh @ h + bh
            r = sig(gi[:n_h] + gh[:n_h])
            z = sig(gi[n_h:2 * n_h] + gh[n_h:2 * n_h])
            n = np.tanh(gi[2 * n_h:] + r * gh[2 * n_h:])
            hs[i] = (1 - z) * n + z * h
            inp = hs[i]
        outs.append(inp)
    return np.array(outs), np.array(hs)


def recurrence_max_diff(T: int, seed: int = 0) -> float:
    """Framewise recurrence with state threading vs one contiguous scan over 64·T vectors."""
    with ad.precision(np.float64):
        cfg = ModelConfig(eye=EncoderConfig((4, 8, 16, 32)), face=EncoderConfig((4, 8, 8, 8)),
                          sam_heads=4, gru_hidden=160, seed=seed)
        stream = GazeStream(cfg, np.random.default_rng(seed))
        rng = np.random.default_rng(seed + 100)
        y = rng.normal(size=(1, T, 64, cfg.dim))
        z, state = stream.temporal(Tensor(y), StreamState.zeros(1, cfg))
        layers = [(l.weight_ih.data, l.weight_hh.data, l.bias_ih.data, l.bias_hh.data) for l in stream.gru.layers]
        ref, ref_h = numpy_gru_scan(layers, y[0].reshape(T * 64, cfg.dim), np.zeros((2, 160)))
    return max(np.abs(z.data[0].reshape(T * 64, -1) - ref).max(), np.abs(state.hidden.data[0] - ref_h).max())


@pytest.mark.parametrize("T", [1, 2, 5])
def test_recurrence_is_a_resumed_scan(T):
    assert recurrence_max_diff(T) < 1e-6


def test_full_size_shape_ledger():
    model = STGaze()
    rng = np.random.default_rng(0)
    imgs = [rng.random((1, 1, 3, 128, 128)).astype(np.float32) for _ in range(3)]
    with ad.no_grad():
        out = model(*imgs)
    log = model.stream.shape_log
    assert log["eye_input"] == (3, 128, 128)
    assert log["eye_features"] == (128, 8, 8)
    assert log["face_features"] == (32, 8, 8)
    assert log["fused"] == (160, 8, 8)
    assert log["sam_output"] == (64, 160)
    assert log["recurrence_output"] == (64, 160)
    assert out.angles.shape == (1, 1, 2)


def test_shape_ledger_rejects_wrong_input():
    model = STGaze(tiny_model_config())
    bad = np.zeros((1, 1, 3, 9, 9))
    with pytest.raises(AssertionError, match="shape ledger"):
        model(bad, bad, bad)


def test_default_parameter_breakdown():
    model = STGaze()
    s = model.stream
    assert s.eca.num_parameters() == 5
    assert sum(b.num_parameters() for b in s.blocks) + s.pos_embedding.data.size == 814_816
    assert s.gru.num_parameters() == 309_120
    assert s.head.num_parameters() == 41_730


class TestStages:
    def test_zero_image_zero_bias_encoder(self):
        model = STGaze(tiny_model_config())
        enc = model.stream.eye_encoder
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.data[...] = 0
        out = enc(Tensor(np.zeros((1, 3, 8, 8))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_fuse_concatenation_order(self):
        stream = GazeStream(ModelConfig(use_eca=False), np.random.default_rng(0))
        x = stream.fuse(Tensor(np.ones((1, 128, 8, 8))), Tensor(np.zeros((1, 32, 8, 8))))
        assert x.shape == (1, 160, 8, 8)
        assert np.all(x.data[0, 0] == 1) and np.all(x.data[0, 159] == 0)

    def test_fuse_zero_eca_halves(self):
        stream = GazeStream(ModelConfig(), np.random.default_rng(0))
        stream.eca.weight.data[...] = 0
        rng = np.random.default_rng(1)
        e, f = rng.normal(size=(1, 128, 8, 8)), rng.normal(size=(1, 32, 8, 8))
        x = stream.fuse(Tensor(e), Tensor(f))
        np.testing.assert_allclose(x.data, 0.5 * np.concatenate([e, f], axis=1), rtol=1e-6)

    def test_fuse_grid_mismatch(self):
        stream = GazeStream(tiny_model_config(), np.random.default_rng(0))
        with pytest.raises(InvalidArgument):
            stream.fuse(Tensor(np.ones((1, 8, 2, 2))), Tensor(np.ones((1, 4, 3, 3))))

    def test_patchify_raster_order(self):
        x = np.arange(160 * 64, dtype=np.float32).reshape(1, 160, 8, 8)
        y = patchify(Tensor(x)).data
        assert y.shape == (1, 64, 160)
        for (r, c), idx in {(0, 0): 0, (7, 7): 63, (1, 2): 10}.items():
            np.testing.assert_array_equal(y[0, idx], x[0, :, r, c])
        assert np.array_equal(unpatchify(Tensor(y), 8).data, x)

    def test_attend_without_sam_is_passthrough(self):
        cfg = tiny_model_config().with_ablation("no_sam")
        stream = GazeStream(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(1, cfg.dim, 2, 2)).astype(np.float32)
        assert np.array_equal(stream.attend(Tensor(x)).data, patchify(Tensor(x)).data)

    def test_attend_zero_blocks_adds_position(self):
        cfg = tiny_model_config()
        stream = GazeStream(cfg, np.random.default_rng(0))
        for b in stream.blocks:
            for p in b.parameters():
                p.data[...] = 0
        x = np.random.default_rng(1).normal(size=(1, cfg.dim, 2, 2)).astype(np.float32)
        expected = patchify(Tensor(x)).data + stream.pos_embedding.data
        np.testing.assert_array_equal(stream.attend(Tensor(x)).data, expected)


class TestHead:
    def test_zero_weights(self):
        head = RegressionHead(6, 4, np.random.default_rng(0))
        for p in head.parameters():
            p.data[...] = 0
        np.testing.assert_array_equal(head(Tensor(np.ones((1, 5, 6)))).data, 0.0)

    def test_saturation(self):
        head = RegressionHead(1, 1, np.random.default_rng(0))
        head.fc1.weight.data[...] = 0
        head.fc1.bias.data[...] = 1.0
        head.fc2.weight.data[...] = 0
        head.fc2.bias.data[...] = [1e6, -1e6]
        out = head(Tensor(np.zeros((1, 3, 1)))).data
        np.testing.assert_allclose(out[0], [math.pi / 2, -math.pi / 2], rtol=1e-6)

    def test_bounded(self):
        rng = np.random.default_rng(0)
        head = RegressionHead(4, 8, rng)
        out = head(Tensor(rng.normal(size=(50, 3, 4)) * 1e3)).data
        assert np.all(np.abs(out) <= math.pi / 2 + 1e-6)


class TestStreamAverage:
    def test_identical_predictions(self):
        g = Tensor(np.array([[0.2, -0.3]]), dtype=np.float64)
        with ad.precision(np.float64):
            angles, _ = average_gaze(g, g)
        np.testing.assert_allclose(angles.data, g.data, atol=1e-12)

    def test_symmetric_yaws_cancel(self):
        with ad.precision(np.float64):
            angles, _ = average_gaze(Tensor([[0.0, 0.4]]), Tensor([[0.0, -0.4]]))
        np.testing.assert_allclose(angles.data, [[0.0, 0.0]], atol=1e-12)

    def test_antipodal_raises(self):
        with ad.precision(np.float64):
            with pytest.raises(NumericFailure):
                average_gaze(Tensor([[0.0, 0.0]]), Tensor([[0.0, math.pi]]))


class TestWiring:
    def test_mirrored_right_eye_gives_negated_yaw(self):
        model = STGaze(tiny_model_config(3))
        rng = np.random.default_rng(0)
        left = rng.random((2, 3, 3, 8, 8))
        face = rng.random((2, 3, 3, 8, 8))
        with ad.no_grad():
            out = model(left, left[..., ::-1].copy(), face)
        np.testing.assert_array_equal(out.right.data[..., 0], out.left.data[..., 0])
        np.testing.assert_array_equal(out.right.data[..., 1], -out.left.data[..., 1])

    def test_streams_share_parameters(self, tmp_path):
        model = STGaze(tiny_model_config())
        assert model.stream is model.right_stream
        names = [n for n, _ in model.state_dict()]
        assert len(names) == len(set(names))
        assert not any(n.startswith("right_stream") for n in names)
        ad.save_checkpoint(tmp_path / "m.stgp", model.state_dict())
        loaded = ad.load_checkpoint(tmp_path / "m.stgp")
        assert sum(a.size for a in loaded.values()) == model.num_parameters()

    def test_unshared_streams_match_shared_batched_path(self):
        cfg = tiny_model_config(5)
        shared = STGaze(cfg)
        split = STGaze(replace(cfg, share_streams=False))
        for (_, a), (_, b) in zip(split.stream.named_parameters(), split.right_stream.named_parameters()):
            b.data[...] = a.data
        rng = np.random.default_rng(0)
        el, er, fc = (rng.random((1, 2, 3, 8, 8)) for _ in range(3))
        with ad.no_grad():
            a = shared(el, er, fc).angles.data
            b = split(el, er, fc).angles.data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_state_isolation(self):
        model = STGaze(tiny_model_config(1))
        rng = np.random.default_rng(0)
        seq_a = [rng.random((1, 3, 3, 8, 8)) for _ in range(3)]
        seq_b = [rng.random((1, 1, 3, 8, 8)) for _ in range(3)]
        with ad.no_grad():
            carried = model(*seq_a).states
            fresh = model(*seq_b).angles.data
            again = model(*seq_b, states=model.zero_states(1)).angles.data
            stale = model(*seq_b, states=carried).angles.data
        assert np.any(carried[0].hidden.data != 0)
        assert np.array_equal(fresh, again)
        assert not np.allclose(fresh, stale)

    def test_zero_frames_rejected(self):
        model = STGaze(tiny_model_config())
        empty = np.zeros((1, 0, 3, 8, 8))
        with pytest.raises(InvalidArgument):
            model(empty, empty, empty)


class TestTemporalPath:
    def test_frame0_pixel_moves_frame2_output(self):
        with ad.precision(np.float64):
            model = STGaze(tiny_model_config(2))
            rng = np.random.default_rng(0)
            el, er, fc = (rng.random((1, 3, 3, 8, 8)) for _ in range(3))

            def frame2(x):
                with ad.no_grad():
                    return model(x, er, fc).angles.data[0, 2]

            h = 1e-5
            bumped = el.copy()
            bumped[0, 0, 0, 3, 4] += h
            fd = (frame2(bumped) - frame2(el)) / h
            assert np.abs(fd).max() > 1e-8

            x = ad.Parameter(el)
            ad.backward(ad.tensor_sum(model(x, er, fc).angles[:, 2]))
            assert np.abs(x.grad[0, 0]).max() > 0
            np.testing.assert_allclose(x.grad[0, 0, 0, 3, 4], fd.sum(), rtol=1e-3)

    def test_static_ablation_frames_are_independent(self):
        model = STGaze(tiny_model_config(4).with_ablation("no_gru"))
        rng = np.random.default_rng(0)
        el, er, fc = (rng.random((1, 4, 3, 8, 8)) for _ in range(3))
        perm = [2, 0, 3, 1]
        with ad.precision(np.float64), ad.no_grad():
            a = model(el, er, fc).angles.data
            b = model(el[:, perm], er[:, perm], fc[:, perm]).angles.data
        np.testing.assert_allclose(b, a[:, perm], atol=1e-12)

    def test_pool_before_gru_sees_single_token(self):
        model = STGaze(tiny_model_config().with_ablation("pool_pre_gru"))
        x = np.random.default_rng(0).random((1, 2, 3, 8, 8))
        with ad.no_grad():
            model(x, x, x)
        assert model.stream.shape_log["recurrence_output"] == (1, 12)


def test_ablations_have_distinct_parameter_counts():
    counts = {name: STGaze(ModelConfig().with_ablation(name)).num_parameters() for name in ABLATIONS}
    assert len({counts[n] for n in ("no_eca", "no_sam", "no_gru", "pool_pre_gru")}) == 4
    # pooling changes wiring, not parameters
    assert counts["pool_pre_gru"] == counts["full"]


def test_invalid_ablation_combination():
    with pytest.raises(InvalidArgument):
        ModelConfig(use_gru=False, pool_before_gru=True)
