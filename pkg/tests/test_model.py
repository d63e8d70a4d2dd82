import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c3dvqa import checkpoint
from c3dvqa import tensor as T
from c3dvqa.data import RawVideo, make_clip, sample_eval_segments
from c3dvqa.maps import MAP_KINDS, dump_maps, read_pgm, to_gray
from c3dvqa.model import C3DVQA, ModelConfig, build_model, mask_residual, predict_clips, predict_video
from c3dvqa.tensor import Tensor

# score of build_model(ModelConfig(frames=8, patch=16, fc_hidden=8), seed=7) on golden_inputs()
GOLDEN_SCORE = -0.05476370081305504


def golden_inputs():
    rng = np.random.default_rng(123)
    d = rng.uniform(0, 1, (1, 8, 16, 16)).astype(np.float32)
    r = rng.uniform(-0.2, 0.2, (1, 8, 16, 16)).astype(np.float32)
    return d, r


def tiny(frames=4, variant="c3d", seed=0, hidden=8):
    return build_model(ModelConfig(frames=frames, patch=16, fc_hidden=hidden, variant=variant), seed=seed)


def clip(frames=4, size=16, seed=0, scale=0.2):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 1, (1, frames, size, size)).astype(np.float32)
    r = rng.uniform(-scale, scale, (1, frames, size, size)).astype(np.float32)
    return d, r


def count_oracle(frames=60, bc=16, trunk=(64, 64, 32, 1), hidden=64):
    total = 0
    for c_in, c_out in [(1, bc), (bc, bc)] * 2:
        total += 3 * 3 * c_in * c_out + c_out
    c_in = 2 * bc
    for c_out in trunk:
        total += 3 * 3 * 3 * c_in * c_out + c_out
        c_in = c_out
    total += frames * hidden + hidden
    total += hidden + 1
    return total


def test_trunk_weight_shapes():
    m = build_model()
    assert [tuple(c.weight.shape) for c in m.trunk] == [
        (64, 32, 3, 3, 3), (64, 64, 3, 3, 3), (32, 64, 3, 3, 3), (1, 32, 3, 3, 3)]


def test_parameter_count():
    assert build_model().num_parameters() == count_oracle() == 231138
    assert tiny(frames=4).num_parameters() == count_oracle(frames=4, hidden=8)


def test_same_seed_same_parameters():
    a, b = build_model(seed=3).state_dict(), build_model(seed=3).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build_model(seed=4).state_dict()
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_paper_shapes_default():
    m = build_model()
    out = m(*clip(frames=60, size=112))
    assert out.distorted_features.shape == (1, 16, 60, 28, 28)
    assert out.residual_features.shape == (1, 16, 60, 28, 28)
    assert out.threshold.shape == (1, 1, 60, 28, 28)
    assert out.masked.shape == (1, 1, 60, 28, 28)
    assert out.score.shape == ()


def test_golden_score():
    m = build_model(ModelConfig(frames=8, patch=16, fc_hidden=8), seed=7)
    assert m(*golden_inputs()).score.item() == pytest.approx(GOLDEN_SCORE, rel=1e-5, abs=1e-7)


def test_zero_residual_masks_to_zero():
    m = tiny()
    d, _ = clip()
    out = m(d, np.zeros_like(d))
    assert np.all(out.masked.data == 0)
    assert np.isfinite(out.score.item())


def test_threshold_strictly_inside_unit_interval():
    out = tiny()(*clip(scale=1.0))
    th = out.threshold.data
    assert np.all(th > 0) and np.all(th < 1)


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(1.01, 50.0), seed=st.integers(0, 1000))
def test_mask_is_linear_in_residual_magnitude(alpha, seed):
    rng = np.random.default_rng(seed)
    res = rng.uniform(-1, 1, (1, 1, 3, 8, 8))
    th = Tensor(rng.uniform(0.01, 0.99, (1, 1, 3, 2, 2)), dtype=np.float64)
    base = mask_residual(Tensor(res, dtype=np.float64), th).data
    scaled = mask_residual(Tensor(alpha * res, dtype=np.float64), th).data
    np.testing.assert_allclose(scaled, alpha * base, rtol=1e-12, atol=1e-300)


def test_constant_half_threshold_is_pooled_magnitude():
    res = np.random.default_rng(0).uniform(-1, 1, (1, 1, 2, 8, 8))
    th = Tensor(np.full((1, 1, 2, 2, 2), 0.5), dtype=np.float64)
    pooled = np.abs(res).reshape(1, 1, 2, 2, 4, 2, 4).mean(axis=(4, 6))
    np.testing.assert_allclose(mask_residual(Tensor(res, dtype=np.float64), th).data, 0.5 * pooled)


def test_batched_forward_matches_single():
    m = tiny()
    d1, r1 = clip(seed=1)
    d2, r2 = clip(seed=2)
    both = m(np.stack([d1, d2]), np.stack([r1, r2])).score.data
    assert both.shape == (2,)
    np.testing.assert_allclose(both, [m(d1, r1).score.item(), m(d2, r2).score.item()], rtol=1e-5)


def test_input_validation():
    m = tiny()
    d, r = clip()
    with pytest.raises(ValueError):
        m(d, r[:, :3])
    with pytest.raises(ValueError):
        m(*clip(frames=5))
    with pytest.raises(ValueError):
        m(d[..., :14, :14], r[..., :14, :14])
    with pytest.raises(ValueError):
        ModelConfig(patch=30)
    with pytest.raises(ValueError):
        ModelConfig(trunk_channels=(8, 2))
    with pytest.raises(ValueError):
        ModelConfig(variant="lstm")


# -- 2-D ablation -------------------------------------------------------------------


def test_ablation_constant_video():
    m = tiny(variant="2d")
    d, r = clip(frames=1)
    out = m(np.repeat(d, 5, axis=1), np.repeat(r, 5, axis=1))
    fs = out.frame_scores.data[0]
    assert np.allclose(fs, fs[0], rtol=0, atol=1e-7)
    assert out.score.item() == pytest.approx(float(fs[0]), abs=1e-7)


def test_ablation_single_frame_matches_pipeline():
    m = tiny(variant="2d", frames=1)
    d, r = clip(frames=1)
    out = m(d, r)
    assert out.score.item() == pytest.approx(float(out.frame_scores.data[0, 0]), abs=1e-7)
    assert m.forward_2d_ablation(d, r).item() == out.score.item()


def test_ablation_score_is_frame_mean():
    m = tiny(variant="2d")
    out = m(*clip(frames=3))
    assert out.score.item() == pytest.approx(float(np.mean(out.frame_scores.data[0])), abs=1e-7)
    frame = T.mean(Tensor([[0.2, 0.4, 0.6]]), axes=1)
    assert frame.data.tolist() == pytest.approx([0.4])


def test_ablation_accepts_any_segment_length():
    m = tiny(variant="2d", frames=4)
    for D in (1, 3, 7):
        assert np.isfinite(m(*clip(frames=D)).score.item())


def test_ablation_needs_2d_variant():
    with pytest.raises(ValueError):
        tiny().forward_2d_ablation(*clip())


def test_variant_smoke_parity():
    inputs = clip()
    for variant in ("c3d", "2d"):
        assert np.isfinite(tiny(variant=variant)(*inputs).score.item())
    assert tiny(variant="2d").trunk[0].weight.ndim == 4


# -- prediction and persistence -------------------------------------------------------


def video_pair(frames, size=16, seed=0):
    rng = np.random.default_rng(seed)
    ref = rng.integers(0, 256, (frames, size, size), dtype=np.uint8)
    dist = np.clip(ref.astype(int) + rng.integers(-20, 21, ref.shape), 0, 255).astype(np.uint8)
    return RawVideo.from_array(ref), RawVideo.from_array(dist)


def test_predict_single_segment():
    m = tiny()
    ref, dist = video_pair(4)
    score, segs = predict_video(m, ref, dist)
    assert len(segs) == 1
    assert score == float(segs[0])


def test_predict_two_segments_mean():
    m = tiny()
    ref, dist = video_pair(9)  # 2 segments, tail frame dropped
    score, segs = predict_video(m, ref, dist)
    assert len(segs) == 2
    assert score == pytest.approx((segs[0] + segs[1]) / 2, abs=1e-12)


def test_predict_four_segments_brute_force():
    m = tiny()
    ref, dist = video_pair(8, size=32)
    # crop to 16x32 so the tiling is 2 temporal x 2 spatial
    ref = RawVideo.from_array(ref.luma[:, :16, :])
    dist = RawVideo.from_array(dist.luma[:, :16, :])
    score, segs = predict_video(m, ref, dist)
    assert len(segs) == 4
    brute = []
    for t in (0, 4):
        for col in (0, 16):
            c = make_clip(ref, dist, t, 0, col, 4, 16)
            brute.append(m(c.distorted, c.residual).score.item())
    assert score == pytest.approx(float(np.mean(brute)), abs=1e-6)
    assert len(sample_eval_segments(ref, dist, 4, 16)) == 4


def test_predict_clips_batching_invariant():
    m = tiny()
    segs = sample_eval_segments(*video_pair(8, size=32), 4, 16)
    d = np.stack([s.distorted for s in segs])
    r = np.stack([s.residual for s in segs])
    np.testing.assert_allclose(predict_clips(m, d, r, 1), predict_clips(m, d, r, 8), rtol=1e-5)


def test_state_dict_round_trip_bitwise(tmp_path):
    m = tiny(seed=5)
    checkpoint.save(tmp_path / "m.bin", m.state_dict())
    back = C3DVQA.from_state_dict(checkpoint.load(tmp_path / "m.bin"), patch=16)
    assert back.cfg == m.cfg
    d, r = clip()
    assert back(d, r).score.data.tobytes() == m(d, r).score.data.tobytes()


def test_from_state_dict_rejects_wrong_frames():
    with pytest.raises(ValueError):
        C3DVQA.from_state_dict(tiny(frames=4).state_dict(), patch=16, frames=8)


def test_load_state_dict_shape_mismatch():
    with pytest.raises(ValueError):
        tiny(frames=4).load_state_dict(tiny(frames=5).state_dict())


# -- maps -------------------------------------------------------------------------


def test_dump_maps_files(tmp_path):
    m = tiny()
    d, r = clip()
    written = dump_maps(m, d, r, tmp_path, frames=[0, 3])
    assert set(written) == set(MAP_KINDS)
    for paths in written.values():
        assert [p.name[-8:] for p in paths] == ["f000.pgm", "f003.pgm"]
        for p in paths:
            assert read_pgm(p).shape == (4, 4)


def test_dump_maps_zero_residual_is_black(tmp_path):
    m = tiny()
    d, _ = clip()
    written = dump_maps(m, d, np.zeros_like(d), tmp_path)
    for p in written["masked"]:
        assert not read_pgm(p).any()


def test_dump_maps_rejects_bad_frame(tmp_path):
    with pytest.raises(ValueError):
        dump_maps(tiny(), *clip(), tmp_path, frames=[4])


def test_to_gray_range():
    g = to_gray(np.array([[0.0, 0.5], [1.0, 0.25]]))
    assert g.dtype == np.uint8 and g.min() == 0 and g.max() == 255
    assert not to_gray(np.full((2, 2), 3.0)).any()
