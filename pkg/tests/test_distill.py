import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from incdet.boxes import BoundingBox, project_to_grid
from incdet.distill import (afd_from_features, attention_distill, bottom_up_afd, feature_distill, normalize_map, qualifying_pairs,
                            self_attention, topdown_afd, topdown_mask, topdown_mask_tensor, topdown_threshold)


def t64(x):
    return torch.as_tensor(x, dtype=torch.float64)


def rand_fm(rng, shape=(2, 4, 4)):
    return rng.normal(size=shape)


# -- self attention -----------------------------------------------------------


def test_self_attention_zero():
    assert torch.equal(self_attention(torch.zeros(3, 4, 5)), torch.zeros(4, 5))


def test_self_attention_pythagoras():
    f = torch.tensor([3.0, 4.0]).view(2, 1, 1)
    assert self_attention(f).item() == 25.0


def test_self_attention_scales_quadratically():
    rng = np.random.default_rng(0)
    f = t64(rand_fm(rng))
    torch.testing.assert_close(self_attention(3.0 * f), 9.0 * self_attention(f))


def test_normalized_attention_scale_invariant():
    # powers of two keep the scaling exact in floating point
    rng = np.random.default_rng(1)
    f = t64(rand_fm(rng, (3, 5, 5)))
    for k in (0.5, 2.0, 8.0):
        assert torch.equal(normalize_map(self_attention(k * f)), normalize_map(self_attention(f)))


# -- oracle equivalence -------------------------------------------------------


def test_losses_match_literal_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        fs, ft = rand_fm(rng, shape), rand_fm(rng, shape)
        ms = rng.integers(0, 4, size=shape[1:]).astype(float)
        mt = rng.integers(0, 4, size=shape[1:]).astype(float)
        assert bottom_up_afd(t64(fs), t64(ft)).item() == pytest.approx(oracles.bottom_up(fs, ft), abs=1e-6)
        assert topdown_afd(t64(fs), t64(ft), t64(ms), t64(mt)).item() == pytest.approx(
            oracles.top_down(fs, ft, ms, mt), abs=1e-6)
        assert feature_distill(t64(fs), t64(ft)).item() == pytest.approx(oracles.feature(fs, ft), abs=1e-6)
        assert attention_distill(t64(fs), t64(ft)).item() == pytest.approx(
            oracles.attention_transfer(fs, ft), abs=1e-6)


def test_afd_is_sum_of_its_terms():
    rng = np.random.default_rng(9)
    fs, ft = t64(rand_fm(rng, (2, 3, 4, 4))), t64(rand_fm(rng, (2, 3, 4, 4)))
    ms, mt = t64(rng.integers(0, 3, (2, 4, 4)).astype(float)), t64(rng.integers(0, 3, (2, 4, 4)).astype(float))
    total = afd_from_features(fs, ft, ms, mt, "afd").item()
    bu = afd_from_features(fs, ft, None, None, "bu").item()
    td = afd_from_features(fs, ft, ms, mt, "td").item()
    assert total == pytest.approx(bu + td, abs=1e-12)
    with pytest.raises(ValueError):
        afd_from_features(fs, ft, ms, mt, "xyz")


def test_batched_losses_are_per_image_means():
    rng = np.random.default_rng(5)
    fs, ft = rand_fm(rng, (3, 2, 4, 4)), rand_fm(rng, (3, 2, 4, 4))
    expected = np.mean([oracles.bottom_up(fs[i], ft[i]) for i in range(3)])
    assert bottom_up_afd(t64(fs), t64(ft)).item() == pytest.approx(expected, abs=1e-9)


# -- identity and degenerate cases --------------------------------------------


def test_identity_zero():
    rng = np.random.default_rng(2)
    f = t64(rand_fm(rng))
    m = t64(rng.integers(0, 3, size=(4, 4)).astype(float))
    assert bottom_up_afd(f, f).item() == 0.0
    assert topdown_afd(f, f, m, m).item() == 0.0
    assert feature_distill(f, f).item() == 0.0
    assert attention_distill(f, f).item() == 0.0


def test_zero_features_and_zero_masks():
    z = torch.zeros(2, 4, 4, dtype=torch.float64)
    assert bottom_up_afd(z, z).item() == 0.0
    rng = np.random.default_rng(3)
    fs, ft = t64(rand_fm(rng)), t64(rand_fm(rng))
    assert topdown_afd(fs, ft, torch.zeros(4, 4), torch.zeros(4, 4)).item() == 0.0
    assert attention_distill(z, z).item() == 0.0


def test_zero_norm_side_has_no_nan_gradient():
    fs = torch.zeros(2, 3, 3, dtype=torch.float64, requires_grad=True)
    ft = torch.ones(2, 3, 3, dtype=torch.float64)
    loss = bottom_up_afd(fs, ft)
    loss.backward()
    assert torch.isfinite(fs.grad).all()
    assert loss.item() == pytest.approx(oracles.bottom_up(np.zeros((2, 3, 3)), np.ones((2, 3, 3))))


def test_feature_distill_closed_form():
    rng = np.random.default_rng(4)
    f = t64(rand_fm(rng, (3, 4, 5)))
    for eps in (0.1, 0.5, 2.0):
        assert feature_distill(f + eps, f).item() == pytest.approx(0.5 * eps ** 2 * f.numel(), rel=1e-12)


def test_attention_distill_scale_invariant():
    rng = np.random.default_rng(6)
    fs, ft = t64(rand_fm(rng)), t64(rand_fm(rng))
    base = attention_distill(fs, ft).item()
    assert attention_distill(4.0 * fs, ft).item() == pytest.approx(base, abs=1e-12)
    assert attention_distill(fs, 0.5 * ft).item() == pytest.approx(base, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    fs, ft = t64(rand_fm(rng)), t64(rand_fm(rng))
    ms, mt = t64(rng.random((4, 4))), t64(rng.random((4, 4)))
    for v in (bottom_up_afd(fs, ft), topdown_afd(fs, ft, ms, mt), feature_distill(fs, ft),
              attention_distill(fs, ft)):
        assert v.item() >= 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        bottom_up_afd(torch.zeros(2, 4, 4), torch.zeros(2, 4, 5))
    with pytest.raises(ValueError):
        topdown_afd(torch.zeros(2, 4, 4), torch.zeros(2, 4, 4), torch.zeros(3, 3), torch.zeros(4, 4))


# -- gradients wrt student features -------------------------------------------


def _fd_check(fn, x, h=1e-3, tol=1e-3):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    flat = x.detach().clone().view(-1)
    numeric = torch.zeros_like(flat)
    for k in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[k] += h
        down[k] -= h
        numeric[k] = (fn(up.view_as(x)) - fn(down.view_as(x))).item() / (2 * h)
    numeric = numeric.view_as(x)
    rel = (analytic - numeric).abs() / torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-8)
    assert rel.max().item() <= tol, rel.max().item()


@pytest.mark.parametrize("seed", range(3))
def test_feature_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    fs, ft = t64(rand_fm(rng, (2, 3, 3))), t64(rand_fm(rng, (2, 3, 3)))
    ms, mt = t64(rng.integers(0, 3, (3, 3)).astype(float) + 0.5), t64(rng.integers(0, 3, (3, 3)).astype(float))
    _fd_check(lambda x: bottom_up_afd(x, ft), fs)
    _fd_check(lambda x: topdown_afd(x, ft, ms, mt), fs)
    _fd_check(lambda x: feature_distill(x, ft), fs)
    _fd_check(lambda x: attention_distill(x, ft), fs)


# -- top-down threshold and masks ---------------------------------------------


def P(x1, y1, x2, y2, score=0.9):
    return BoundingBox(x1, y1, x2, y2, score=score)


def test_threshold_equal_proposal():
    g = BoundingBox(0, 0, 16, 16)
    assert topdown_threshold(g, [P(0, 0, 16, 16)]) == 0.5


def test_threshold_disjoint_and_empty():
    g = BoundingBox(0, 0, 16, 16)
    assert topdown_threshold(g, []) == 0.0
    assert topdown_threshold(g, [P(20, 20, 30, 30)]) == 0.0
    assert qualifying_pairs([g], [P(20, 20, 30, 30)]) == []
    assert qualifying_pairs([g], []) == []


def _proposal_with_iou(g, target):
    # shrink a proposal inside g horizontally: IoU = width fraction
    w = (g.x2 - g.x1) * target
    return P(g.x1, g.y1, g.x1 + w, g.y2)


def test_threshold_three_proposals():
    g = BoundingBox(0, 0, 100, 10)
    props = [_proposal_with_iou(g, v) for v in (0.2, 0.6, 0.9)]
    assert topdown_threshold(g, props) == pytest.approx(0.45)
    assert qualifying_pairs([g], props) == [(0, 1), (0, 2)]


def test_mask_no_gt_is_zero():
    m = topdown_mask([], [P(0, 0, 8, 8)], (4, 4), 8)
    assert torch.equal(m, torch.zeros(4, 4))


def test_mask_single_box():
    g = BoundingBox(8, 0, 24, 16)
    m = topdown_mask([g], [P(8, 0, 24, 16)], (4, 4), 8)
    expected = torch.zeros(4, 4)
    r = project_to_grid(g, 8, (4, 4))
    expected[r.r1:r.r2, r.c1:r.c2] = 1
    assert torch.equal(m, expected)
    assert m.sum().item() == 4  # rows [0, 2) x cols [1, 3)


def test_mask_accumulates_to_two():
    g = BoundingBox(0, 0, 16, 16)
    props = [P(0, 0, 16, 16), P(0, 0, 12, 16)]  # IoUs 1.0 and 0.75, both above th = 0.5
    m = topdown_mask([g], props, (4, 4), 8)
    assert m[0, 0].item() == 2.0
    assert m[0, 1].item() == 2.0  # col 1 covers x in [8, 16); second proposal ends at 12
    assert m[2:, :].sum().item() == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(2, 40), st.integers(2, 40)),
                min_size=1, max_size=4),
       st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(2, 40), st.integers(2, 40)),
                min_size=0, max_size=8))
def test_mask_tensor_matches_reference(gts, props):
    gts = [BoundingBox(x, y, x + w, y + h) for x, y, w, h in gts]
    props = [P(x, y, x + w, y + h) for x, y, w, h in props]
    ref = topdown_mask(gts, props, (8, 8), 8, dtype=torch.float64)
    gt_t = torch.tensor([b.coords() for b in gts], dtype=torch.float64)
    pr_t = torch.tensor([b.coords() for b in props], dtype=torch.float64).view(-1, 4)
    for region in ("intersection", "proposal", "gt"):
        ref = topdown_mask(gts, props, (8, 8), 8, region=region, dtype=torch.float64)
        assert torch.equal(topdown_mask_tensor(gt_t, pr_t, (8, 8), 8, region), ref)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(2, 40), st.integers(2, 40)),
                min_size=1, max_size=3),
       st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(2, 40), st.integers(2, 40)),
                min_size=1, max_size=6))
def test_mask_monotone_in_qualifying_pairs(gts, props):
    # a gt whose proposal set only grows by a copy of an already-qualifying proposal
    gts = [BoundingBox(x, y, x + w, y + h) for x, y, w, h in gts]
    props = [P(x, y, x + w, y + h) for x, y, w, h in props]
    pairs = qualifying_pairs(gts, props)
    before = topdown_mask(gts, props, (8, 8), 8)
    if not pairs:
        return
    _, j = pairs[0]
    after = topdown_mask(gts, props + [props[j]], (8, 8), 8)
    assert (after >= before).all()
