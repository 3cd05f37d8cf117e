import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtadapt.exceptions import ConfigurationError, TrainingAbortError
from mtadapt.losses import (
    LossWeights,
    det_loss,
    generalized_box_iou,
    hungarian_match,
    match_cost,
    seg_loss,
    total_loss,
)
from mtadapt.models import (
    DetHead,
    DetPrediction,
    PyramidFeatures,
    SegHead,
    SegPrediction,
    box_cxcywh_to_xyxy,
    box_xyxy_to_cxcywh,
    mask_logits_from_embeddings,
    region_average_pool,
)

import gradcases
from oracles import as_np, brute_force_assignment_cost, seg_loss_reference


def pyramid(batch=2, channels=16, size=64, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return PyramidFeatures(*(torch.randn(batch, channels, size // s, size // s, generator=g, dtype=dtype)
                             for s in (4, 8, 16, 32)))


def test_seg_head_shapes():
    head = SegHead(16, num_classes=8, num_queries=20, num_layers=1, num_heads=4)
    out = head(pyramid())
    assert out.class_logits.shape == (2, 20, 9)
    assert out.mask_logits.shape == (2, 20, 16, 16)
    assert out.pixel_embeddings.shape == (2, 16, 16, 16)
    assert out.mask_embeddings.shape == (2, 20, 16)


def test_mask_logits_are_inner_products():
    torch.manual_seed(0)
    m = torch.randn(1, 3, 4, dtype=torch.float64)
    px = torch.randn(1, 4, 2, 3, dtype=torch.float64)
    out = mask_logits_from_embeddings(m, px)
    for q, y, x in itertools.product(range(3), range(2), range(3)):
        ref = sum(m[0, q, c].item() * px[0, c, y, x].item() for c in range(4))
        assert abs(out[0, q, y, x].item() - ref) < 1e-14


def test_zero_mask_embeddings_give_zero_mask_logits():
    head = SegHead(16, 3, num_queries=4, num_layers=1)
    with torch.no_grad():
        head.mask_embed[2].weight.zero_()
        head.mask_embed[2].bias.zero_()
    out = head(pyramid())
    assert torch.count_nonzero(out.mask_logits) == 0


def test_det_head_shapes():
    head = DetHead(16, num_classes=6, num_proposals=50, num_stages=2, num_heads=4)
    out = head(pyramid())
    assert out.boxes.shape == (2, 50, 4)
    assert out.class_logits.shape == (2, 50, 7)
    assert len(out.stages) == 2


def test_zero_deltas_keep_proposal_boxes():
    head = DetHead(16, 3, num_proposals=5, num_stages=3)
    with torch.no_grad():
        for stage in head.stages:
            stage.delta.weight.zero_()
            stage.delta.bias.zero_()
    out = head(pyramid())
    for boxes, _ in out.stages:
        assert torch.equal(boxes, head.proposal_boxes.unsqueeze(0).expand(2, -1, -1))


def test_region_pool_of_constant_field_is_constant():
    field = torch.full((1, 3, 8, 8), 2.5, dtype=torch.float64)
    field[:, 1] = -1.0
    boxes = torch.tensor([[[0.5, 0.5, 0.3, 0.2], [0.1, 0.9, 0.5, 0.4], [0.33, 0.61, 0.01, 0.02]]],
                         dtype=torch.float64)
    out = region_average_pool(field, boxes)
    expected = torch.tensor([2.5, -1.0, 2.5], dtype=torch.float64).expand(1, 3, 3)
    assert torch.allclose(out, expected, atol=1e-12, rtol=0)


def test_region_pool_single_cell_box():
    field = torch.arange(16, dtype=torch.float64).view(1, 1, 4, 4)
    # the box covers exactly cell (row 2, col 1)
    box = box_xyxy_to_cxcywh(torch.tensor([[[0.25, 0.5, 0.5, 0.75]]], dtype=torch.float64))
    assert region_average_pool(field, box).item() == 9.0


def test_box_conversions_invert():
    b = torch.tensor([[0.2, 0.3, 0.1, 0.4]], dtype=torch.float64)
    assert torch.allclose(box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(b)), b, atol=1e-15)


@pytest.mark.parametrize("name", ["seg_head", "det_head"])
def test_head_gradients(name):
    probes = gradcases.run_case(name)
    assert len(probes) >= 20
    assert max(p[4] for p in probes) < 1e-3


# segmentation loss


def seg_pred(batch=1, q=3, k=4, hw=(4, 4), seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    cls = torch.randn(batch, q, k + 1, generator=g, dtype=dtype, requires_grad=True)
    masks = torch.randn(batch, q, *hw, generator=g, dtype=dtype, requires_grad=True)
    dummy = torch.zeros(batch, 1, *hw, dtype=dtype)
    return SegPrediction(dummy, torch.zeros(batch, q, 1, dtype=dtype), cls, masks)


def test_seg_loss_matches_pixel_loop():
    pred = seg_pred(batch=2)
    rng = np.random.default_rng(0)
    target = rng.integers(0, 4, size=(2, 4, 4))
    target[0, 0, :2] = 255
    got = seg_loss(pred, torch.as_tensor(target), reduction="none")
    for b in range(2):
        ref = seg_loss_reference(as_np(pred.class_logits[b]), as_np(pred.mask_logits[b]), target[b])
        assert abs(got[b].item() - ref) < 1e-12
    mean = seg_loss(pred, torch.as_tensor(target))
    assert abs(mean.item() - got.mean().item()) < 1e-15


def test_seg_loss_accepts_full_resolution_masks():
    pred = seg_pred(hw=(4, 4))
    full = np.kron(np.arange(16).reshape(4, 4) % 4, np.ones((4, 4), dtype=np.int64))
    a = seg_loss(pred, torch.as_tensor(full)[None])
    b = seg_loss(pred, torch.as_tensor(full[::4, ::4])[None])
    assert a.item() == b.item()
    with pytest.raises(ConfigurationError):
        seg_loss(pred, torch.zeros(1, 6, 6, dtype=torch.long))


def test_all_ignore_gives_zero_loss_and_gradient():
    pred = seg_pred()
    loss = seg_loss(pred, torch.full((1, 4, 4), 255))
    loss.backward()
    assert loss.item() == 0.0
    assert torch.count_nonzero(pred.class_logits.grad) == 0
    assert torch.count_nonzero(pred.mask_logits.grad) == 0


def test_ignored_pixels_get_exactly_zero_mask_gradient():
    pred = seg_pred()
    target = torch.randint(0, 4, (1, 4, 4), generator=torch.Generator().manual_seed(1))
    target[0, 1:3, 2] = 255
    seg_loss(pred, target).backward()
    grad = pred.mask_logits.grad[0]
    assert torch.count_nonzero(grad[:, 1:3, 2]) == 0
    assert torch.count_nonzero(grad[:, 0, 0]) > 0


def test_saturated_prediction_has_tiny_loss():
    k = 3
    cls = torch.full((1, k, k + 1), -30.0, dtype=torch.float64)
    for q in range(k):
        cls[0, q, q] = 30.0
    target = torch.tensor([[[0, 1], [2, 0]]])
    masks = torch.full((1, k, 2, 2), -30.0, dtype=torch.float64)
    for y, x in itertools.product(range(2), range(2)):
        masks[0, target[0, y, x], y, x] = 30.0
    pred = SegPrediction(torch.zeros(1, 1, 2, 2), torch.zeros(1, k, 1), cls, masks)
    loss = seg_loss(pred, target)
    assert 0.0 <= loss.item() < 1e-3


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_seg_loss_non_negative(seed):
    pred = seg_pred(seed=seed)
    target = torch.randint(0, 4, (1, 4, 4), generator=torch.Generator().manual_seed(seed))
    assert seg_loss(pred, target).item() >= 0.0


# detection loss


def det_pred(r, k, seed=0, dtype=torch.float64, zero_logits=False):
    g = torch.Generator().manual_seed(seed)
    logits = torch.zeros(1, r, k + 1, dtype=dtype) if zero_logits else torch.randn(1, r, k + 1, generator=g, dtype=dtype)
    cxcy = torch.rand(1, r, 2, generator=g, dtype=dtype) * 0.6 + 0.2
    wh = torch.rand(1, r, 2, generator=g, dtype=dtype) * 0.3 + 0.05
    return DetPrediction(torch.cat([cxcy, wh], -1), logits)


def test_no_ground_truth_gives_uniform_cross_entropy():
    k = 6
    pred = det_pred(5, k, zero_logits=True)
    loss = det_loss(pred, [np.zeros((0, 5), np.float32)], (64, 64))
    assert abs(loss.item() - math.log(k + 1)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(r=st.integers(1, 6), g=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_hungarian_matches_exhaustive_minimum(r, g, seed):
    rng = np.random.default_rng(seed)
    pred = det_pred(r, 4, seed=seed)
    xy = rng.uniform(0, 40, size=(g, 2))
    wh = rng.uniform(4, 20, size=(g, 2))
    gt = np.concatenate([xy, xy + wh, rng.integers(0, 4, size=(g, 1))], axis=1)
    from mtadapt.losses import normalize_gt_boxes

    gb, gl = normalize_gt_boxes(gt, (64, 64), dtype=torch.float64)
    cost = match_cost(pred.class_logits[0], pred.boxes[0], gl, gb).numpy()
    rows, cols = hungarian_match(cost)
    assert len(rows) == min(r, g)
    assert abs(cost[rows, cols].sum() - brute_force_assignment_cost(cost)) < 1e-9


def test_exact_boxes_leave_only_classification_term():
    gt = np.array([[8, 8, 24, 40, 1], [30, 10, 60, 20, 0]], dtype=np.float32)
    from mtadapt.losses import normalize_gt_boxes

    gb, _ = normalize_gt_boxes(gt, (64, 64), dtype=torch.float64)
    logits = torch.full((1, 2, 3), -20.0, dtype=torch.float64)
    logits[0, 0, 1] = 20.0
    logits[0, 1, 0] = 20.0
    pred = DetPrediction(gb[None].clone(), logits)
    loss = det_loss(pred, [gt], (64, 64))
    ce = torch.nn.functional.cross_entropy(logits[0], torch.tensor([1, 0]))
    assert abs(loss.item() - ce.item()) < 1e-12


def test_giou_of_identical_boxes_is_one():
    b = torch.tensor([[0.1, 0.2, 0.5, 0.6]], dtype=torch.float64)
    assert generalized_box_iou(b, b).item() == 1.0
    far = torch.tensor([[0.7, 0.7, 0.8, 0.8]], dtype=torch.float64)
    assert generalized_box_iou(b, far).item() < 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 3))
def test_det_loss_non_negative(seed, n):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 40, size=(n, 2))
    gt = np.concatenate([xy, xy + rng.uniform(2, 20, size=(n, 2)), rng.integers(0, 3, size=(n, 1))], 1)
    assert det_loss(det_pred(4, 3, seed=seed), [gt], (64, 64)).item() >= 0


def test_det_loss_averages_cascade_stages():
    a, b = det_pred(3, 2, seed=1), det_pred(3, 2, seed=2)
    gt = [np.array([[5, 5, 30, 30, 1]], np.float32)]
    both = DetPrediction(b.boxes, b.class_logits, ((a.boxes, a.class_logits), (b.boxes, b.class_logits)))
    la, lb = det_loss(a, gt, (64, 64)), det_loss(b, gt, (64, 64))
    assert abs(det_loss(both, gt, (64, 64)).item() - (la.item() + lb.item()) / 2) < 1e-12
    assert det_loss(both, gt, (64, 64), deep_supervision=False).item() == lb.item()


# multi-task total


def test_total_loss_default_weights():
    one = torch.tensor(1.0, dtype=torch.float64)
    assert abs(total_loss(one, one, one).item() - 2.4) < 1e-15
    assert total_loss(one, one, one, LossWeights(0, 0, 0)).item() == 0.0


def test_total_loss_rejects_non_finite():
    one = torch.tensor(1.0)
    with pytest.raises(TrainingAbortError):
        total_loss(one, torch.tensor(float("nan")), one)


@pytest.mark.parametrize("bad", [-1.0, float("inf")])
def test_loss_weights_validation(bad):
    with pytest.raises(ConfigurationError):
        LossWeights(alpha_sem=bad)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0, 10), b=st.floats(0, 10), c=st.floats(0, 10),
       x=st.floats(0, 10), y=st.floats(0, 10), z=st.floats(0, 10))
def test_total_loss_is_weighted_sum(a, b, c, x, y, z):
    t = lambda v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    got = total_loss(t(x), t(y), t(z), LossWeights(a, b, c)).item()
    assert got == pytest.approx(a * x + b * y + c * z, rel=1e-12, abs=1e-12)


def test_unmatched_proposals_are_down_weighted():
    gt = np.array([[8, 8, 24, 40, 1]], dtype=np.float32)
    from mtadapt.losses import NO_OBJECT_WEIGHT, normalize_gt_boxes

    gb, _ = normalize_gt_boxes(gt, (64, 64), dtype=torch.float64)
    far = torch.tensor([[0.9, 0.9, 0.05, 0.05]], dtype=torch.float64)
    logits = torch.tensor([[[0.3, 2.0, -1.0], [0.5, 0.1, 0.7]]], dtype=torch.float64)
    pred = DetPrediction(torch.cat([gb, far])[None], logits)
    logp = torch.log_softmax(logits[0], -1)
    ref = (-logp[0, 1] - NO_OBJECT_WEIGHT * logp[1, 2]) / (1 + NO_OBJECT_WEIGHT)
    assert abs(det_loss(pred, [gt], (64, 64)).item() - ref.item()) < 1e-12
