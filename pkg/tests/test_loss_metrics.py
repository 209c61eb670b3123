import json
import warnings

import jsonschema
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from thermostereo.metrics import (COLORMAP_DOC, METRIC_SCHEMA, MetricReport, colormap, compute_metrics,
                                  render_error_map, sequence_loss, valid_mask)


def test_two_prediction_example():
    gt = torch.rand(1, 1, 4, 4) * 10 + 2
    valid = torch.ones_like(gt, dtype=torch.bool)
    rep = sequence_loss([gt - 1, gt.clone()], gt, valid, 0.9)
    assert abs(float(rep.total) - 0.9) < 1e-6
    assert rep.weights == pytest.approx([0.9, 1.0])
    assert rep.valid_pixel_count == 16


def test_perfect_predictions_zero_loss():
    gt = torch.rand(2, 1, 5, 5) + 1
    rep = sequence_loss([gt, gt], gt, torch.ones_like(gt, dtype=torch.bool))
    assert float(rep.total) == 0.0


def test_masked_l1_matches_double_loop(rng):
    gt = rng.random((8, 8)) * 20
    preds = [rng.random((8, 8)) * 20 for _ in range(3)]
    valid = rng.random((8, 8)) < 0.5
    t = lambda a: torch.from_numpy(a)[None, None]
    rep = sequence_loss([t(p) for p in preds], t(gt), t(valid), 0.9)
    total = 0.0
    for i, p in enumerate(preds):
        s, n = 0.0, 0
        for y in range(8):
            for x in range(8):
                if valid[y, x]:
                    s += abs(gt[y, x] - p[y, x])
                    n += 1
        assert abs(rep.per_prediction[i] - s / n) < 1e-6
        total += 0.9 ** (len(preds) - 1 - i) * s / n
    assert abs(float(rep.total) - total) < 1e-6


def test_no_valid_pixels_warns_and_returns_zero():
    gt = torch.zeros(1, 1, 4, 4)
    pred = torch.rand(1, 1, 4, 4, requires_grad=True)
    with pytest.warns(RuntimeWarning):
        rep = sequence_loss([pred], gt, torch.zeros_like(gt, dtype=torch.bool))
    assert float(rep.total.detach()) == 0.0
    rep.total.backward()


def test_loss_gradient_sign_pattern():
    gt = torch.tensor([[[[1.0, 2.0, 3.0, 4.0]]]], dtype=torch.float64)
    valid = torch.tensor([[[[True, True, False, True]]]])
    p1 = (gt + torch.tensor([0.5, -0.5, 0.3, 0.2], dtype=torch.float64)).requires_grad_()
    p2 = (gt + torch.tensor([-0.1, 0.1, -0.2, -0.3], dtype=torch.float64)).requires_grad_()
    sequence_loss([p1, p2], gt, valid, 0.9).total.backward()
    expected1 = torch.tensor([0.9, -0.9, 0.0, 0.9], dtype=torch.float64) / 3
    expected2 = torch.tensor([-1.0, 1.0, 0.0, -1.0], dtype=torch.float64) / 3
    assert torch.allclose(p1.grad.view(-1), expected1)
    assert torch.allclose(p2.grad.view(-1), expected2)
    # finite differences on the same points
    for pred, grad, which in ((p1, expected1, 0), (p2, expected2, 1)):
        for i in range(4):
            def f(eps):
                q = pred.detach().clone()
                q.view(-1)[i] += eps
                preds = [q, p2.detach()] if which == 0 else [p1.detach(), q]
                return float(sequence_loss(preds, gt, valid, 0.9).total)
            numeric = (f(1e-6) - f(-1e-6)) / 2e-6
            assert abs(numeric - float(grad[i])) <= 1e-3 * max(abs(float(grad[i])), 1e-8) + 1e-9


def test_valid_mask_range():
    gt = torch.tensor([-1.0, 0.0, 0.5, 191.9, 192.0, 300.0, float("nan")])
    assert valid_mask(gt, 192).tolist() == [False, False, True, True, False, False, False]


def test_constant_offset_metrics():
    gt = np.random.default_rng(0).random((6, 7)) * 30 + 1
    rep = compute_metrics(gt + 0.6, gt, np.ones_like(gt, bool))
    assert rep.epe == pytest.approx(0.6)
    assert rep.outlier_rates == {"0.5": pytest.approx(100.0), "1": 0.0}
    exact = compute_metrics(gt, gt, np.ones_like(gt, bool))
    assert exact.epe == 0 and all(v == 0 for v in exact.outlier_rates.values())


def test_predictions_clamped_before_metrics():
    gt = np.full((2, 2), 1.0)
    rep = compute_metrics(np.full((2, 2), -5.0), gt, np.ones((2, 2), bool), d_max=192)
    assert rep.epe == pytest.approx(1.0)
    rep = compute_metrics(np.full((2, 2), 500.0), np.full((2, 2), 190.0), np.ones((2, 2), bool), d_max=192)
    assert rep.epe == pytest.approx(2.0)


arrays = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s))


@settings(max_examples=30, deadline=None)
@given(arrays, st.lists(st.floats(0.01, 10), min_size=2, max_size=5, unique=True))
def test_outlier_rates_monotone(g, thresholds):
    gt = g.random((6, 6)) * 20
    pred = gt + g.normal(0, 3, (6, 6))
    valid = g.random((6, 6)) < 0.7
    valid[0, 0] = True
    rates = compute_metrics(pred, gt, valid, sorted(thresholds)).outlier_rates
    vals = [rates[f"{t:g}"] for t in sorted(thresholds)]
    assert all(0 <= v <= 100 for v in vals)
    assert all(a >= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=30, deadline=None)
@given(arrays)
def test_metrics_ignore_invalid_pixels(g):
    gt = g.random((5, 7)) * 20
    pred = gt + g.normal(0, 1, gt.shape)
    valid = g.random(gt.shape) < 0.5
    valid[2, 3] = True
    other = pred.copy()
    other[~valid] = g.normal(0, 100, (~valid).sum())
    a, b = compute_metrics(pred, gt, valid), compute_metrics(other, gt, valid)
    assert a.epe == b.epe and a.outlier_counts == b.outlier_counts


def test_no_valid_pixels_metric_warns():
    with pytest.warns(RuntimeWarning):
        rep = compute_metrics(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool))
    assert rep.sample_count == 0


@settings(max_examples=20, deadline=None)
@given(st.lists(arrays, min_size=1, max_size=4))
def test_merge_is_pixel_weighted(gens):
    reports, errs = [], []
    for g in gens:
        n = int(g.integers(2, 30))
        gt = g.random(n) * 10
        pred = gt + g.normal(0, 1, n)
        reports.append(compute_metrics(pred, gt, np.ones(n, bool)))
        errs.append(np.abs(np.clip(pred, 0, None) - gt))
    merged = reports[0]
    for r in reports[1:]:
        merged = merged.merge(r)
    assert abs(merged.epe - np.concatenate(errs).mean()) < 1e-9
    assert merged.sample_count == len(reports)


def test_report_json_round_trip_and_schema():
    rep = compute_metrics(np.array([1.0, 2.0, 3.7]), np.array([1.0, 1.0, 1.0]), np.ones(3, bool),
                          condition_tag="night")
    doc = json.loads(json.dumps(rep.to_json()))
    jsonschema.validate(doc, METRIC_SCHEMA)
    assert set(doc["outliers"]) == {"0.5", "1"}
    back = MetricReport.from_json(doc)
    assert back.n_pixels == rep.n_pixels and back.outlier_counts == rep.outlier_counts
    assert back.epe == pytest.approx(rep.epe)


def test_error_map_identity_and_single_pixel(tmp_path):
    gt = np.full((6, 8), 5.0)
    valid = np.ones_like(gt, bool)
    valid[0, :3] = False
    rgb = render_error_map(gt, gt, valid, tmp_path / "a.png")
    lowest = colormap(np.zeros(1))[0]
    assert np.all(rgb[valid] == lowest) and np.all(rgb[~valid] == 0)
    pred = gt.copy()
    pred[3, 4] += 5
    rgb = render_error_map(pred, gt, valid, tmp_path / "b.png")
    assert int((rgb[valid] != lowest).any(-1).sum()) == 1
    with Image.open(tmp_path / "b.png") as im:
        assert im.text["colormap"] == COLORMAP_DOC
        assert np.array_equal(np.array(im), rgb)


def test_error_map_matches_colormap_oracle(rng, tmp_path):
    gt = rng.random((10, 12)) * 20
    pred = gt + rng.normal(0, 2, gt.shape)
    valid = rng.random(gt.shape) < 0.8
    rgb = render_error_map(pred, gt, valid, tmp_path / "m.png", err_max=3.0)
    stops = [(0.0, (0, 0, 255)), (1 / 3, (0, 255, 255)), (2 / 3, (255, 255, 0)), (1.0, (255, 0, 0))]
    for y in range(10):
        for x in range(12):
            if not valid[y, x]:
                assert tuple(rgb[y, x]) == (0, 0, 0)
                continue
            v = min(max(abs(max(pred[y, x], 0) - gt[y, x]) / 3.0, 0.0), 1.0)
            for (t0, c0), (t1, c1) in zip(stops, stops[1:]):
                if t0 <= v <= t1:
                    f = (v - t0) / (t1 - t0)
                    expect = [round(a + f * (b - a)) for a, b in zip(c0, c1)]
                    break
            assert np.abs(rgb[y, x].astype(int) - expect).max() <= 1
