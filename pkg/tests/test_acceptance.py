"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``. The end-to-end training
criteria share one 500/100 scene, 50 epoch run (a few minutes on one CPU core).
"""
import time

import mpmath
import numpy as np
import pytest

import oracles
from fdcheck import numeric_grad, rel_error
from references import brute_match, exhaustive_nms, reference_ap
from mdod import diffcore as dc
from mdod.data import DataGenConfig, generate_dataset
from mdod.evaluation import average_precision, evaluate, match_detections
from mdod.geometry import Box, nms_indices
from mdod.inference import Detection, detect
from mdod.mixture import MixtureModel, cauchy_logpdf, gaussian_logpdf, round_to_precision, sample_components
from mdod.network import ABLATIONS, Detector, HeadConfig, MixtureTensors, apply_ablation, decode_pi
from mdod.training import (
    METRICS_HEADER,
    TrainConfig,
    loss_mm,
    loss_moc,
    read_metrics_csv,
    sample_rois,
    total_loss,
    train_loop,
)


@pytest.fixture()
def report(capsys):
    def emit(number, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'} ({elapsed:.2f}s) {detail}")
    return emit


# 1 ----------------------------------------------------------------------------

def test_criterion_1_distribution_analytics(report):
    start = time.perf_counter()
    errs = []
    for mu in (-3.0, 0.0, 12.5):
        for gamma in (0.1, 1.0, 7.0):
            peak = np.exp(cauchy_logpdf(mu, mu, gamma))
            errs.append(abs(peak - 1 / (np.pi * gamma)))
            for side in (-1, 1):
                errs.append(abs(np.exp(cauchy_logpdf(mu + side * gamma, mu, gamma)) - peak / 2))
        errs.append(abs(np.exp(gaussian_logpdf(mu, mu, 1.0)) - 1 / np.sqrt(2 * np.pi)))
    elapsed = time.perf_counter() - start
    ok = max(errs) < 1e-9 and elapsed < 1.0
    report(1, ok, f"max abs error {max(errs):.2e} (limit 1e-9)", elapsed)
    assert ok


# 2 ----------------------------------------------------------------------------

def test_criterion_2_half_precision_underflow(report):
    """Standard Gaussian and Cauchy densities rounded to IEEE binary16."""
    start = time.perf_counter()

    def half(logpdf, x):
        return float(round_to_precision(np.exp(logpdf(x, 0.0, 1.0)), "half"))

    far = np.linspace(7.21, 40.0, 2000)
    gauss_far_zero = all(half(gaussian_logpdf, x) == 0.0 for x in far)
    gauss_near = half(gaussian_logpdf, 7.19)
    cauchy_ok = half(cauchy_logpdf, 7.19) > 0 and half(cauchy_logpdf, 7.21) > 0
    elapsed = time.perf_counter() - start
    ok = gauss_far_zero and gauss_near > 0 and cauchy_ok and elapsed < 1.0
    report(2, ok, f"gaussian zero beyond 7.21: {gauss_far_zero}; gaussian at 7.19 = {gauss_near!r} "
                  f"(needs > 0); cauchy nonzero at both: {cauchy_ok}", elapsed)
    assert ok


# 3 ----------------------------------------------------------------------------

def _op_cases(rng):
    """(name, forward builder, input arrays) with inputs drawn fresh for each instance."""
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    any_ = lambda *s: rng.normal(size=s)
    return [
        ("add", lambda a, b: dc.add(a, b), [any_(3, 4), any_(4)]),
        ("neg", lambda a: dc.neg(a), [any_(5)]),
        ("mul", lambda a, b: dc.mul(a, b), [any_(3, 4), any_(3, 1)]),
        ("div", lambda a, b: dc.div(a, b), [any_(3, 4), pos(4)]),
        ("power", lambda a: dc.power(a, 2.5), [pos(6)]),
        ("matmul", lambda a, b: dc.matmul(a, b), [any_(3, 4), any_(4, 2)]),
        ("exp", lambda a: dc.exp(a), [any_(6)]),
        ("log", lambda a: dc.log(a), [pos(6)]),
        ("sigmoid", lambda a: dc.sigmoid(a), [any_(6) * 3]),
        ("swish", lambda a: dc.swish(a), [any_(6) * 3]),
        ("tanh", lambda a: dc.tanh_act(a), [any_(6)]),
        ("softplus", lambda a: dc.softplus_act(a), [any_(6) * 3]),
        ("clamp_min", lambda a: dc.clamp_min(a, 0.1), [any_(8)]),
        ("sum", lambda a: dc.tsum(a, axis=1), [any_(3, 4)]),
        ("mean", lambda a: dc.mean(a, axis=0, keepdims=True), [any_(3, 4)]),
        ("logsumexp", lambda a: dc.logsumexp(a, axis=1), [any_(3, 5) * 3]),
        ("log_softmax", lambda a: dc.log_softmax(a, axis=1), [any_(3, 5)]),
        ("softmax", lambda a: dc.softmax(a, axis=None), [any_(3, 5)]),
        ("reshape", lambda a: dc.reshape(a, (6, 2)), [any_(3, 4)]),
        ("getitem", lambda a: dc.getitem(a, (np.array([0, 2, 2]), slice(1, 3))), [any_(3, 4)]),
        ("concat", lambda a, b: dc.concat([a, b], axis=1), [any_(2, 3), any_(2, 2)]),
        ("upsample", lambda a: dc.upsample_nearest(a, 2), [any_(1, 2, 3, 2)]),
        ("conv2d", lambda x, k, b: dc.conv2d(x, k, b, stride=2), [any_(1, 5, 6, 2), any_(3, 3, 2, 3), any_(3)]),
    ]


def _fd_check(build, arrays, rng) -> float:
    tensors = [dc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = rng.normal(size=out.shape)
    dc.backward(dc.tsum(out * weights))
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(v, i=i):
            args = [dc.Tensor(a) for a in arrays]
            args[i] = dc.Tensor(v)
            return float(np.sum(build(*args).data * weights))
        worst = max(worst, rel_error(t.grad, numeric_grad(f, arrays[i])))
    return worst


def _random_mixture(rng, k, classes=3):
    cx, cy = rng.uniform(10, 54, (2, k))
    w, h = rng.uniform(4, 30, (2, k))
    mu = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    logits = rng.normal(size=(k, classes + 1))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    return MixtureModel(mu=mu, gamma=rng.uniform(0.5, 8, (k, 4)), p=p, pi=rng.dirichlet(np.ones(k)))


def _random_gts(rng, n, classes=3):
    out = []
    for _ in range(n):
        l, t = rng.uniform(0, 45, 2)
        w, h = rng.uniform(4, 20, 2)
        out.append(Box(l, t, l + w, t + h, class_id=int(rng.integers(classes))))
    return out


def _total_loss_fd(rng) -> float:
    """Composed loss over raw leaves; RoI term sees only the class leaf, as the stop-gradient prescribes."""
    k = int(rng.integers(2, 8))
    raw = [rng.normal(size=(k, 4)) * 5 + 30, rng.normal(size=(k, 4)), rng.normal(size=(k, 4)), rng.normal(size=k)]
    gts = _random_gts(rng, int(rng.integers(1, 4)))

    def mixture(mu, g, logit, pi_logit):
        return MixtureTensors(mu=mu, gamma=dc.softplus_act(g) + 0.5, log_p=dc.log_softmax(logit, axis=1),
                              log_pi=dc.log_softmax(pi_logit, axis=0))

    leaves = [dc.Tensor(a.copy(), requires_grad=True) for a in raw]
    mt = mixture(*leaves)
    rois = sample_rois(mt.to_model(), gts, 3 * len(gts), 0.5, rng)
    loss = total_loss(loss_moc(mt, gts), loss_mm(mt, rois), 2.0)
    dc.backward(loss)
    base = mixture(*[dc.Tensor(a) for a in raw])

    def objective(arrays):
        live = mixture(*[dc.Tensor(a) for a in arrays])
        frozen = MixtureTensors(mu=base.mu, gamma=base.gamma, log_p=live.log_p, log_pi=base.log_pi)
        return loss_moc(live, gts).item() + 2.0 * loss_mm(frozen, rois).item()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(v, i=i):
            arrays = list(raw)
            arrays[i] = v
            return objective(arrays)
        worst = max(worst, rel_error(leaf.grad, numeric_grad(f, raw[i])))
    return worst


def test_criterion_3_gradient_suite(report):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {}
    for instance in range(20):
        for name, build, arrays in _op_cases(rng):
            worst[name] = max(worst.get(name, 0.0), _fd_check(build, arrays, rng))
        worst["total_loss"] = max(worst.get("total_loss", 0.0), _total_loss_fd(rng))
    elapsed = time.perf_counter() - start
    name, value = max(worst.items(), key=lambda kv: kv[1])
    ok = value < 1e-4 and elapsed < 60
    report(3, ok, f"{len(worst)} operations x 20 instances, worst relative error {value:.2e} ({name})", elapsed)
    assert ok


# 4 ----------------------------------------------------------------------------

def test_criterion_4_stop_gradient(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    det = Detector(HeadConfig(), seed=4)
    mt = det(rng.uniform(size=(1, 64, 64, 3))).image(0)
    gts = _random_gts(rng, 4)
    rois = sample_rois(mt.to_model(), gts, 12, 0.5, rng)
    dc.backward(loss_mm(mt, rois))
    blocked = [n for n in det.params if n.startswith(("head.out_mu", "head.out_gamma", "head.out_pi"))]
    zero = all(det.params[n].grad is None or not np.any(det.params[n].grad) for n in blocked)
    cls_live = any(np.any(det.params[n].grad) for n in ("head.out_cls.w", "head.out_cls.b"))
    elapsed = time.perf_counter() - start
    ok = zero and cls_live and elapsed < 10
    report(4, ok, f"{len(blocked)} o1/o2/o4 parameters exactly zero: {zero}; class path nonzero: {cls_live}",
           elapsed)
    assert ok


# 5 ----------------------------------------------------------------------------

def test_criterion_5_pi_semantics(report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    det = Detector(HeadConfig(), seed=5)
    log_pi = det(rng.uniform(size=(2, 64, 64, 3))).image(0).log_pi.data
    total_err = abs(np.exp(log_pi).sum() - 1.0)
    k = len(log_pi)
    equal = np.exp(decode_pi([dc.Tensor(np.zeros((1, s, s, 1))) for s in (8, 4, 2)]).data[0])
    uniform_err = np.max(np.abs(equal - 1 / 84))
    elapsed = time.perf_counter() - start
    ok = total_err < 1e-12 and k == 84 and len(equal) == 84 and uniform_err < 1e-12 and elapsed < 1
    report(5, ok, f"K={k}, |sum pi - 1| = {total_err:.1e}, max |pi - 1/84| at equal logits = {uniform_err:.1e}",
           elapsed)
    assert ok


# 6 ----------------------------------------------------------------------------

def test_criterion_6_sampling(report):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    pi = rng.dirichlet(np.ones(84))
    draws = sample_components(pi, 100_000, rng)
    dev = np.max(np.abs(np.bincount(draws, minlength=84) / 1e5 - pi))
    elapsed = time.perf_counter() - start
    ok = dev <= 0.01 and elapsed < 5
    report(6, ok, f"max |freq - pi| = {dev:.4f} over 84 components", elapsed)
    assert ok


# 7 ----------------------------------------------------------------------------

def test_criterion_7_loss_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        m = _random_mixture(rng, int(rng.integers(1, 21)))
        gts = _random_gts(rng, int(rng.integers(1, 6)))
        ref = -mpmath.fsum(oracles.mixture_loglik(g.ltrb, m.mu, m.gamma, m.pi) for g in gts) / len(gts)
        worst = max(worst, float(abs((loss_moc(m, gts).item() - ref) / ref)))
        rois = sample_rois(m, gts, 3 * len(gts), 0.5, rng)
        ref = -mpmath.fsum(oracles.mixture_loglik(b, m.mu, m.gamma, m.pi, m.p[:, c])
                           for b, c in zip(rois.boxes, rois.class_ids)) / len(rois)
        worst = max(worst, float(abs((loss_mm(m, rois).item() - ref) / ref)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 30
    report(7, ok, f"200 loss values vs 50-digit summation, worst relative error {worst:.2e}", elapsed)
    assert ok


# 8 ----------------------------------------------------------------------------

def test_criterion_8_pipeline_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(8)

    def rand_box():
        l, t = rng.uniform(0, 20, 2)
        return (float(l), float(t), float(l + rng.uniform(3, 12)), float(t + rng.uniform(3, 12)))

    failures = {"nms": 0, "match": 0, "ap": 0}
    for _ in range(200):
        n = int(rng.integers(1, 9))
        boxes = [rand_box() for _ in range(n)]
        scores = np.round(rng.uniform(size=n), 1)       # coarse scores force ties
        classes = rng.integers(0, 2, n)
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        if list(nms_indices(np.array(boxes), scores, classes, thr)) != exhaustive_nms(boxes, scores, classes, thr):
            failures["nms"] += 1

        gts = [(rand_box(), int(rng.integers(2))) for _ in range(int(rng.integers(1, 6)))]
        dets = sorted([(rand_box(), int(rng.integers(2)), float(rng.uniform())) for _ in range(n)],
                      key=lambda d: -d[2])
        det_objs = [Detection(Box(*b, class_id=c, score=s), c, s) for b, c, s in dets]
        gt_objs = [Box(*b, class_id=c) for b, c in gts]
        if match_detections(det_objs, gt_objs, thr) != brute_match([d[0] for d in dets], [d[1] for d in dets],
                                                                   [g[0] for g in gts], [g[1] for g in gts], thr):
            failures["match"] += 1
        if abs(average_precision(det_objs, gt_objs, thr) - reference_ap([(dets, gts)], thr)) > 1e-12:
            failures["ap"] += 1
    elapsed = time.perf_counter() - start
    ok = not any(failures.values()) and elapsed < 60
    report(8, ok, f"mismatches over 200 instances each: {failures}", elapsed)
    assert ok


# 9, 10 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    start = time.perf_counter()
    gen = DataGenConfig(seed=1)
    train = generate_dataset(gen, 500, prefix="train")
    val = generate_dataset(gen, 100, prefix="val", offset=500)
    config = TrainConfig(epochs=50, seed=0)

    def ap50(detector):
        dets = detect(detector, np.stack([s.image for s in val]), config.pi_filter_threshold,
                      config.score_threshold, config.nms_threshold)
        return evaluate({s.image_id: d for s, d in zip(val, dets)},
                        {s.image_id: s.annotations for s in val})["AP50"]

    untrained = ap50(Detector(config.head, seed=config.seed))
    out = tmp_path_factory.mktemp("full_run")
    aborted = None
    try:
        detector, history = train_loop(train, config, out_dir=out)
        trained = ap50(detector)
    except Exception as exc:                  # recorded, then reported by both criteria
        aborted, history, trained = repr(exc), [], float("nan")
    return dict(history=history, untrained=untrained, trained=trained, aborted=aborted,
                elapsed=time.perf_counter() - start)


def test_criterion_9_end_to_end_training(full_run, report):
    h = full_run["history"]
    if not h:
        report(9, False, f"training aborted: {full_run['aborted']}", full_run["elapsed"])
        pytest.fail(full_run["aborted"])
    first, last = h[0], h[-1]
    a = last.foreground_ratio > first.foreground_ratio and last.foreground_ratio > 0.5
    gain = full_run["trained"] - full_run["untrained"]
    b = gain >= 0.3
    c = last.loss_moc < first.loss_moc
    ok = a and b and c and len(h) <= 50 and full_run["elapsed"] < 1800
    report(9, ok, f"(a) foreground {first.foreground_ratio:.3f} -> {last.foreground_ratio:.3f}; "
                  f"(b) val AP50 {full_run['untrained']:.3f} -> {full_run['trained']:.3f} (gain {gain:.3f}); "
                  f"(c) loss_moc {first.loss_moc:.3f} -> {last.loss_moc:.3f}; {len(h)} epochs",
           full_run["elapsed"])
    assert ok


def test_criterion_10_cauchy_vs_gaussian_underflow(full_run, report):
    h = full_run["history"]
    ordered = bool(h) and all(e.underflow_gaussian > e.underflow_cauchy for e in h)
    aborts = sum(e.nonfinite_steps for e in h) + (full_run["aborted"] is not None)
    margin = min((e.underflow_gaussian - e.underflow_cauchy for e in h), default=float("nan"))
    ok = ordered and aborts == 0
    report(10, ok, f"gaussian > cauchy at all {len(h)} epochs: {ordered} (smallest margin {margin:.3f}); "
                   f"non-finite aborts {aborts}", full_run["elapsed"])
    assert ok


# 11 ---------------------------------------------------------------------------

def test_criterion_11_ablation_harness(tmp_path, report):
    start = time.perf_counter()
    scenes = generate_dataset(DataGenConfig(seed=11), 50, prefix="smoke")
    headers, rows, errors = set(), {}, {}
    for name in ABLATIONS:
        config = TrainConfig(epochs=2, head=apply_ablation(HeadConfig(), name), checkpoint_every=0)
        try:
            train_loop(scenes, config, out_dir=tmp_path / name)
        except Exception as exc:
            errors[name] = repr(exc)
            continue
        headers.add((tmp_path / name / "metrics.csv").read_text().splitlines()[0])
        rows[name] = read_metrics_csv(tmp_path / name / "metrics.csv")
    finite = all(np.isfinite(v) for r in rows.values() for row in r for v in row.values())
    elapsed = time.perf_counter() - start
    ok = not errors and headers == {",".join(METRICS_HEADER)} and finite and all(len(r) == 2 for r in rows.values())
    summary = ", ".join(f"{n}: moc {r[-1]['loss_moc']:.2f}" for n, r in rows.items())
    report(11, ok, f"{len(rows)}/{len(ABLATIONS)} presets trained, shared header, finite; {summary}"
                   + (f"; errors {errors}" if errors else ""), elapsed)
    assert ok
