"""Acceptance suite: one test per shipped guarantee, one PASS/FAIL line each.

The fast half (gradient oracle, closed-form grids, routing exactness, AP
oracle, replay) runs in seconds.  The slow half trains real models: the
gradient-ratio check runs the shipped default experiment twice, and the
probe-ordering and ablation checks share one three-seed matrix of the
default experiment (5 variants each), so expect the full suite to take
around two CPU-hours.

Each numbered test prints "[PASS] criterion NN: ..." (or FAIL) with the
measured quantities, and asserts its own CPU budget where one is stated.
"""

import json
import statistics
import time

import numpy as np
import pytest

from fdlab import autodiff as ad
from fdlab import config as cfgmod
from fdlab import detector as det
from fdlab import evaluate as ev
from fdlab import synthgen
from fdlab import theory
from fdlab import train as trn
from fdlab.router import RoutePlan


def _report(num, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {num:02d}: {detail}"
    print(line, flush=True)
    assert passed, line


class _Budget:
    """CPU-seconds stopwatch for the per-criterion runtime ceilings."""

    def __init__(self):
        self.t0 = time.process_time()

    @property
    def spent(self):
        return time.process_time() - self.t0


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients vs central finite differences
# ---------------------------------------------------------------------------

FD_H = 1e-5
FD_TOL = 1e-6


def _numeric_grad(f, arrays, index, h=FD_H):
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    target = base[index].reshape(-1)
    for i in range(target.size):
        orig = target[i]
        target[i] = orig + h
        hi = f(base)
        target[i] = orig - h
        lo = f(base)
        target[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def _rel_error(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / (np.linalg.norm(b) + 1e-12)


class _Scalarizer:
    """Random projection to a scalar.  The weight is drawn on first use and
    then frozen, so the analytic pass and every finite-difference evaluation
    differentiate the same function."""

    def __init__(self, rng):
        self.rng = rng
        self.w = None

    def __call__(self, out):
        if self.w is None:
            self.w = self.rng.uniform(0.5, 1.5, size=out.data.shape)
        return ad.reduce_sum(ad.mul(out, ad.Tensor(self.w)))


def _op_catalog():
    """(name, make) pairs; make(rng) returns (input arrays, scalar builder,
    differentiable input count)."""

    def t(rng, *shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    def unary(op):
        def make(rng):
            a = t(rng, 3, 4)
            sc = _Scalarizer(rng)
            return [a], lambda ts: sc(op(ts[0])), 1
        return make

    def binary(op):
        def make(rng):
            a, b = t(rng, 3, 4), t(rng, 3, 4)
            sc = _Scalarizer(rng)
            return [a, b], lambda ts: sc(op(ts[0], ts[1])), 2
        return make

    def make_matmul(rng):
        a, b = t(rng, 3, 4, lo=-1.5, hi=1.5), t(rng, 4, 2, lo=-1.5, hi=1.5)
        sc = _Scalarizer(rng)
        return [a, b], lambda ts: sc(ad.matmul(ts[0], ts[1])), 2

    def make_absolute(rng):
        # keep inputs away from the kink at 0 where the derivative jumps
        a = t(rng, 3, 4, lo=0.2, hi=2.0) * rng.choice([-1.0, 1.0], size=(3, 4))
        sc = _Scalarizer(rng)
        return [a], lambda ts: sc(ad.absolute(ts[0])), 1

    def make_reshape(rng):
        a = t(rng, 2, 6)
        sc = _Scalarizer(rng)
        return [a], lambda ts: sc(ad.reshape(ts[0], (3, 4))), 1

    def make_concat(rng):
        a, b = t(rng, 2, 3), t(rng, 2, 2)
        sc = _Scalarizer(rng)
        return [a, b], lambda ts: sc(ad.concat([ts[0], ts[1]], axis=1)), 2

    def make_slice(rng):
        a = t(rng, 4, 6)
        sc = _Scalarizer(rng)
        return [a], lambda ts: sc(ad.slice_(ts[0], (slice(1, 3), slice(None, None, 2)))), 1

    def make_reduce_sum(rng):
        a = t(rng, 3, 5)
        sc = _Scalarizer(rng)
        return [a], lambda ts: sc(ad.reduce_sum(ts[0], axis=1)), 1

    def make_reduce_mean(rng):
        a = t(rng, 3, 5)
        return [a], lambda ts: ad.reduce_mean(ts[0]), 1

    def make_conv2d(rng):
        stride = 1 + int(rng.integers(0, 2))
        x = t(rng, 1, 2, 5, 5, lo=-1.0, hi=1.0)
        w = t(rng, 2, 2, 3, 3, lo=-1.0, hi=1.0)
        b = t(rng, 2, lo=-0.5, hi=0.5)
        sc = _Scalarizer(rng)

        def build(ts):
            return sc(ad.conv2d(ts[0], ts[1], bias=ts[2],
                                stride=stride, padding=1))
        return [x, w, b], build, 3

    def make_bce(rng):
        logits = t(rng, 3, 4, lo=-3.0, hi=3.0)
        labels = (rng.uniform(size=(3, 4)) < 0.3).astype(float)
        return [logits, labels], lambda ts: ad.bce_with_logits(ts[0], ad.Tensor(labels)), 1

    def make_route_view(rng):
        # a passing route view is an exact identity, so finite differences apply
        a = t(rng, 3, 4)
        sc = _Scalarizer(rng)
        return [a], lambda ts: sc(ad.route_view(ts[0], 1)), 1

    return [
        ("add", binary(ad.add)),
        ("sub", binary(ad.sub)),
        ("mul", binary(ad.mul)),
        ("matmul", make_matmul),
        ("silu", unary(ad.silu)),
        ("sigmoid", unary(ad.sigmoid)),
        ("softplus", unary(ad.softplus)),
        ("absolute", make_absolute),
        ("reshape", make_reshape),
        ("concat", make_concat),
        ("slice", make_slice),
        ("reduce_sum", make_reduce_sum),
        ("reduce_mean", make_reduce_mean),
        ("conv2d", make_conv2d),
        ("bce_with_logits", make_bce),
        ("route_view", make_route_view),
    ]


def test_criterion_01_gradients_match_finite_differences():
    budget = _Budget()
    worst = 0.0
    worst_op = ""
    for op_index, (name, make) in enumerate(_op_catalog()):
        for trial in range(100):
            rng = np.random.default_rng(1000 * op_index + trial)
            arrays, build, n_inputs = make(rng)

            def scalar(arrs):
                return build([ad.Tensor(a) for a in arrs]).item()

            tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
            ad.backward(build(tensors))
            for idx in range(n_inputs):
                analytic = tensors[idx].grad
                assert analytic is not None, f"{name}: no gradient for input {idx}"
                err = _rel_error(analytic, _numeric_grad(scalar, arrays, idx))
                if err > worst:
                    worst, worst_op = err, name
    ok = worst <= FD_TOL and budget.spent < 60
    _report(1, ok, f"16 ops x 100 graphs, worst relative error {worst:.3e} "
                   f"({worst_op}), tolerance {FD_TOL:.0e}, {budget.spent:.1f}s")


# ---------------------------------------------------------------------------
# criteria 2-4: closed-form gradient-factor grids
# ---------------------------------------------------------------------------

GRID = dict(logit_lo=0.0, logit_hi=5.0, step=0.1, biases=(-1.0, 0.0, 1.0))


@pytest.fixture(scope="session")
def suppression_grid():
    return theory.sweep_suppression_grid(**GRID)


def test_criterion_02_suppression_grid_and_crosscheck(suppression_grid):
    budget = _Budget()
    bad = len(suppression_grid.counterexamples)
    delta = theory.crosscheck_grid(GRID["logit_lo"], GRID["logit_hi"],
                                   GRID["step"], GRID["biases"])
    ok = bad == 0 and delta <= 1e-8 and budget.spent < 60
    _report(2, ok, f"{len(suppression_grid.rows)} grid points, {bad} counterexamples, "
                   f"autodiff crosscheck max deviation {delta:.3e} (<= 1e-08), "
                   f"{budget.spent:.1f}s")


def test_criterion_03_weak_gap_ordering_grid():
    budget = _Budget()
    res = theory.sweep_gap_ordering_grid(**GRID)
    ok = res.passed and len(res.rows) > 0 and budget.spent < 60
    _report(3, ok, f"{len(res.rows)} weak<strong pairs, "
                   f"{len(res.counterexamples)} counterexamples, {budget.spent:.1f}s")


def test_criterion_04_negative_sample_factor_ordering(suppression_grid):
    # equality is only possible on the degenerate m2 = 0 boundary, where the
    # multimodal factor collapses to the unimodal one
    budget = _Budget()
    rows = suppression_grid.rows
    nonneg = [r for r in rows if r.negative_margin < 0]
    lax = [r for r in rows
           if r.m2_logit > 0 and not r.multimodal_negative > r.unimodal_negative]
    ok = not nonneg and not lax and budget.spent < 60
    _report(4, ok, f"{len(rows)} grid points, {len(nonneg) + len(lax)} counterexamples "
                   f"(strict for m2 > 0), {budget.spent:.1f}s")


# ---------------------------------------------------------------------------
# criteria 5-6: gradient routing exactness and forward transparency
# ---------------------------------------------------------------------------


def _sample_batch(seed, count=4, size=64):
    spec = synthgen.SceneSpec(size, (1, 2), 3, seed)
    clean = synthgen.ModalityProfile.from_quality(1.0)
    samples = [synthgen.generate_sample(spec, clean, clean, i) for i in range(count)]
    cfg = det.DetectorConfig()
    x1 = ad.Tensor(trn._stack_images(samples, "m1"))
    x2 = ad.Tensor(trn._stack_images(samples, "m2"))
    targets = det.batch_targets(
        [det.assign_targets(s.boxes, s.classes, size, cfg) for s in samples])
    return cfg, x1, x2, targets


def test_criterion_05_decoupled_routing_is_exact():
    budget = _Budget()
    cfg, x1, x2, targets = _sample_batch(seed=55)
    weights = det.LossWeights()
    dual = det.DualBranchDetector(cfg, 77, RoutePlan.from_preset("rsc-md"))

    fus, _, _ = dual.forward(x1, x2)
    ad.backward(det.detection_loss(fus, targets, weights))
    leaked = sum(
        1 for p in dual.backbone1.parameters() + dual.backbone2.parameters()
        if p.grad is not None and np.any(np.asarray(p.grad)))

    max_dev = 0.0
    for branch, backbone, head, x in (
            ("m1", dual.backbone1, dual.aux_head1, x1),
            ("m2", dual.backbone2, dual.aux_head2, x2)):
        for p in dual.parameters():
            p.zero_grad()
        _, a1, a2 = dual.forward(x1, x2)
        ad.backward(det.detection_loss(a1 if branch == "m1" else a2,
                                       targets, weights))

        solo = det.UnimodalDetector(cfg, 9)
        matched = backbone.parameters() + head.parameters()
        assert len(matched) == len(solo.parameters())
        for src, dst in zip(matched, solo.parameters()):
            assert src.data.shape == dst.data.shape
            dst.data = src.data.copy()
        ad.backward(det.detection_loss(solo.forward(x), targets, weights))

        for src, dst in zip(backbone.parameters(), solo.backbone.parameters()):
            a = np.zeros_like(src.data) if src.grad is None else np.asarray(src.grad)
            b = np.zeros_like(dst.data) if dst.grad is None else np.asarray(dst.grad)
            max_dev = max(max_dev, float(np.max(np.abs(a - b))))

    ok = leaked == 0 and max_dev <= 1e-12 and budget.spent < 60
    _report(5, ok, f"fusion-loss gradient reached {leaked} backbone parameters "
                   f"(want 0), max deviation vs standalone branch {max_dev:.2e} "
                   f"(<= 1e-12), {budget.spent:.1f}s")


def test_criterion_06_routing_never_changes_the_forward_pass():
    budget = _Budget()
    cfg, x1, x2, targets = _sample_batch(seed=66)
    weights = det.LossWeights()
    models = {preset: det.DualBranchDetector(cfg, 11, RoutePlan.from_preset(preset))
              for preset in ("baseline", "rsc", "rsc-md")}

    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(1, 4))
        b1 = ad.Tensor(rng.uniform(0, 1, size=(n, 1, 64, 64)))
        b2 = ad.Tensor(rng.uniform(0, 1, size=(n, 1, 64, 64)))
        seen = []
        for model in models.values():
            with ad.no_grad():
                fus, a1, a2 = model.forward(b1, b2)
            arrays = [lv.data for out in (fus, a1, a2)
                      for lv in out.class_logits + out.box_offsets]
            seen.append(arrays)
        ref = seen[0]
        for other in seen[1:]:
            if not all(np.array_equal(a, b) for a, b in zip(ref, other)):
                mismatches += 1

    # loss values, bit for bit, on a labeled batch
    losses = []
    for model in models.values():
        with ad.no_grad():
            fus, a1, a2 = model.forward(x1, x2)
            losses.append(det.total_loss(
                det.detection_loss(fus, targets, weights),
                det.detection_loss(a1, targets, weights),
                det.detection_loss(a2, targets, weights), weights).item())
    loss_ok = losses[0] == losses[1] == losses[2]

    ok = mismatches == 0 and loss_ok and budget.spent < 120
    _report(6, ok, f"50 random batches x 3 route plans: {mismatches} activation "
                   f"mismatches, losses {'identical' if loss_ok else 'differ'}, "
                   f"{budget.spent:.1f}s")


# ---------------------------------------------------------------------------
# criteria 7-9: trained-model behavior
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def default_ratio_runs():
    """Baseline and decoupled runs of the shipped default experiment,
    sharing the dataset and every seed."""
    t0 = time.process_time()
    base_cfg = cfgmod.parse_config({})
    p1, p2 = base_cfg.profiles()
    spec = base_cfg.scene_spec("train")
    train = [synthgen.generate_sample(spec, p1, p2, i)
             for i in range(base_cfg.split_count("train"))]
    runs = {}
    for preset in ("baseline", "rsc-md"):
        cfg = cfgmod.parse_config({"route_preset": preset})
        model = det.DualBranchDetector(cfg.detector_config(), cfg.seed,
                                       cfg.route_plan())
        runs[preset] = trn.train_model(model, train, cfg.optimizer_config())
    return {"runs": runs, "cpu": time.process_time() - t0}


def test_criterion_07_auxiliary_routing_amplifies_backbone_gradients(default_ratio_runs):
    base1, base2 = default_ratio_runs["runs"]["baseline"].trace.mean_norms()
    md1, md2 = default_ratio_runs["runs"]["rsc-md"].trace.mean_norms()
    ratio1, ratio2 = md1 / base1, md2 / base2
    cpu = default_ratio_runs["cpu"]
    ok = ratio1 > 1.5 and ratio2 > 1.5 and base2 <= base1 and cpu < 15 * 60
    _report(7, ok, f"probe-stage norm ratios rsc-md/baseline: branch1 {ratio1:.2f}, "
                   f"branch2 {ratio2:.2f} (want > 1.5); baseline weak {base2:.5f} "
                   f"<= strong {base1:.5f}: {base2 <= base1}; {cpu:.0f}s CPU")


# the ordering checks run the default experiment config (dataset, schedule,
# losses) for 5 variants x 3 seeds.  The matrix is shared between the fused
# ablation check and the probe check; CPU is split accordingly: dual-branch
# training plus fused evaluation on one meter, unimodal training plus all
# probes on the other, so each check's budget covers the work unique to it.
MATRIX_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def ordering_matrix():
    evals = {}   # (variant, seed) -> fused AP50-95
    probes = {}  # (variant, branch, seed) -> probe AP50-95
    cpu = {"fused": 0.0, "probe": 0.0}
    for seed in MATRIX_SEEDS:
        cfg = cfgmod.parse_config({"seed": seed})
        p1, p2 = cfg.profiles()
        train = [synthgen.generate_sample(cfg.scene_spec("train"), p1, p2, i)
                 for i in range(cfg.split_count("train"))]
        test = [synthgen.generate_sample(cfg.scene_spec("test"), p1, p2, i)
                for i in range(cfg.split_count("test"))]
        opt = cfg.optimizer_config()
        dcfg = cfg.detector_config()
        weights = cfg.loss_weights()

        duals = {}
        for preset in ("baseline", "rsc", "rsc-md"):
            t0 = time.process_time()
            model = det.DualBranchDetector(dcfg, seed, RoutePlan.from_preset(preset))
            trn.train_model(model, train, opt, weights=weights)
            evals[preset, seed] = ev.evaluate_model(model, test).mean_ap50_95
            cpu["fused"] += time.process_time() - t0
            duals[preset] = model

        t0 = time.process_time()
        for preset, model in duals.items():
            for branch in ("m1", "m2"):
                probes[preset, branch, seed] = trn.linear_probe(
                    model, branch, train, test, opt, weights, head_seed=seed).ap50_95

        for branch in ("m1", "m2"):
            model = det.UnimodalDetector(dcfg, seed)
            trn.train_model(model, train, opt, weights=weights, modality=branch)
            evals["unimodal-" + branch, seed] = ev.evaluate_model(
                model, test, modality=branch).mean_ap50_95
            probes["unimodal", branch, seed] = trn.linear_probe(
                model, branch, train, test, opt, weights, head_seed=seed).ap50_95
        cpu["probe"] += time.process_time() - t0
    return {"evals": evals, "probes": probes, "cpu": cpu}


def test_criterion_08_probe_ordering_and_weak_branch_degradation(ordering_matrix):
    probes = ordering_matrix["probes"]
    tol = 0.01  # one AP point of seed noise

    def mean(variant, branch):
        return float(np.mean([probes[variant, branch, s] for s in MATRIX_SEEDS]))

    chains = {}
    ordered = True
    for branch in ("m1", "m2"):
        chain = [mean(v, branch)
                 for v in ("unimodal", "rsc-md", "rsc", "baseline")]
        chains[branch] = chain
        ordered &= all(a >= b - tol for a, b in zip(chain, chain[1:]))

    drop_strong = mean("unimodal", "m1") - mean("baseline", "m1")
    drop_weak = mean("unimodal", "m2") - mean("baseline", "m2")
    asym = drop_weak > drop_strong
    cpu = ordering_matrix["cpu"]["probe"]

    fmt = {b: " >= ".join(f"{v:.3f}" for v in chains[b]) for b in chains}
    ok = ordered and asym and cpu < 30 * 60
    _report(8, ok, f"probe AP50-95 unimodal >= rsc-md >= rsc >= baseline: "
                   f"m1 [{fmt['m1']}], m2 [{fmt['m2']}] (tol {tol}); baseline "
                   f"degradation weak {drop_weak:.3f} > strong {drop_strong:.3f}: "
                   f"{asym}; {cpu:.0f}s CPU probe side")


def test_criterion_09_ablation_ap_ordering(ordering_matrix):
    evals = ordering_matrix["evals"]

    def med(variant):
        return statistics.median(evals[variant, s] for s in MATRIX_SEEDS)

    base, rsc, md = med("baseline"), med("rsc"), med("rsc-md")
    cpu = ordering_matrix["cpu"]["fused"]
    ok = base < rsc < md and md - base >= 0.02 and cpu < 30 * 60
    _report(9, ok, f"median fused AP50-95 baseline {base:.3f} < rsc {rsc:.3f} "
                   f"< rsc-md {md:.3f}, rsc-md gain {md - base:.3f} "
                   f"(want >= 0.02); {cpu:.0f}s CPU fused side")


# ---------------------------------------------------------------------------
# criterion 10: AP against a brute-force matcher
# ---------------------------------------------------------------------------


def _oracle_ap(dets, gts, threshold):
    """Re-match the score-sorted list from scratch at every prefix length;
    all-point interpolation over the resulting raw P/R points."""
    if not gts:
        return None
    order = sorted((-score, idx, box) for idx, (score, box) in enumerate(dets))
    points = []
    for k in range(1, len(order) + 1):
        matched = set()
        tp = 0
        for _, _, box in order[:k]:
            best_iou, best_gt = threshold, None
            for gi, gt in enumerate(gts):
                if gi in matched:
                    continue
                iou = ev.box_iou(box, gt)
                if iou >= best_iou:
                    best_iou, best_gt = iou, gi
            if best_gt is not None:
                matched.add(best_gt)
                tp += 1
        points.append((tp / len(gts), tp / k))
    ap = 0.0
    prev = 0.0
    for recall, _ in points:
        if recall > prev:
            ap += (recall - prev) * max(p for r, p in points if r >= recall)
            prev = recall
    return ap


def test_criterion_10_ap_matches_bruteforce_matcher():
    budget = _Budget()
    mismatches = 0
    for trial in range(200):
        rng = np.random.default_rng(9200 + trial)
        n_gt = int(rng.integers(0, 4))     # up to 3 ground truths
        n_det = int(rng.integers(0, 6))    # up to 5 predictions
        gts = [(rng.uniform(10, 80), rng.uniform(10, 80),
                rng.uniform(5, 30), rng.uniform(5, 30)) for _ in range(n_gt)]
        dets = []
        for _ in range(n_det):
            if gts and rng.uniform() < 0.6:
                cx, cy, w, h = gts[int(rng.integers(0, len(gts)))]
                box = (cx + rng.uniform(0, 0.8) * w, cy + rng.uniform(-3, 3),
                       w * rng.uniform(0.7, 1.3), h * rng.uniform(0.7, 1.3))
            else:
                box = (rng.uniform(10, 80), rng.uniform(10, 80),
                       rng.uniform(5, 30), rng.uniform(5, 30))
            # coarse scores force ties through the deterministic tie-break
            dets.append((round(float(rng.uniform(0.1, 1.0)), 1), box))
        threshold = (0.5, 0.75, 0.55, 0.95)[trial % 4]
        expect = _oracle_ap(dets, gts, threshold)
        got = ev.average_precision([dets], [gts], threshold)
        if expect is None:
            mismatches += got is not None
        else:
            mismatches += got != expect
    ok = mismatches == 0
    _report(10, ok, f"200 randomized instances (<= 5 predictions, <= 3 ground "
                    f"truths): {mismatches} exact mismatches, {budget.spent:.1f}s")


# ---------------------------------------------------------------------------
# criterion 11: bit-exact replay of every pipeline stage
# ---------------------------------------------------------------------------


def test_criterion_11_pipeline_replays_bit_exactly(tmp_path):
    budget = _Budget()
    failures = []

    # dataset stage
    spec = synthgen.SceneSpec(64, (1, 2), 3, 3)
    p1 = synthgen.ModalityProfile.from_quality(1.0)
    p2 = synthgen.ModalityProfile.from_quality(0.4)
    for d in ("a", "b"):
        synthgen.write_dataset(tmp_path / d, spec, p1, p2, count=6)
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    if man_a != man_b:
        failures.append("dataset manifests differ")
    pair = "sample_00000.tensors"
    if (tmp_path / "a" / pair).read_bytes() != (tmp_path / "b" / pair).read_bytes():
        failures.append("sample bytes differ")

    # training stage
    samples = [synthgen.generate_sample(spec, p1, p2, i) for i in range(8)]
    opt = trn.OptimizerConfig(epochs=2, batch_size=4, seed=5)
    cfg = det.DetectorConfig()
    snapshots = []
    for _ in range(2):
        model = det.DualBranchDetector(cfg, 5, RoutePlan.from_preset("rsc-md"))
        trn.train_model(model, samples, opt)
        snapshots.append(det.parameter_arrays(model))
        last_model = model
    if set(snapshots[0]) != set(snapshots[1]) or any(
            not np.array_equal(snapshots[0][k], snapshots[1][k])
            for k in snapshots[0]):
        failures.append("trained parameters differ")

    # checkpoint stage: identical bytes from identical states
    for d in ("ck1", "ck2"):
        det.save_checkpoint(tmp_path / d, last_model)
    if ((tmp_path / "ck1" / "params.tensors").read_bytes()
            != (tmp_path / "ck2" / "params.tensors").read_bytes()):
        failures.append("checkpoint bytes differ")

    # probe and eval stages
    probe = [trn.linear_probe(last_model, "m2", samples, samples, opt, head_seed=1)
             for _ in range(2)]
    if (probe[0].ap50, probe[0].ap50_95) != (probe[1].ap50, probe[1].ap50_95):
        failures.append("probe results differ")
    evals = [ev.evaluate_model(last_model, samples) for _ in range(2)]
    if evals[0] != evals[1]:
        failures.append("eval results differ")

    # report stage, through the command line
    from click.testing import CliRunner
    from fdlab import cli

    runner = CliRunner()
    document = {
        "seed": 1,
        "dataset": {"image_size": 64, "object_count": [1, 2],
                    "train_count": 8, "test_count": 4},
        "optimizer": {"epochs": 1, "batch_size": 4},
    }
    out_dir = tmp_path / "replay"
    config_path = tmp_path / "replay.json"
    config_path.write_text(json.dumps({**document, "output_dir": str(out_dir)}))
    reports_content = []
    # second ablate replays the whole experiment in place over the same data
    for args in (["gen-data"], ["ablate"], ["ablate", "--force"]):
        res = runner.invoke(cli.main, args + ["--config", str(config_path)],
                            catch_exceptions=False)
        assert res.exit_code == 0, res.output
        if args[0] == "ablate":
            body = json.loads((out_dir / "report.json").read_text())
            body.pop("generated_at")
            reports_content.append(body)
    if reports_content[0] != reports_content[1]:
        failures.append("reports differ beyond the timestamp")

    ok = not failures
    _report(11, ok, "dataset, training, checkpoint, probe, eval, and report "
                    f"stages replayed bit-exactly, {budget.spent:.1f}s"
            if ok else f"replay failures: {', '.join(failures)}")
