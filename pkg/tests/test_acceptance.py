"""Acceptance checks 1 to 10.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected into the
terminal summary) before asserting.  Criteria 7 and 8 train the detector
twice on the 60-scene synthetic set and dominate the runtime.
"""

import time

import numpy as np
import pytest

import test_netgraph
import test_postprocess
import test_tensor_ops
from fastenet import _accel, evaluation, formats, netgraph, synthdata, training
from fastenet.cli import analyze_text, main
from fastenet.postprocess import bbox_from_contour, detect, find_contours, threshold
from fastenet.tensor_ops import ShapeError
from helpers import ACCEPTANCE, flood_components

REFERENCE_SIZES = {"fastenet": (512, 1600), "vanillanet": (512, 1600), "largenet": (512, 1536)}

# Training configuration for criteria 7 and 8.  Crops of 128 and lr 1e-3
# keep the run inside the time budget on one core.
TRAIN_CONFIG = training.TrainConfig(lr=1e-3, epochs=1, crops_per_scene=200, crop_size=128, seed=0)
DATA_CONFIG = synthdata.SceneConfig(seed=0)
N_SCENES = 60
TRAIN_BUDGET_S = 45 * 60


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def test_criterion_1_parameter_counts():
    targets = {"fastenet": 494_000, "vanillanet": 500_000, "largenet": 514_000}
    got = {}
    for name, want in targets.items():
        text = analyze_text(name)
        got[name] = int(next(l.split()[1] for l in text.splitlines() if l.startswith("params")))
    devs = {n: abs(got[n] - targets[n]) / targets[n] for n in targets}
    report(1, all(d <= 0.01 for d in devs.values()),
           ", ".join(f"{n} {got[n]} ({devs[n]:.2%})" for n in targets))


def test_criterion_2_shape_contracts():
    expected = {"fastenet": (1, 1, 64, 200), "vanillanet": (1, 1, 64, 200), "largenet": (1, 1, 64, 192)}
    ok, parts = True, []
    for name, (h, w) in REFERENCE_SIZES.items():
        spec = netgraph.build(name)
        ws = netgraph.init_weights(spec, 0)
        y = netgraph.forward(spec, ws, np.zeros((1, 1, h, w), np.float32), "infer")
        ok &= y.shape == expected[name]
        parts.append(f"{name} 1@{w}x{h} -> {y.shape[1]}@{y.shape[3]}x{y.shape[2]}")
        for bad in [(h + 4, w), (h, w - 3), (500, w)]:
            try:
                netgraph.check_input(spec, *bad)
                ok = False
                parts.append(f"{name} accepted {bad}")
            except ShapeError:
                pass
    report(2, ok, "; ".join(parts) + "; illegal sizes rejected")


def test_criterion_3_flops_ordering():
    f = {n: netgraph.flops_count(netgraph.build(n), *REFERENCE_SIZES[n]) for n in REFERENCE_SIZES}
    ratio = f["vanillanet"] / f["fastenet"]
    ok = f["fastenet"] < f["largenet"] < f["vanillanet"] and ratio >= 4
    report(3, ok, ", ".join(f"{n} {v / 1e9:.3f}G" for n, v in f.items()) + f", V/F {ratio:.2f}x")


def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for case in sorted(test_tensor_ops.CASES):
        e = [test_tensor_ops.gradient_errors(case, s) for s in range(20)]
        worst[case] = (max(a for a, _ in e), max(b for _, b in e))
    e64 = [test_netgraph._e2e_error(s, np.float64) for s in range(20)]
    e32 = [test_netgraph._e2e_error(s, np.float32) for s in range(20)]
    worst["end-to-end"] = (max(e64), max(e32))
    dt = time.perf_counter() - t0
    d = max(v[0] for v in worst.values())
    s = max(v[1] for v in worst.values())
    ok = d < 1e-6 and s < 1e-3 and dt < 120
    report(4, ok, f"{len(worst)} checks x 20 seeds, worst double {d:.1e}, worst single {s:.1e}, {dt:.0f}s")


def test_criterion_5_contour_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    dens = test_postprocess.DENSITIES
    bad = 0
    for i in range(1000):
        b = (rng.random((64, 64)) < dens[i % len(dens)]).astype(np.uint8)
        boxes = sorted(bbox_from_contour(c).as_tuple() for c in find_contours(b))
        bad += boxes != [c[:4] for c in flood_components(b)]
    dt = time.perf_counter() - t0
    report(5, bad == 0 and dt < 60, f"1000 maps, {bad} mismatches, {dt:.1f}s")


def test_criterion_6_threshold_monotonicity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(200):
        s = test_postprocess.smooth_saliency(rng)
        prev_fg = prev = None
        for t in np.sort(rng.uniform(0, 1, size=10)):
            fg = threshold(s, t).astype(bool)
            dets = detect(s, t)
            if prev_fg is not None:
                violations += bool(np.any(fg & ~prev_fg))
                violations += sum(not any(test_postprocess._contained(d.bbox, p.bbox) for p in prev)
                                  for d in dets)
                violations += sum(d.area for d in dets) > sum(p.area for p in prev)
            prev_fg, prev = fg, dets
    dt = time.perf_counter() - t0
    report(6, violations == 0 and dt < 60, f"200 maps x 10 thetas, {violations} violations, {dt:.1f}s")


# ---------------------------------------------------------------------------
# Training (7, 8)
# ---------------------------------------------------------------------------


def _training_run():
    _accel.set_strict_deterministic(True)
    t0 = time.perf_counter()
    train, val = synthdata.build_dataset(DATA_CONFIG, N_SCENES)
    train, val = [s for _, s in train], [s for _, s in val]
    spec = netgraph.build_fastenet()
    weights, history = training.train(spec, train, val, TRAIN_CONFIG)
    maps = training.predict(spec, weights, val)
    curve = evaluation.pr_curve(maps, [s.boxes for s in val])
    return {"n": (len(train), len(val)), "weights": weights, "history": history, "curve": curve,
            "best": evaluation.best_point(curve), "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def runs():
    return [_training_run(), _training_run()]


@pytest.mark.slow
def test_criterion_7_desk_scale_training(runs):
    r = runs[0]
    b, h = r["best"], r["history"]
    ok = (r["n"] == (42, 18) and len(h.records) <= TRAIN_CONFIG.epochs + 3 * (2 + 2)
          and b.precision >= 0.95 and b.recall >= 0.85 and r["seconds"] <= TRAIN_BUDGET_S)
    report(7, ok, f"{len(h.records)} epochs, best theta {b.theta:.2f}: precision {b.precision:.4f} "
                  f"recall {b.recall:.4f}, {r['seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_determinism(runs):
    a, b = runs
    same_hist = a["history"].key() == b["history"].key()
    same_pr = a["curve"] == b["curve"] and a["best"] == b["best"]
    same_w = a["weights"].equal(b["weights"])
    report(8, same_hist and same_pr and same_w,
           f"history identical {same_hist}, PR curve identical {same_pr}, weights identical {same_w}")


def test_criterion_9_throughput(capsys):
    rc = main(["bench", "--iters", "50", "--strict-deterministic"])
    out = capsys.readouterr().out
    _accel.set_strict_deterministic(True)
    summary = out.strip().splitlines()[-1]
    iters = sum(l.startswith("iter ") for l in out.splitlines())
    report(9, rc == 0 and iters == 50 and "FPS" in summary, summary)


def test_criterion_10_round_trips(tmp_path):
    spec = netgraph.build_fastenet()
    ws = netgraph.init_weights(spec, 5)
    rng = np.random.default_rng(0)
    for k in ws.keys():
        ws[k] = ws[k] + rng.normal(scale=1e-3, size=ws[k].shape).astype(np.float32)
    formats.save_model(tmp_path / "m.fnm", spec, ws)
    spec2, ws2 = formats.load_model(tmp_path / "m.fnm")
    formats.save_model(tmp_path / "m2.fnm", spec2, ws2)
    model_ok = ws2.equal(ws) and (tmp_path / "m.fnm").read_bytes() == (tmp_path / "m2.fnm").read_bytes()

    img = rng.integers(0, 256, (512, 1600), dtype=np.uint8)
    formats.write_pgm(tmp_path / "i.pgm", img)
    pgm_ok = formats.read_pgm(tmp_path / "i.pgm").tobytes() == img.tobytes()

    synthdata.write_dataset(tmp_path / "a", synthdata.SceneConfig(seed=9), 3)
    synthdata.regenerate(tmp_path / "a" / "manifest.json", tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    data_ok = names == sorted(p.name for p in (tmp_path / "b").iterdir()) and all(
        (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    report(10, model_ok and pgm_ok and data_ok,
           f"model {model_ok}, PGM {pgm_ok}, dataset regeneration {data_ok} ({len(names)} files)")
