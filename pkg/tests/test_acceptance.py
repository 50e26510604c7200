"""Acceptance criteria 1-9.

Each test prints one ``CRITERION n: PASS|FAIL`` line with the measured
quantities, then asserts. Run alone with ``pytest tests/test_acceptance.py -s``
or as a script: ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import dataclasses
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import KINDS, toy_text  # noqa: E402
from mtss.checkpoint import from_bytes, to_bytes  # noqa: E402
from mtss.cli import main as cli_main  # noqa: E402
from mtss.color import bin_center, harmonize, quantize_ab  # noqa: E402
from mtss.config import Mode, parse_config  # noqa: E402
from mtss.data import MotionConfig, motion_mask, scene_batch, stream, synth_motion_sequence  # noqa: E402
from mtss.evaluation import depth_metrics, frozen_linear_eval, shape_benchmark  # noqa: E402
from mtss.gradcheck import PRIMITIVE_KINDS, check_primitive, check_task  # noqa: E402
from mtss.tasks import RP_OFFSETS, TaskKind, rp_label, sample_relative_position_pair  # noqa: E402
from mtss.trainer import (  # noqa: E402
    initial_params, round_robin_traces, run_training, serial_reference, slow_fast_traces, staleness_report,
)
from mtss.trunk import AlphaMatrix  # noqa: E402

RESULTS: dict[int, bool] = {}


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = ok
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    capman = _CAPTURE.get("capman")
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)


_CAPTURE: dict = {}


@pytest.fixture(autouse=True)
def _uncaptured(request):
    _CAPTURE["capman"] = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _CAPTURE.pop("capman", None)


def _config(tasks, seed=0, steps=200, extra="", task_extra=""):
    text = f"[experiment]\nid = accept\nseed = {seed}\n[train]\nmax_steps = {steps}\n{extra}"
    for t in tasks:
        text += f"[task.{t}]\nkind = {KINDS[t]}\n{task_extra}"
    return parse_config(text)


# ---------------------------------------------------------------------------

def test_c1_gradient_integrity():
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for kind in PRIMITIVE_KINDS:
        rep = check_primitive(kind)
        worst = max(worst, rep.worst)
        if not rep.passed:
            failed.append(kind)
    for kind in TaskKind:
        rep = check_task(kind)
        worst = max(worst, rep.worst)
        if not rep.passed:
            failed.append(kind.value)
    elapsed = time.perf_counter() - t0
    ok = not failed and worst < 1e-5 and elapsed < 120
    report(1, ok, f"{len(PRIMITIVE_KINDS)} primitives + 4 task losses, max rel error {worst:.2e}, "
                  f"failed={failed}, {elapsed:.1f}s")
    assert ok


def test_c2_protocol_equivalence():
    t0 = time.perf_counter()
    cfg = _config(["rp", "col", "ex", "ms"], steps=200)
    hyb = run_training(cfg, traces=round_robin_traces(cfg.task_ids), mode=Mode.HYBRID)
    ser = serial_reference(cfg)
    same_traj = hyb.trajectory == ser.trajectory and len(ser.trajectory) == 200
    rel = max(np.max(np.abs(hyb.final.params[k] - v)) / max(np.max(np.abs(v)), 1e-300)
              for k, v in ser.final.params.items())
    elapsed = time.perf_counter() - t0
    ok = same_traj and rel <= 1e-12 and elapsed < 60
    report(2, ok, f"200 applies, digests identical={same_traj}, max rel diff {rel:.1e}, {elapsed:.1f}s")
    assert ok


def _deltas(run):
    return [(ev.task_id, ev.deltas) for ev in run.applies]


def test_c3_loss_scale_invariance():
    base_cfg = _config(["rp", "col", "ex", "ms"], steps=100, extra="[optimizer]\neps = 0.0\n")
    base = _deltas(run_training(base_cfg, keep_deltas=True))
    worst = 0.0
    for tid in base_cfg.task_ids:
        for c in (0.1, 10.0):
            tasks = tuple(dataclasses.replace(e, spec=e.spec.with_(loss_scale=c)) if e.spec.task_id == tid else e
                          for e in base_cfg.tasks)
            scaled = _deltas(run_training(dataclasses.replace(base_cfg, tasks=tasks), keep_deltas=True))
            assert [t for t, _ in scaled] == [t for t, _ in base]
            for (_, d0), (_, d1) in zip(base, scaled):
                for k in d0:
                    scale = np.max(np.abs(d0[k]))
                    if scale > 0:
                        worst = max(worst, np.max(np.abs(d1[k] - d0[k])) / scale)
                    else:
                        worst = max(worst, float(np.max(np.abs(d1[k]))))
    ok = worst <= 1e-12
    report(3, ok, f"4 tasks x c in {{0.1, 10}}, 100 applies, max per-tensor relative delta change {worst:.1e}")
    assert ok


def test_c4_staleness_contract():
    cfg = _config(["rp"], steps=12, task_extra="workers = 2\n")
    traces = slow_fast_traces("rp")
    asy = staleness_report(run_training(cfg, traces, Mode.ASYNC))
    hyb = staleness_report(run_training(cfg, traces, Mode.HYBRID))
    backup = _config(["rp"], steps=12, task_extra="workers = 2\nbackups = 1\n")
    syn = staleness_report(run_training(backup, traces, Mode.SYNC))
    hybrid_zero = all(set(t.distribution) <= {0} for t in hyb.tasks.values())
    ok = asy.max_staleness >= 1 and hybrid_zero and syn.discarded >= 1
    report(4, ok, f"async max staleness {asy.max_staleness}, hybrid staleness {hyb.tasks['rp'].distribution}, "
                  f"sync+backup discards {syn.discarded}")
    assert ok


def _row_norm_error(params):
    alpha = AlphaMatrix.from_params(params).alpha
    return float(np.max(np.abs(np.linalg.norm(alpha, axis=1) - 1.0)))


def test_c5_lasso_behaviour():
    lams = (0.0, 1e-3, 1e-2)
    medians, worst_norm = [], 0.0
    trunk = "units = 4\nwidth = 4\ndilate_from = 2\n"
    for lam in lams:
        fracs = []
        for seed in range(3):
            cfg = parse_config(toy_text(("rp", "col", "ex", "ms"), seed=seed, steps=400, trunk=trunk,
                                        extra=f"[lasso]\nmode = both\nlambda = {lam!r}\n[optimizer]\nlr = 0.01\n"))
            norms = []
            # every beta row along the way maps to a unit-norm alpha row
            run = run_training(cfg, on_event=lambda st: norms.append(_row_norm_error(st.params)))
            worst_norm = max(worst_norm, *norms)
            am = AlphaMatrix.from_params(run.final.params)
            fracs.append(float(np.mean(np.abs(am.alpha) < 0.01)))
        medians.append(statistics.median(fracs))
    monotone = all(a <= b for a, b in zip(medians, medians[1:]))
    ok = monotone and worst_norm <= 1e-9
    report(5, ok, f"median fraction |alpha| < 0.01 at lambda {lams}: {medians}, max |norm - 1| {worst_norm:.1e}")
    assert ok


# criterion 6 benchmark settings (see the README for the rationale)
C6_SEEDS = range(5)
C6_STEPS = 1000
C6_LR = 3e-3
C6_EVAL = dict(train_size=240, test_size=400)
C6_COMBOS = (("rp",), ("col",), ("ex",), ("ms",), ("rp", "col"), ("rp", "col", "ex", "ms"))


def _c6_accuracy(combo, seed, dataset):
    text = (f"[experiment]\nid = {'_'.join(combo)}\nseed = {seed}\n[optimizer]\nlr = {C6_LR!r}\n"
            f"[train]\nmax_cost = {float(C6_STEPS)!r}\n")
    # equal step costs: every combination gets the same number of applied steps
    text += "".join(f"[task.{t}]\nkind = {KINDS[t]}\nstep_cost = 1.0\n" for t in combo)
    cfg = parse_config(text)
    run = run_training(cfg)
    ev = dataclasses.replace(cfg.eval, **C6_EVAL)
    return 100.0 * frozen_linear_eval(run.final.params, cfg.trunk, dataset, ev, seed=seed).accuracy


def test_c6_multitask_transfer_direction():
    t0 = time.perf_counter()
    acc: dict[tuple, list[float]] = {c: [] for c in C6_COMBOS}
    for seed in C6_SEEDS:
        ds = shape_benchmark(seed, C6_EVAL["train_size"], C6_EVAL["test_size"])
        for combo in C6_COMBOS:
            acc[combo].append(_c6_accuracy(combo, seed, ds))
    med = {c: statistics.median(v) for c, v in acc.items()}
    singles = max(med[(t,)] for t in ("rp", "col", "ex", "ms"))
    elapsed = time.perf_counter() - t0
    first = med[("rp", "col")] >= med[("rp",)]
    second = med[("rp", "col", "ex", "ms")] >= singles - 0.5
    ok = first and second and elapsed < 1800
    table = ", ".join(f"{'+'.join(c)}={m:.2f}" for c, m in med.items())
    report(6, ok, f"median top-1 % over {len(C6_SEEDS)} seeds: {table}; RP+Col>=RP {first}, "
                  f"all4>=max(single)-0.5 {second}; {elapsed / 60:.1f} min")
    assert ok


def test_c7_metric_oracles():
    r = depth_metrics([1.0, 2.0, 4.0], [1.0, 2.6, 4.0])
    worked = (round(r.pct_below_1_25, 2), r.pct_below_1_25_sq, r.pct_below_1_25_cube,
              round(r.mean_absolute_error, 12), round(r.mean_relative_error, 12)) == (66.67, 100.0, 100.0, 0.2, 0.1)
    from fractions import Fraction
    rng = np.random.default_rng(7)
    exact = monotone = True
    for _ in range(100):
        gt = rng.uniform(0.1, 10.0, (10, 10))
        p = rng.uniform(0.1, 10.0, (10, 10)) if rng.random() < 0.5 else gt * np.exp(rng.normal(0, 0.3, (10, 10)))
        rep = depth_metrics(gt, p)
        below, a_sum, r_sum = [0, 0, 0], Fraction(0), Fraction(0)
        for i in range(10):
            for j in range(10):
                a, b = float(gt[i, j]), float(p[i, j])
                ratio = max(a / b, b / a)
                below[0] += ratio < 1.25
                below[1] += ratio < 1.25 ** 2
                below[2] += ratio < 1.25 ** 3
                a_sum += Fraction(abs(b - a))
                r_sum += Fraction(abs(b - a) / a)
        brute = (100.0 * below[0] / 100, 100.0 * below[1] / 100, 100.0 * below[2] / 100,
                 float(a_sum) / 100, float(r_sum) / 100)
        got = (rep.pct_below_1_25, rep.pct_below_1_25_sq, rep.pct_below_1_25_cube, rep.mean_absolute_error,
               rep.mean_relative_error)
        exact &= got == brute
        monotone &= rep.pct_below_1_25 <= rep.pct_below_1_25_sq <= rep.pct_below_1_25_cube
    ok = worked and exact and monotone
    report(7, ok, f"worked example {worked}, 100 random 10x10 maps exact {exact}, monotone {monotone}")
    assert ok


def test_c8_pipeline_oracles():
    bins = 13
    ids = np.arange(bins * bins)
    quant = bool(np.array_equal(quantize_ab(bin_center(ids, bins), bins), ids))
    rng = stream(8, "accept")
    img = scene_batch(rng, 1)[0]
    swap = True
    for _ in range(10_000):
        _, _, lab, c1, c2 = sample_relative_position_pair(img, 3, 8, 1, rng)
        off = (c2[0] - c1[0], c2[1] - c1[1])
        swap &= RP_OFFSETS[lab] == off and rp_label((-off[0], -off[1])) == (lab + 4) % 8
    cam = MotionConfig(size=16, camera_velocity=(1, 2), objects=2, object_velocities=[(1, 2), (1, 2)])
    motion = all(not motion_mask(synth_motion_sequence(cam, stream(s, "cam")), 2).mask.any() for s in range(5))
    h = harmonize(np.random.default_rng(0).random((8, 8, 3)))
    harm = h[..., 0].tobytes() == h[..., 1].tobytes() == h[..., 2].tobytes()
    ok = quant and swap and motion and harm
    report(8, ok, f"bin centers round-trip {quant}, 10k RP swaps {swap}, camera-only masks empty {motion}, "
                  f"harmonized channels identical {harm}")
    assert ok


def test_c9_reproducibility(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(toy_text(("rp", "ms"), steps=10) + "[eval]\ntrain_size = 16\ntest_size = 8\nprobe_steps = 5\n"
                   "finetune_steps = 1\ndepth_train_size = 2\ndepth_test_size = 2\ndepth_steps = 1\nbatch_size = 2\n")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli_main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    identical = outs[0] == outs[1]
    round_trip = all(to_bytes(from_bytes(b)) == b for n, b in outs[0].items() if n.endswith(".mtss"))
    ck = from_bytes(outs[0]["ckpt_000.mtss"])
    init = initial_params(parse_config(cfg.read_text()))
    tensors = all(ck.params[k].tobytes() == v.tobytes() for k, v in init.items())
    ok = identical and round_trip and tensors
    report(9, ok, f"{len(outs[0])} output files byte-identical {identical}, checkpoint round trip {round_trip}, "
                  f"tensors bit-exact {tensors}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
