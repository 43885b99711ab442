"""Acceptance gate: one PASS/FAIL line per criterion, printed in the pytest
terminal summary under "acceptance criteria".

    pytest tests/test_acceptance.py -v
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

import test_decoder
import test_encoder
import test_metrics
from cli_cases import CASES, GOLDEN
from conftest import ACCEPTANCE_LINES, tiny_config
from lapformer.data import AugmentPolicy, augment, build_split, portable_rng, synthetic_disks
from lapformer.decoder import ABLATIONS
from lapformer.model import build_model, count_parameters, load_checkpoint, save_checkpoint, variant_config
from lapformer.profile import estimate_flops
from lapformer.trainer import TrainConfig, overfit_check, train

# reference values: (params in M, GFLOPs at 352x352)
REFERENCE = {"S": (16.3, 10.54), "L": (47.22, 18.96)}
ABLATION_REFERENCE = {
    "segformer": (13.68, 5.5),
    "pff": (13.81, 6.53),
    "pff_a": (14.07, 8.57),
    "pff_a_fsm": (14.21, 8.58),
    "pff_a_fsm_skip": (14.21, 8.58),
    "lapformer": (16.3, 10.54),
}
KVASIR_MDICE = 0.910


def record(criterion: str, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
    assert ok, detail


def within(value, ref, tol):
    return abs(value - ref) <= tol * ref


@pytest.fixture(scope="module")
def complexity():
    out = {}
    for v in ("S", "L"):
        model = build_model(variant_config(v))
        out[v] = (count_parameters(model) / 1e6, estimate_flops(model, (352, 352)))
    return out


def test_c1_parameter_counts(complexity):
    ok = all(within(complexity[v][0], REFERENCE[v][0], 0.05) for v in REFERENCE)
    detail = ", ".join(f"{v} {complexity[v][0]:.2f}M vs {REFERENCE[v][0]}M" for v in REFERENCE) + " (tol 5%)"
    record("C1 params", ok, detail)


def test_c2_flops(complexity):
    ok = all(within(complexity[v][1], REFERENCE[v][1], 0.10) for v in REFERENCE)
    detail = ", ".join(f"{v} {complexity[v][1]:.2f}G vs {REFERENCE[v][1]}G" for v in REFERENCE) + " (tol 10%)"
    record("C2 GFLOPs @352", ok, detail)


def test_c3_ablation_ordering():
    rows = []
    for name in ABLATIONS:
        model = build_model(variant_config("S", name))
        rows.append((name, count_parameters(model) / 1e6, estimate_flops(model, (352, 352))))
    params = [r[1] for r in rows]
    flops = [r[2] for r in rows]
    cells_ok = all(within(p, ABLATION_REFERENCE[n][0], 0.10) and within(f, ABLATION_REFERENCE[n][1], 0.10)
                   for n, p, f in rows)
    params_strict = all(a < b for a, b in zip(params, params[1:]))
    flops_strict = all(a < b for a, b in zip(flops, flops[1:]))
    ties = [f"{a[0]}={b[0]}" for a, b in zip(rows, rows[1:]) if not a[1] < b[1]]
    detail = (f"cells within 10%: {cells_ok}; GFLOPs strictly increasing: {flops_strict}; "
              f"params strictly increasing: {params_strict}"
              + (f" (ties {', '.join(ties)}: the skip add has no weights)" if ties else "")
              + "; " + " -> ".join(f"{p:.2f}M/{f:.3f}G" for _, p, f in rows))
    record("C3 ablation ordering", cells_ok and params_strict and flops_strict, detail)


def test_c4_overfit_substitute():
    t0 = time.perf_counter()
    dice = overfit_check(build_model(variant_config("S"), seed=0), synthetic_disks(4, 64, seed=0), steps=200)
    minutes = (time.perf_counter() - t0) / 60
    record("C4 overfit LAPFormer-S", dice > 0.95 and minutes < 15,
           f"dice {dice:.4f} (> 0.95) after 200 steps in {minutes:.1f} min (< 15); "
           "full benchmark tables not reproducible at desk scale")


@pytest.mark.dataset
@pytest.mark.skipif(not os.environ.get("LAPFORMER_DATA"), reason="set LAPFORMER_DATA (and LAPFORMER_PRETRAINED)")
def test_c4_kvasir_full_run():
    """Long job: one full training run, Kvasir test mDice 0.910 +- 0.02."""
    import subprocess
    import sys

    out = Path(os.environ.get("LAPFORMER_OUT", "runs/kvasir_repro"))
    cmd = [sys.executable, str(Path(__file__).parents[1] / "scripts" / "reproduce_kvasir.py"),
           "--data", os.environ["LAPFORMER_DATA"], "--out", str(out), "--runs", "1"]
    if os.environ.get("LAPFORMER_PRETRAINED"):
        cmd += ["--pretrained", os.environ["LAPFORMER_PRETRAINED"]]
    subprocess.run(cmd, check=True)
    mdice = float((out / "kvasir_mdice.txt").read_text())
    record("C4 Kvasir mDice", abs(mdice - KVASIR_MDICE) <= 0.02, f"{mdice:.3f} vs {KVASIR_MDICE} (tol 0.02)")


def test_c5_invariant_suites():
    rng = np.random.default_rng(1234)
    suites = [
        ("pyramid shape law", test_encoder.test_pyramid_shape_law),
        ("FSM weights in [0,1]", test_decoder.test_fsm_weights_in_unit_interval),
        ("PFF upper identity", test_decoder.test_pff_upper_identity_slice),
        ("PFF lower identity", test_decoder.test_pff_lower_identity_slice),
        ("dice-iou identity x1000", lambda: test_metrics.test_dice_iou_identity_1000_pairs(rng)),
        ("loop oracles", lambda: test_metrics.test_kernels_equal_loop_oracle(rng)),
        ("loss gradcheck 8x8 f64", test_metrics.test_loss_gradient_matches_finite_differences),
    ]
    t0 = time.perf_counter()
    failed = []
    for name, fn in suites:
        try:
            fn()
        except AssertionError as e:
            failed.append(f"{name}: {e}")
    seconds = time.perf_counter() - t0
    record("C5 invariant suites", not failed and seconds < 300,
           f"{len(suites) - len(failed)}/{len(suites)} suites in {seconds:.1f}s (< 300)"
           + (f"; failed {failed}" if failed else ""))


def _fake_root(root: Path, n: int):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir(parents=True)
    for i in range(n):
        Image.new("RGB", (2, 2)).save(root / "images" / f"{i:04d}.png")
        Image.new("L", (2, 2)).save(root / "masks" / f"{i:04d}.png")
    return root


def test_c6_determinism(tmp_path):
    checks = {}
    kv, cl = _fake_root(tmp_path / "kv", 1000), _fake_root(tmp_path / "cl", 612)
    checks["split"] = build_split(kv, cl, seed=7) == build_split(kv, cl, seed=7)

    s = synthetic_disks(1, 32)[0]
    a = [augment(s, portable_rng(3, k), AugmentPolicy()) for k in range(20)]
    b = [augment(s, portable_rng(3, k), AugmentPolicy()) for k in range(20)]
    checks["augment"] = all(torch.equal(x.image, y.image) and torch.equal(x.mask, y.mask) for x, y in zip(a, b))

    cfg = TrainConfig(epochs=2, batch_size=3, base_lr=1e-3, input_size=(64, 64), seed=1)
    samples = synthetic_disks(6, 64)
    ck = [train(build_model(tiny_config(), seed=1), samples, cfg)[0] for _ in range(2)]
    checks["train"] = all(np.array_equal(ck[0].params[k], ck[1].params[k]) for k in ck[0].params)

    model = build_model(tiny_config(), seed=2).eval()
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        same_out = torch.equal(model(x), loaded.eval()(x))
    same_state = all(torch.equal(v, loaded.state_dict()[k]) for k, v in model.state_dict().items())
    resaved = save_checkpoint(loaded, tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    checks["checkpoint"] = same_out and same_state and resaved

    record("C6 determinism", all(checks.values()), ", ".join(f"{k} {'ok' if v else 'DIFFERS'}"
                                                             for k, v in checks.items()))


def test_c7_cli_golden(tmp_path, capsys):
    from lapformer.cli import main

    mismatched = []
    for name, case in CASES.items():
        work = tmp_path / name
        work.mkdir()
        argv = case(work)
        capsys.readouterr()
        code = main(argv)
        out = capsys.readouterr().out
        if code != 0 or out != (GOLDEN / f"{name}.txt").read_text():
            mismatched.append(name)
    record("C7 CLI golden outputs", not mismatched,
           f"{len(CASES) - len(mismatched)}/{len(CASES)} byte-identical"
           + (f"; mismatched {mismatched}" if mismatched else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
