"""Acceptance gate. Each test prints one PASS/FAIL line in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import time
from dataclasses import replace
from pathlib import Path
from statistics import median

import numpy as np
import pytest

from blockaffine.adapters import CATALOGS, VARIANTS, AdapterConfig, format_millions, param_count
from blockaffine.cli import main, merge_discrepancy
from blockaffine.experiment import ExperimentConfig
from blockaffine.model import SyntheticTask, attach_adapters, build_model, generate_task
from blockaffine.persistence import export_merged, load_checkpoint, load_model, save_checkpoint
from blockaffine.tensor import Tensor, no_tape
from blockaffine.train import TrainRun, train
from blockaffine.verify import TOLERANCE, grad_check_all, oracle_sweep

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

VARIANT_CONFIGS = {
    "lora": AdapterConfig("lora", rank=8),
    "bone_col": AdapterConfig("bone_col", block_size=16),
    "bone_row": AdapterConfig("bone_row", block_size=16),
    "bone_both": AdapterConfig("bone_both", block_size=16, groups=4),
    "bone_unconstrained": AdapterConfig("bone_unconstrained", block_size=8),
    "bone_hadamard": AdapterConfig("bone_hadamard", block_size=16),
}


def line(report, number, passed, text):
    report(f"[{'PASS' if passed else 'FAIL'}] {number}: {text}")
    return passed


def test_1_param_counts(report):
    expected = [
        (AdapterConfig("lora", rank=36), 89_948_160, "89.9M"),
        (AdapterConfig("bone_col", block_size=16), 21_757_952, "21.7M"),
        (AdapterConfig("bone_col", block_size=32), 43_515_904, "43.5M"),
        (AdapterConfig("bone_col", block_size=64), 87_031_808, "87.0M"),
        (AdapterConfig("bone_col", block_size=128), 174_063_616, "174.0M"),
        (AdapterConfig("bone_row", block_size=64), 72_876_032, "72.8M"),
        (AdapterConfig("bone_unconstrained", block_size=32), 72_876_032, "72.8M"),
    ]
    start = time.perf_counter()
    got = [(param_count(CATALOGS["llama2-7b"], c), format_millions(param_count(CATALOGS["llama2-7b"], c)))
           for c, _, _ in expected]
    elapsed = time.perf_counter() - start
    ok = got == [(n, s) for _, n, s in expected] and elapsed < 1.0
    line(report, 1, ok, f"LLaMA2-7B counts {', '.join(s for _, s in got)} in {elapsed * 1e3:.1f} ms")
    assert ok


def test_2_oracle_equivalence(report):
    start = time.perf_counter()
    results = oracle_sweep()
    elapsed = time.perf_counter() - start
    worst = max(r.rel_err for r in results)
    ok = worst < 1e-13 and elapsed < 30 and {r.variant for r in results} == set(VARIANTS)
    line(report, 2, ok, f"{len(results)} oracle cases, max rel err {worst:.2e} (< 1e-13), {elapsed:.2f} s")
    assert ok


def test_3_gradient_check(report):
    start = time.perf_counter()
    results = grad_check_all(range(10), "f64")
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and TOLERANCE["f64"] == 1e-5 and elapsed < 60
    line(report, 3, ok, f"FD vs backward, 6 variants x 10 seeds at 16x16, max rel err {worst:.2e} "
                        f"(<= 1e-5), {elapsed:.2f} s")
    assert ok


def test_4_zero_init_transparency(report):
    base = build_model(seed=0)
    X, _ = generate_task(SyntheticTask(seed=0), base)
    with no_tape():
        want = base.forward(X).data.tobytes()
        same = {v: attach_adapters(base, c, seed=1).forward(X).data.tobytes() == want
                for v, c in VARIANT_CONFIGS.items()}
    ok = all(same.values())
    line(report, 4, ok, f"pre-training forward bitwise equal to base for {sum(same.values())}/6 variants")
    assert ok


def test_5_merge_equivalence(report):
    diffs = {}
    for v, c in VARIANT_CONFIGS.items():
        res = train(TrainRun(c, task=SyntheticTask(seed=0), steps=200, lr=1e-3, dtype="f64"))
        assert res.final_loss < res.log[0][1]
        X, _ = generate_task(SyntheticTask(seed=9, dataset_size=256), res.model.base())
        with no_tape():
            diffs[v] = float(np.max(np.abs(res.model.forward(X).data - res.model.merged().forward(X).data)))
        diffs[v] = max(diffs[v], merge_discrepancy(res.model))
    worst = max(diffs.values())
    ok = worst < 1e-12
    line(report, 5, ok, f"adapter vs merged forward after 200 f64 steps, max abs diff {worst:.2e} (< 1e-12)")
    assert ok


def test_6_parameter_parity(report):
    square = {"llama2-7b-attn": CATALOGS["llama2-7b-attn"], "desk": CATALOGS["desk"]}
    pairs = [(name, r, param_count(shapes, AdapterConfig("bone_col", block_size=2 * r)),
              param_count(shapes, AdapterConfig("lora", rank=r)))
             for name, shapes in square.items() for r in (4, 8, 16, 32)]
    ok = all(a == b for *_, a, b in pairs)
    line(report, 6, ok, f"bone_col b=2r == lora r on {len(pairs)} (catalog, r) pairs, r in 4/8/16/32")
    assert ok


def test_7_recompute(report):
    same, ordered = [], []
    for v, c in VARIANT_CONFIGS.items():
        run = TrainRun(c, task=SyntheticTask(seed=0, dataset_size=1024), steps=100)
        cached, recomputed = train(run), train(replace(run, adapter=replace(c, recompute=True)))
        same.append(cached.log == recomputed.log and cached.final_loss == recomputed.final_loss)
        ordered.append(cached.memory.peak_tracked_bytes > recomputed.memory.peak_tracked_bytes)
    ok = all(same) and all(ordered)
    line(report, 7, ok, f"recompute logs bitwise equal {sum(same)}/6, cached peak > recompute peak "
                        f"{sum(ordered)}/6")
    assert ok


# --------------------------------------------------------------------------
# 8: convergence ordering on the default desk task

ARMS = ("bone_col", "lora", "bone_unconstrained", "bone_hadamard")


@pytest.fixture(scope="module")
def convergence():
    out = {}
    for arm in ARMS:
        cfg = ExperimentConfig.load(CONFIGS / f"desk_{arm}.json")
        assert cfg.steps == 500 and list(cfg.seeds) == [0, 1, 2, 3, 4]
        start = time.perf_counter()
        results = [train(run) for run in cfg.runs()]
        elapsed = time.perf_counter() - start
        out[arm] = {
            "params": results[0].model.num_trainable,
            "step100": median(r.loss_at(100) for r in results),
            "final": median(r.final_loss for r in results),
            "seconds": elapsed,
        }
    return out


def _arms(conv):
    return ", ".join(f"{a} s100={conv[a]['step100']:.4f} final={conv[a]['final']:.4f} "
                     f"({conv[a]['seconds']:.1f} s)" for a in ARMS)


def test_8_setup(convergence, report):
    ok = len({c["params"] for c in convergence.values()}) == 1 and all(c["seconds"] < 60 for c in convergence.values())
    line(report, "8 setup", ok, f"{convergence['bone_col']['params']} trainable params per arm; {_arms(convergence)}")
    assert ok


def test_8a_bone_beats_lora_at_step_100(convergence, report):
    bone, lora = convergence["bone_col"]["step100"], convergence["lora"]["step100"]
    ok = bone < lora
    line(report, "8a", ok, f"median loss at step 100: bone_col {bone:.4f} vs lora {lora:.4f}")
    assert ok


def test_8b_bone_beats_unconstrained(convergence, report):
    bone, other = convergence["bone_col"]["final"], convergence["bone_unconstrained"]["final"]
    ok = bone < other
    line(report, "8b", ok, f"median final loss: bone_col {bone:.4f} vs bone_unconstrained {other:.4f}")
    assert ok


def test_8c_bone_beats_hadamard(convergence, report):
    bone, other = convergence["bone_col"]["final"], convergence["bone_hadamard"]["final"]
    ok = bone < other
    line(report, "8c", ok, f"median final loss: bone_col {bone:.4f} vs bone_hadamard {other:.4f}")
    assert ok


# --------------------------------------------------------------------------

def test_9_persistence(tmp_path, report):
    rng = np.random.default_rng(9)
    tensors = {}
    for i in range(100):
        shape = tuple(rng.integers(1, 9, size=rng.integers(0, 4)))
        tensors[f"t{i:03d}"] = Tensor(rng.standard_normal(shape) * 10.0 ** rng.integers(-30, 30),
                                      "f32" if i % 2 else "f64")
    save_checkpoint(tmp_path / "many.ckpt", tensors, {"seed": 9})
    back, _ = load_checkpoint(tmp_path / "many.ckpt")
    bitwise = all(back[k].dtype == t.dtype and back[k].shape == t.shape
                  and back[k].data.tobytes() == t.data.tobytes() for k, t in tensors.items())

    res = train(TrainRun(VARIANT_CONFIGS["bone_col"], task=SyntheticTask(seed=0, dataset_size=512),
                         steps=100, lr=3e-3, dtype="f64"))
    export_merged(tmp_path / "merged.ckpt", res.model)
    merged, _ = load_model(tmp_path / "merged.ckpt")
    X, _ = generate_task(SyntheticTask(seed=3, dataset_size=256), res.model.base())
    with no_tape():
        diff = float(np.max(np.abs(merged.forward(X).data - res.model.forward(X).data)))
    ok = bitwise and diff < 1e-12
    line(report, 9, ok, f"100 tensors bitwise={bitwise}; exported merge reload diff {diff:.2e} (< 1e-12)")
    assert ok


def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_10_cli_determinism(tmp_path, capsys, report):
    cfg = json.loads((CONFIGS / "desk_bone_col.json").read_text())
    cfg["train"].update(steps=60, seeds=[0, 1])
    cfg["output_dir"] = str(tmp_path / "runs")
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    config = str(tmp_path / "cfg.json")
    ckpt = str(tmp_path / "runs" / "bone_col_0.ckpt")
    commands = [
        ["train", config],
        ["train", config, "--seed-override", "3", "--dtype", "f64"],
        ["merge", ckpt, str(tmp_path / "merged" / "m.ckpt")],
        ["compare", str(tmp_path / "runs" / "bone_col_0.csv"), str(tmp_path / "runs" / "bone_col_1.csv")],
        ["param-count", "llama2-7b"],
        ["param-count", config],
        ["grad-check", "--seeds", "2"],
        ["oracle-check", "--seeds", "1"],
    ]
    (tmp_path / "merged").mkdir()
    mismatched = []
    for args in commands:
        outputs = []
        for _ in range(2):
            code = main(args)
            outputs.append((code, capsys.readouterr().out, _snapshot(tmp_path)))
        if outputs[0] != outputs[1] or outputs[0][0] != 0:
            mismatched.append(args[0])
    ok = not mismatched
    line(report, 10, ok, f"{len(commands)} CLI invocations re-run with byte-identical stdout and artifacts"
                         + (f"; mismatched: {mismatched}" if mismatched else ""))
    assert ok
