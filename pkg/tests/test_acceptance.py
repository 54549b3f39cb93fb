"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from branchnet import kernels, ops
from branchnet.config import dump_echo, load_preset
from branchnet.core import BranchedModel, reduce
from branchnet.data import load_cifar_splits, subset, synth_shapes
from branchnet.impact import INFERENCE_TRANSFORMS, BenchConfig, benchmark, inference_impact
from branchnet.layers import build_preact_resnet
from branchnet.tensor import Tensor
from branchnet.training import OptimConfig, evaluate, train
from branchnet.transforms import FLIP, IDENTITY, TransformSpec, apply_branching, flip_h, rotate, scale

import gradcases
from conftest import DESK_OPTIM, desk_model
from oracles import rotation_source, scale_source, softmax_rows, warp_pixel_oracle

GOLDEN = Path(__file__).parent / "golden"
BACKENDS = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {title}" + (f" | {detail}" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst, failures, runs = 0.0, [], 0
    for backend in BACKENDS:
        with kernels.using(backend):
            for name, case in gradcases.CASES.items():
                for seed in range(20):
                    err, _ = gradcases.max_relative_error(case, seed, eps=1e-3)
                    runs += 1
                    worst = max(worst, err)
                    if err >= 1e-2:
                        failures.append((backend, name, seed, err))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120.0
    verdict(
        1, "finite-difference gradient suite",
        ok, f"{len(gradcases.CASES)} case types x 20 draws x {len(BACKENDS)} backends = {runs} runs, "
        f"worst rel err {worst:.2e}, {elapsed:.1f}s, failures {failures[:3]}",
    )


def test_geo_identity(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for r in (2, 4, 8):
        for c in (3, 10, 100):
            for _ in range(5):
                z = rng.standard_normal((r, 6, c)) * 2.0
                probs = Tensor(softmax_rows(z).reshape(r * 6, 1, 1, c))
                geo = reduce(probs, r, "geo").data.reshape(6, c)
                expect = softmax_rows(z.mean(axis=0))
                worst = max(worst, float(np.abs(geo - expect).max()))
    verdict(2, "geo reduction equals softmax of mean logits", worst <= 1e-6, f"max abs diff {worst:.2e}")


def _transform_algebra(rng):
    issues = []
    x = rng.standard_normal((3, 12, 10, 4)).astype(np.float32)
    t = Tensor(x)
    if not np.array_equal(flip_h(flip_h(t)).data, x):
        issues.append("flip involution")
    if not np.array_equal(rotate(t, 0.0).data, x) or not np.array_equal(scale(t, 1.0).data, x):
        issues.append("identity warps")
    if not np.array_equal(rotate(t, 180.0).data, x[:, ::-1, ::-1]):
        issues.append("180 lattice permutation")

    h = w = 32
    pos = rng.random((2, h, w, 3)) + 0.5
    zoom = scale(Tensor(pos), 0.9).data
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    outside = (np.abs(ii - cy) / 0.9 > cy) | (np.abs(jj - cx) / 0.9 > cx)
    if not outside.any() or np.any(zoom[:, outside] != 0.0) or np.any(zoom[:, ~outside] == 0.0):
        issues.append("zoom-out band")

    a = rng.standard_normal((2, 9, 9, 2))
    b = rng.standard_normal((2, 9, 9, 2))
    lin = 0.0
    for spec in (TransformSpec("rotate", 23.0), TransformSpec("scale", factor=1.2)):
        warp = lambda v: apply_branching(Tensor(v), [spec]).data
        lin = max(lin, float(np.abs(warp(2.5 * a - b) - (2.5 * warp(a) - warp(b))).max()))
    if lin > 1e-5:
        issues.append(f"linearity {lin:.1e}")

    oracle = 0.0
    y = rng.standard_normal((2, 11, 9, 3))
    for angle in (-30.0, 15.0, 45.0, 77.7):
        oracle = max(oracle, float(np.abs(rotate(Tensor(y), angle).data - warp_pixel_oracle(y, rotation_source(11, 9, angle))).max()))
    for f in (0.8, 0.9, 1.1, 1.25):
        oracle = max(oracle, float(np.abs(scale(Tensor(y), f).data - warp_pixel_oracle(y, scale_source(11, 9, f))).max()))
    if oracle > 1e-5:
        issues.append(f"oracle {oracle:.1e}")
    return issues, lin, oracle


def test_transform_algebra(verdict):
    issues, details = [], []
    for backend in BACKENDS:
        with kernels.using(backend):
            found, lin, oracle = _transform_algebra(np.random.default_rng(3))
        issues += [f"{backend}: {i}" for i in found]
        details.append(f"{backend}: linearity {lin:.1e}, oracle {oracle:.1e}")
    verdict(3, "transform algebra", not issues, "; ".join(details + issues))


def _manual_logits(model, x, spots):
    for i, block in enumerate(model.blocks):
        x = block(x)
        if i in spots:
            x = Tensor(np.concatenate([x.data, x.data[:, :, ::-1]], axis=0))
    return model.head(x).data


def test_branch_bookkeeping(verdict):
    base = desk_model(seed=5, depth_n=2)
    base.eval()
    nb = base.num_blocks
    x = Tensor(np.random.default_rng(0).standard_normal((3, 16, 16, 3)).astype(np.float32))
    details, ok = [], True
    for n in range(1, 5):
        spots = [nb - 1 - k for k in range(1, n + 1)]
        view = base.with_branchings({s: [IDENTITY, FLIP] for s in spots})
        view.eval()
        out = view.logits(x).data
        manual = _manual_logits(base, x, set(spots))
        rows_ok = out.shape[0] == 2**n * 3
        layout_ok = np.allclose(out, manual, atol=1e-6)
        params_ok = view.num_parameters() == base.num_parameters()
        ok &= rows_ok and layout_ok and params_ok
        details.append(f"flip-{n}: rows {out.shape[0]} layout {'ok' if layout_ok else 'BAD'} params {view.num_parameters()}")
    verdict(4, "flip-n rows 2^n*B, variant-major, shared parameters", ok, "; ".join(details))


def test_global_pool_flip_invariance(verdict, trained_desk, desk_data):
    model, history = trained_desk
    _, test_set = desk_data
    spot = model.num_blocks - 1
    view = model.with_branchings({spot: [IDENTITY, FLIP]})
    view.eval()
    x = Tensor(test_set.normalize(test_set.images[:256]))
    logits = view.logits(x).data
    identical = np.array_equal(logits[:256], logits[256:])
    report = inference_impact(model, test_set, {"flip": FLIP}, spots=[spot, model.sentinel])
    at_pool = report.row(spot, "flip").top1_err
    plain = report.row(model.sentinel, "flip").top1_err
    verdict(
        5, "flip before global pooling is exact",
        identical and at_pool == plain,
        f"branch logits identical {identical}; impact {at_pool:.2f} vs no-change {plain:.2f}",
    )


CIFAR_DIR = os.environ.get("BRANCHNET_CIFAR10_DIR")


@pytest.mark.longrun
@pytest.mark.skipif(not CIFAR_DIR, reason="set BRANCHNET_CIFAR10_DIR to the CIFAR-10 binary directory")
def test_inside_impact_shape_cifar(verdict):
    cfg = load_preset("cifar10-preact20-desk")
    train_set, test_set = load_cifar_splits(CIFAR_DIR, "cifar10")
    train_set = subset(train_set, cfg.dataset.per_class, cfg.dataset.seed)
    test_set = test_set.with_stats_of(train_set)
    blocks, head = build_preact_resnet(cfg.arch.depth_n, 10, cfg.arch.widths, seed=0)
    model = BranchedModel(blocks, head)
    train(model, train_set, None, cfg.optim, "vanilla", policy=cfg.input_policy, rng=np.random.default_rng(0))
    _inside_impact_verdict(verdict, "CIFAR-10 5k subset, PreAct ResNet-20, 30 epochs", model, test_set)


def test_inside_impact_shape_synthetic(verdict, trained_desk, desk_data):
    model, _ = trained_desk
    _inside_impact_verdict(verdict, "synthetic mirror-pair proxy", model, desk_data[1])


def _inside_impact_verdict(verdict, setting, model, test_set):
    nb = model.num_blocks
    report = inference_impact(model, test_set, {"flip": INFERENCE_TRANSFORMS["flip"]}, spots=[-1, nb - 1, nb])
    at_input = report.row(-1, "flip").top1_err
    pre_pool = report.row(nb - 1, "flip").top1_err
    sentinel = report.row(nb, "flip").top1_err
    plain = evaluate(model, test_set, "vanilla")[0]
    ok = at_input - pre_pool >= 5.0 and sentinel == plain
    verdict(
        6, f"inference inside-impact shape ({setting})", ok,
        f"input {at_input:.2f}, before pooling {pre_pool:.2f}, no changes {sentinel:.2f}, plain eval {plain:.2f}",
    )


def test_timing_methodology(verdict):
    # 55-block PreAct at reduced width so one batch is well above timer resolution
    blocks, head = build_preact_resnet(18, 10, (8, 16, 32), seed=0)
    model = BranchedModel(blocks, head)
    last = model.num_blocks - 1
    configs = [BenchConfig("vanilla", {}, "sum"), BenchConfig("vanilla-again", {}, "sum")]
    for n in range(1, 5):
        configs.append(BenchConfig(f"flip-{n}-max", {last - k: [IDENTITY, FLIP] for k in range(1, n + 1)}, "max"))
    configs.append(BenchConfig("vanilla-tta-sum", {}, "sum", tta=True))
    rows = benchmark(model, configs, batch_size=128, image_shape=(16, 16, 3), warmup=10, timed=50)
    s = {r.name: r.slowdown for r in rows}
    order = [s[f"flip-{n}-max"] for n in range(1, 5)] + [s["vanilla-tta-sum"]]
    ok = (
        abs(s["vanilla-again"] - 1.0) <= 0.02
        and abs(s["vanilla-tta-sum"] - 2.0) <= 0.15
        and all(a < b for a, b in zip(order, order[1:]))
    )
    verdict(7, "benchmark slowdowns", ok, ", ".join(f"{r.name} {r.slowdown:.3f}" for r in rows))


def test_max_training_needs_reduction(verdict):
    # noisier glyphs keep the desk model away from near-zero error
    train_set = synth_shapes(4000, 16, 8, seed=0, noise=0.15)
    test_set = synth_shapes(2000, 16, 8, seed=99, split="test", noise=0.15).with_stats_of(train_set)
    errs = {"vanilla": [], "sum": [], "max": []}
    for seed in range(4):
        base = desk_model(seed)
        view = base.with_branchings({base.num_blocks - 2: [IDENTITY, FLIP]})
        train(view, train_set, None, OptimConfig(**DESK_OPTIM, seed=seed), "max", rng=np.random.default_rng(seed))
        for red in errs:
            errs[red].append(evaluate(view, test_set, red)[0])
    mean = {k: float(np.mean(v)) for k, v in errs.items()}
    ok = mean["sum"] < mean["vanilla"] and mean["max"] < mean["vanilla"]
    detail = ", ".join(f"{k} {mean[k]:.2f} (per seed {', '.join(f'{e:.2f}' for e in v)})" for k, v in errs.items())
    verdict(8, "flip-1-max: sum/max inference beat branch-0 inference", ok, f"mean test error over 4 seeds: {detail}")


def _cli(args, cwd, env):
    return subprocess.run(
        [sys.executable, "-m", "branchnet.cli", *args], cwd=cwd, env=env, capture_output=True, text=True, timeout=600
    )


def test_deterministic_reruns(verdict, tmp_path):
    cfg = {
        "extends": "synth-desk",
        "name": "flip-1-max",
        "dataset": {"n_train": 512, "n_test": 256},
        "input_policy": "cifar_standard",
        "optim": {"epochs": 2},
        "seeds": [0, 1],
    }
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump(cfg))
    env = {**os.environ, "BRANCHNET_DETERMINISTIC": "1"}
    outputs = []
    for rep in ("a", "b"):
        tr = _cli(["train", "--config", "exp.yaml", "--out", f"train_{rep}"], tmp_path, env)
        ev = _cli(
            ["eval", "--config", f"train_{rep}/config.yaml", "--out", f"eval_{rep}",
             "--checkpoint", f"train_{rep}/checkpoints/seed{{seed}}.brnet"],
            tmp_path, env,
        )
        assert tr.returncode == 0 and ev.returncode == 0, tr.stderr + ev.stderr
        outputs.append(
            [(tmp_path / f"{kind}_{rep}" / "metrics.csv").read_bytes() for kind in ("train", "eval")]
        )
    same = outputs[0] == outputs[1]
    verdict(9, "BRANCHNET_DETERMINISTIC reruns are byte-identical", same,
            f"train metrics {len(outputs[0][0])} bytes, eval metrics {len(outputs[0][1])} bytes")


# training constants as stated for the two full-length recipes
RECIPE_CONSTANTS = {
    "cifar100-preact110": dict(
        epochs=180, batch_size=128, lr0=0.1, momentum=0.9, nesterov=False, weight_decay=2e-4,
        schedule=[(82, 10.0), (123, 10.0), (160, 5.0)],
    ),
    "imagenet-resnet18": dict(
        epochs=105, batch_size=256, lr0=0.1, momentum=0.9, nesterov=True, weight_decay=1e-4,
        schedule=[(30, 10.0), (60, 10.0), (90, 10.0), (100, 10.0)],
    ),
}


def test_recipe_fidelity(verdict):
    problems = []
    for preset, constants in RECIPE_CONSTANTS.items():
        echo = dump_echo(load_preset(preset))
        if echo != (GOLDEN / f"{preset}.yaml").read_text():
            problems.append(f"{preset}: echo differs from golden file")
        optim = yaml.safe_load(echo)["optim"]
        for key, want in constants.items():
            got = optim[key]
            if key == "schedule":
                got = [(int(e), float(d)) for e, d in got]
            if got != want:
                problems.append(f"{preset}.{key}: {got!r} != {want!r}")
    verdict(10, "recipe constants in config echoes", not problems, "; ".join(problems) or "both presets match")
