"""Inside-impact sweeps and the inference slowdown benchmark.

Spot numbering follows :class:`~branchnet.core.BranchedModel`: ``-1`` is the
input image, ``j`` the output of block ``j`` (block 0 is the stem) and
``model.sentinel`` stands for "no changes".
"""

import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BranchedModel, Reduction, infer, tta_infer
from .data import Dataset
from .tensor import Tensor
from .training import OptimConfig, evaluate, train
from .transforms import FLIP, IDENTITY, TransformSpec

log = logging.getLogger(__name__)

# inference-impact settings: 15 degree rotation, 10% zoom in/out
INFERENCE_TRANSFORMS = {
    "flip": FLIP,
    "rotation": TransformSpec("rotate", angle_deg=15.0),
    "zoom_out": TransformSpec("scale", factor=0.9),
    "zoom_in": TransformSpec("scale", factor=1.1),
}

ROTATION_RANGE = (-20.0, 20.0)
SCALE_RANGE = (0.8, 1.25)
INFERENCE_ANGLE = 15.0


def before_spots(model: BranchedModel) -> List[int]:
    """Spot feeding the first block of each stage ("before n" is entry n-1)."""
    out = []
    for i, block in enumerate(model.blocks):
        if hasattr(block, "downsamples") and (not out or block.downsamples):
            out.append(i - 1)
    return out


def spot_label(model: BranchedModel, spot: int) -> str:
    if spot == -1:
        return "input image"
    if spot == model.sentinel:
        return "no changes"
    if spot == model.num_blocks - 1:
        return "before global pooling"
    before = before_spots(model)
    if spot in before:
        return f"before {before.index(spot) + 1}"
    return f"block {spot}"


def resolve_spot(num_blocks: int, selector, before: Sequence[int] = ()) -> int:
    """Turn a spot selector into an integer spot.

    Accepts integers, ``"input"``, ``"before_global_pool"``, ``"no_changes"``,
    ``"last-K"`` (K-th spot counting back from the final block, so ``last-1``
    feeds the final block) and ``"before-N"`` (looked up in ``before``).
    """
    if isinstance(selector, (int, np.integer)) and not isinstance(selector, bool):
        spot = int(selector)
    else:
        s = str(selector).strip().lower().replace(" ", "_")
        try:
            if s in ("input", "input_image"):
                spot = -1
            elif s in ("before_global_pool", "before_global_pooling"):
                spot = num_blocks - 1
            elif s in ("no_changes", "sentinel"):
                spot = num_blocks
            elif s.startswith("last-"):
                spot = num_blocks - 1 - int(s[5:])
            elif s.startswith("before-"):
                n = int(s[7:])
                if not 1 <= n <= len(before):
                    raise ValueError(f"no spot 'before {n}' in this architecture")
                spot = before[n - 1]
            else:
                spot = int(s)
        except ValueError as exc:
            if "before" in str(exc):
                raise
            raise ValueError(f"unrecognised spot selector {selector!r}") from None
    if not -1 <= spot <= num_blocks:
        raise ValueError(f"spot {spot} (from {selector!r}) out of range [-1, {num_blocks}]")
    return spot


@dataclass
class ImpactRow:
    spot: int
    spot_label: str
    transform: str
    mode: str
    top1_err: float
    top5_err: float
    runs: int = 1
    stderr: float = 0.0


IMPACT_COLUMNS = [f.name for f in ImpactRow.__dataclass_fields__.values()]


@dataclass
class ImpactReport:
    rows: List[ImpactRow] = field(default_factory=list)

    def as_dicts(self):
        return [asdict(r) for r in self.rows]

    def row(self, spot, transform, mode="inference") -> ImpactRow:
        for r in self.rows:
            if r.spot == spot and r.transform == transform and r.mode == mode:
                return r
        raise KeyError((spot, transform, mode))


def inference_impact(
    model: BranchedModel,
    dataset: Dataset,
    transforms: Dict[str, TransformSpec],
    spots: Optional[Sequence[int]] = None,
    batch_size: int = 256,
    rng=None,
) -> ImpactReport:
    """Error when each transform is applied once at each spot of a trained model.

    ``spots`` defaults to every spot plus the sentinel; the sentinel row is
    plain evaluation.
    """
    base = model.with_branchings(None)
    spots = list(spots) if spots is not None else base.spots() + [base.sentinel]
    report = ImpactReport()
    plain = None
    for name, spec in transforms.items():
        for spot in spots:
            if not -1 <= spot <= base.sentinel:
                raise ValueError(f"spot {spot} out of range [-1, {base.sentinel}]")
            if spot == base.sentinel:
                if plain is None:
                    plain = evaluate(base, dataset, Reduction.VANILLA, batch_size=batch_size)
                top1, top5, _ = plain
            else:
                view = base.with_branchings({spot: [spec]})
                top1, top5, _ = evaluate(view, dataset, Reduction.VANILLA, batch_size=batch_size, rng=rng)
            report.rows.append(ImpactRow(spot, spot_label(base, spot), name, "inference", top1, top5))
            log.info("impact %s spot %d: top1 %.2f", name, spot, top1)
    return report


def training_branch_specs(kind: str) -> Tuple[List[TransformSpec], List[TransformSpec]]:
    """(training specs, inference specs) for a 2-way training-impact branch."""
    if kind == "flip":
        return [IDENTITY, FLIP], [IDENTITY, FLIP]
    if kind == "rotation":
        rot = TransformSpec("rotate", random_range=ROTATION_RANGE)
        return [rot, rot], [IDENTITY, TransformSpec("rotate", angle_deg=INFERENCE_ANGLE)]
    if kind == "scale":
        sc = TransformSpec("scale", random_range=SCALE_RANGE)
        return [sc, sc], [IDENTITY, TransformSpec("scale", random_range=SCALE_RANGE, sample_in_eval=True)]
    raise ValueError(f"unknown training-impact transform {kind!r}; expected flip, rotation or scale")


def training_impact(
    build_model: Callable[[int], BranchedModel],
    train_set: Dataset,
    test_set: Dataset,
    kind: str,
    spot: int,
    cfg: OptimConfig,
    reductions: Tuple[str, str] = ("none", "geo"),
    seeds: Sequence[int] = (0,),
    policy: str = "none",
) -> ImpactRow:
    """Train with a 2-way branch at ``spot`` and evaluate the inference pair.

    ``build_model(seed)`` must return a fresh unbranched model.
    """
    train_specs, eval_specs = training_branch_specs(kind)
    top1s, top5s = [], []
    label = None
    for seed in seeds:
        base = build_model(seed)
        if not -1 <= spot <= base.sentinel:
            raise ValueError(f"spot {spot} out of range [-1, {base.sentinel}]")
        label = spot_label(base, spot)
        rng = np.random.default_rng(seed)
        if spot == base.sentinel:
            train(base, train_set, None, cfg, Reduction.VANILLA, policy=policy, rng=rng)
            t1, t5, _ = evaluate(base, test_set, Reduction.VANILLA)
        else:
            model = base.with_branchings({spot: train_specs})
            train(model, train_set, None, cfg, reductions[0], policy=policy, rng=rng)
            view = base.with_branchings({spot: eval_specs})
            t1, t5, _ = evaluate(view, test_set, reductions[1], rng=np.random.default_rng(seed + 1))
        top1s.append(t1)
        top5s.append(t5)
    n = len(top1s)
    se = statistics.stdev(top1s) / math.sqrt(n) if n > 1 else 0.0
    return ImpactRow(
        spot, label, f"{kind}-{reductions[0]},{reductions[1]}", "training",
        float(np.mean(top1s)), float(np.mean(top5s)), n, se,
    )


# --- timing ---------------------------------------------------------------------------


@dataclass
class BenchConfig:
    name: str
    branchings: Dict[int, List[TransformSpec]] = field(default_factory=dict)
    reduction: str = "sum"
    tta: bool = False


@dataclass
class TimingRow:
    name: str
    ms_per_batch: float
    slowdown: float
    flops_ratio: float
    samples_ms: List[float] = field(repr=False, default_factory=list)


class TimerResolutionError(RuntimeError):
    pass


MIN_BATCH_MS = 1.0


def benchmark(
    model: BranchedModel,
    configs: Sequence[BenchConfig],
    batch_size: int = 128,
    image_shape=(32, 32, 3),
    warmup: int = 10,
    timed: int = 50,
    seed: int = 0,
    vanilla: str = "vanilla",
) -> List[TimingRow]:
    """Median eval-mode wall time per batch for each config, and slowdowns.

    After ``warmup`` untimed batches per config, the configs are timed
    round-robin for ``timed`` rounds so slow drifts hit every config alike.
    The slowdown divides each median by that of the config named ``vanilla``.
    """
    names = [c.name for c in configs]
    if len(configs) < 2 or vanilla not in names:
        raise ValueError("benchmark needs at least two configs including the vanilla one")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch_size,) + tuple(image_shape)).astype(np.float32))
    views = [model.with_branchings(c.branchings) for c in configs]

    def run(i):
        c = configs[i]
        if c.tta:
            tta_infer(views[i], x, c.reduction, rng)
        else:
            infer(views[i], x, c.reduction, rng)

    for i in range(len(configs)):
        for _ in range(warmup):
            run(i)
    samples = [[] for _ in configs]
    for _ in range(timed):
        for i in range(len(configs)):
            t0 = time.perf_counter()
            run(i)
            samples[i].append(1000.0 * (time.perf_counter() - t0))
    medians = [statistics.median(s) for s in samples]
    if min(medians) < MIN_BATCH_MS:
        raise TimerResolutionError(
            f"median batch time {min(medians):.3f} ms is too short to time reliably; use a larger batch"
        )
    base_ms = medians[names.index(vanilla)]
    shape = (batch_size,) + tuple(image_shape)
    base_flops = model.with_branchings(None).flops(shape)[0]
    rows = []
    for c, v, med, s in zip(configs, views, medians, samples):
        fl = v.flops(shape)[0] * (2 if c.tta else 1)
        rows.append(TimingRow(c.name, med, med / base_ms, fl / base_flops, s))
    return rows
