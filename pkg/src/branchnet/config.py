"""Experiment configs: YAML schema, strict validation, named presets and the
``flip-n-red`` style configuration names.

A config file may start with ``extends: <preset or path>``; the mapping is
deep-merged over that base before validation. The echo written to a run
directory is the fully resolved config (every default filled in, spots as
integers), so a run can be repeated from its echo alone.
"""

import copy
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .core import Reduction
from .impact import INFERENCE_TRANSFORMS, resolve_spot
from .training import POLICIES, OptimConfig
from .transforms import FLIP, IDENTITY, TransformSpec

PRESET_DIR = Path(__file__).parent / "configs"

ARCH_KINDS = ("preact_resnet", "resnet18")
DATASET_KINDS = ("synth_shapes", "cifar10", "cifar100", "tensor_dir")
IMPACT_MODES = ("inference", "training")
TRAINING_IMPACT_KINDS = ("flip", "rotation", "scale")


class ConfigError(ValueError):
    """Schema violation; ``field`` is the dotted path of the offending key."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path or "<root>"
        super().__init__(f"{self.field}: {message}")


# --- configuration names --------------------------------------------------------

_RED = r"(vanilla|none|max|sum|geo)"
_REDS = rf"{_RED}(?:,{_RED})?"
_NAME_PATTERNS = (
    ("vanilla", re.compile(rf"^vanilla(?P<tta>-tta(?:-{_RED})?)?$")),
    ("flip_n", re.compile(rf"^flip-(?P<n>\d+)-{_REDS}(?P<tta>-tta)?$")),
    ("flip_only", re.compile(rf"^flip-only(?P<n>\d+)-{_REDS}(?P<tta>-tta)?$")),
    ("impact", re.compile(rf"^(?P<kind>flip|rotation|scale)-{_REDS}$")),
)


@dataclass(frozen=True)
class NameSpec:
    """What a configuration name promises about the structured fields."""

    family: str  # vanilla | flip_n | flip_only | impact
    n: int = 0
    train_reduction: str = "vanilla"
    infer_reduction: str = "vanilla"
    tta: bool = False
    kind: str = "flip"

    def spot_selectors(self) -> List[str]:
        if self.family == "flip_n":
            return [f"last-{k}" for k in range(self.n, 0, -1)]
        if self.family == "flip_only":
            return [f"last-{self.n}"]
        return []


def parse_name(name: str) -> Optional[NameSpec]:
    """Parse ``vanilla[-tta[-red]]``, ``flip-N-red[,red2][-tta]``,
    ``flip-onlyK-red[,red2][-tta]`` and ``(flip|rotation|scale)-red[,red2]``.

    Returns None for names outside the scheme. A single reduction applies to
    both training and inference; ``a,b`` means train with ``a``, infer with ``b``.
    """
    name = name.strip()
    for family, pattern in _NAME_PATTERNS:
        m = pattern.match(name)
        if not m:
            continue
        groups = [g for g in m.groups() if g in {r.value for r in Reduction}]
        if family == "vanilla":
            tta = m.group("tta") is not None
            red = groups[0] if groups else ("sum" if tta else "vanilla")
            return NameSpec("vanilla", train_reduction="vanilla", infer_reduction=red, tta=tta)
        train_red = groups[0]
        infer_red = groups[1] if len(groups) > 1 else train_red
        if infer_red == "none":
            raise ConfigError("name", f"{name!r}: 'none' is a training mode and cannot be the inference reduction")
        if family == "impact":
            return NameSpec("impact", 0, train_red, infer_red, False, m.group("kind"))
        n = int(m.group("n"))
        if n < 1:
            raise ConfigError("name", f"{name!r}: branch count must be >= 1")
        return NameSpec(family, n, train_red, infer_red, m.group("tta") is not None)
    if re.match(r"^(vanilla|flip|rotation|scale)\b-", name):
        # looks like the scheme but does not parse: most likely a bad reduction
        bad = [t for t in re.split(r"[-,]", name) if t.isalpha() and t not in _KNOWN_TOKENS]
        if bad:
            raise ConfigError("name", f"{name!r}: unknown reduction {bad[0]!r}")
    return None


_KNOWN_TOKENS = {"vanilla", "flip", "rotation", "scale", "tta"} | {r.value for r in Reduction}


# --- schema ---------------------------------------------------------------------


@dataclass
class ArchConfig:
    kind: str = "preact_resnet"
    depth_n: int = 18
    widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    width: int = 64
    small_input: bool = False
    num_classes: int = 100

    def validate(self, path):
        _choice(f"{path}.kind", self.kind, ARCH_KINDS)
        _positive(f"{path}.depth_n", self.depth_n)
        _positive(f"{path}.width", self.width)
        _positive(f"{path}.num_classes", self.num_classes)
        if not self.widths or any(not isinstance(w, int) or w < 1 for w in self.widths):
            raise ConfigError(f"{path}.widths", "must be a non-empty list of positive integers")

    @property
    def num_blocks(self) -> int:
        if self.kind == "resnet18":
            return 10
        return 1 + len(self.widths) * self.depth_n

    @property
    def before_spots(self) -> List[int]:
        if self.kind == "resnet18":
            return [1, 3, 5, 7]
        return [0] + [s * self.depth_n for s in range(1, len(self.widths))]


@dataclass
class DatasetConfig:
    kind: str = "synth_shapes"
    path: Optional[str] = None
    per_class: Optional[int] = None
    n_train: int = 4000
    n_test: int = 1000
    size: int = 32
    num_classes: int = 8
    seed: int = 0
    # pixel noise std of the synthetic glyphs
    noise: float = 0.03
    # filled from the train split when absent; echoed so reruns match exactly
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None

    def validate(self, path):
        _choice(f"{path}.kind", self.kind, DATASET_KINDS)
        if self.kind != "synth_shapes" and not self.path:
            raise ConfigError(f"{path}.path", f"required for dataset kind {self.kind!r}")
        if self.per_class is not None:
            _positive(f"{path}.per_class", self.per_class)
        for name in ("n_train", "n_test", "size", "num_classes"):
            _positive(f"{path}.{name}", getattr(self, name))
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"{path}.noise", "must lie in [0, 1]")
        for name in ("mean", "std"):
            v = getattr(self, name)
            if v is not None and (len(v) != 3 or not all(isinstance(x, (int, float)) for x in v)):
                raise ConfigError(f"{path}.{name}", "must be a list of 3 numbers")


@dataclass
class BranchingConfig:
    spot: Any = "last-1"
    transforms: List[TransformSpec] = field(default_factory=lambda: [IDENTITY, FLIP])


@dataclass
class ImpactSection:
    mode: str = "inference"
    transforms: List[str] = field(default_factory=lambda: ["flip"])
    spots: Any = "all"
    reductions: List[str] = field(default_factory=lambda: ["none", "geo"])
    checkpoint: Optional[str] = None

    def validate(self, path):
        _choice(f"{path}.mode", self.mode, IMPACT_MODES)
        allowed = tuple(INFERENCE_TRANSFORMS) if self.mode == "inference" else TRAINING_IMPACT_KINDS
        for i, t in enumerate(self.transforms):
            _choice(f"{path}.transforms[{i}]", t, allowed)
        if len(self.reductions) != 2:
            raise ConfigError(f"{path}.reductions", "must be [train_reduction, infer_reduction]")
        for i, r in enumerate(self.reductions):
            self.reductions[i] = _reduction(f"{path}.reductions[{i}]", r)
        if self.reductions[1] == "none":
            raise ConfigError(f"{path}.reductions[1]", "'none' is a training mode, not an inference reduction")


@dataclass
class BenchSection:
    configs: List[str] = field(
        default_factory=lambda: ["vanilla", "flip-1-max", "flip-2-max", "flip-3-max", "flip-4-max", "vanilla-tta-sum"]
    )
    batch_size: int = 128
    warmup: int = 10
    timed: int = 50

    def validate(self, path):
        for name in ("batch_size", "timed"):
            _positive(f"{path}.{name}", getattr(self, name))
        if self.warmup < 0:
            raise ConfigError(f"{path}.warmup", "must be >= 0")
        if "vanilla" not in self.configs or len(self.configs) < 2:
            raise ConfigError(f"{path}.configs", "needs at least two entries including 'vanilla'")
        for i, c in enumerate(self.configs):
            if parse_name(c) is None or parse_name(c).family == "impact":
                raise ConfigError(f"{path}.configs[{i}]", f"{c!r} is not a vanilla/flip configuration name")


@dataclass
class ExperimentConfig:
    name: str = "vanilla"
    arch: ArchConfig = field(default_factory=ArchConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    input_policy: str = "cifar_standard"
    branchings: List[BranchingConfig] = field(default_factory=list)
    train_reduction: str = "vanilla"
    infer_reduction: str = "vanilla"
    tta: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    eval_batch_size: int = 256
    checkpoint_every: int = 0
    impact: ImpactSection = field(default_factory=ImpactSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def resolved_branchings(self) -> Dict[int, List[TransformSpec]]:
        nb = self.arch.num_blocks
        before = self.arch.before_spots
        return {resolve_spot(nb, b.spot, before): list(b.transforms) for b in self.branchings}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "arch": _plain(self.arch),
            "dataset": _plain(self.dataset),
            "input_policy": self.input_policy,
            "branchings": [
                {"spot": s, "transforms": [t.to_dict() for t in specs]}
                for s, specs in sorted(self.resolved_branchings().items())
            ],
            "train_reduction": self.train_reduction,
            "infer_reduction": self.infer_reduction,
            "tta": self.tta,
            "optim": self.optim.to_dict(),
            "seeds": list(self.seeds),
            "eval_batch_size": self.eval_batch_size,
            "checkpoint_every": self.checkpoint_every,
            "impact": _plain(self.impact),
            "bench": _plain(self.bench),
        }


def _plain(obj) -> dict:
    return {f.name: copy.deepcopy(getattr(obj, f.name)) for f in fields(obj)}


def _choice(path, value, allowed):
    if value not in allowed:
        raise ConfigError(path, f"{value!r} is not one of {list(allowed)}")


def _positive(path, value):
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(path, f"must be a positive integer, got {value!r}")


def _reduction(path, value) -> str:
    try:
        return Reduction.parse(value).value
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


# --- loading --------------------------------------------------------------------


_SCALAR_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _section(cls, data, path):
    """Build dataclass ``cls`` from ``data``; unknown keys and wrong scalar types fail."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, f"unknown key (allowed: {sorted(known)})")
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        want = _SCALAR_TYPES.get(f.type if isinstance(f.type, type) else None)
        if want and (not isinstance(value, want) or (bool not in want and isinstance(value, bool))):
            raise ConfigError(f"{path}.{key}" if path else key, f"expected {f.type.__name__}, got {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def _transform(value, path) -> TransformSpec:
    if isinstance(value, str):
        shorthand = {"identity": IDENTITY, "flip": FLIP, "flip_h": FLIP}
        if value not in shorthand:
            raise ConfigError(path, f"unknown transform shorthand {value!r}")
        return shorthand[value]
    if not isinstance(value, dict):
        raise ConfigError(path, "expected a transform mapping or shorthand string")
    try:
        return TransformSpec.from_dict(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_path(name: str) -> Path:
    p = PRESET_DIR / f"{name}.yaml"
    if not p.exists():
        available = sorted(q.stem for q in PRESET_DIR.glob("*.yaml"))
        raise ConfigError("extends", f"no preset {name!r} (available: {available})")
    return p


def load_raw(path, _seen=()) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("", f"{path}: top level must be a mapping")
    base_ref = data.pop("extends", None)
    if base_ref is None:
        return data
    base_path = Path(base_ref) if str(base_ref).endswith((".yaml", ".yml")) else preset_path(str(base_ref))
    if not base_path.is_absolute() and not base_path.exists():
        base_path = path.parent / base_path
    if base_path.resolve() in _seen:
        raise ConfigError("extends", f"cycle through {base_path}")
    base = load_raw(base_path, _seen + (path.resolve(),))
    return _deep_merge(base, data)


def parse_config(path) -> ExperimentConfig:
    return config_from_dict(load_raw(path))


def load_preset(name: str) -> ExperimentConfig:
    return parse_config(preset_path(name))


def config_from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data)
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key (allowed: {sorted(top)})")

    name = data.get("name", "vanilla")
    if not isinstance(name, str) or not name:
        raise ConfigError("name", "must be a non-empty string")
    arch = _section(ArchConfig, data.get("arch"), "arch")
    arch.validate("arch")
    dataset = _section(DatasetConfig, data.get("dataset"), "dataset")
    dataset.validate("dataset")
    spec = parse_name(name)
    impact_raw = data.get("impact")
    if spec is not None and spec.family == "impact" and (impact_raw is None or isinstance(impact_raw, dict)):
        implied = {"mode": "training", "transforms": [spec.kind], "reductions": [spec.train_reduction, spec.infer_reduction]}
        impact_raw = {**implied, **(impact_raw or {})}
    impact = _section(ImpactSection, impact_raw, "impact")
    impact.validate("impact")
    bench = _section(BenchSection, data.get("bench"), "bench")
    bench.validate("bench")

    optim_raw = data.get("optim") or {}
    if not isinstance(optim_raw, dict):
        raise ConfigError("optim", "expected a mapping")
    known = {f.name for f in fields(OptimConfig)}
    bad = sorted(set(optim_raw) - known)
    if bad:
        raise ConfigError(f"optim.{bad[0]}", f"unknown key (allowed: {sorted(known)})")
    if "schedule" in optim_raw:
        sched = optim_raw["schedule"]
        if not isinstance(sched, list) or any(not isinstance(s, (list, tuple)) or len(s) != 2 for s in sched):
            raise ConfigError("optim.schedule", "must be a list of [epoch, divisor] pairs")
    try:
        optim = OptimConfig(**optim_raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError("optim", str(exc)) from None

    policy = data.get("input_policy", "cifar_standard")
    _choice("input_policy", policy, POLICIES)

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or any(not isinstance(s, int) or isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of integers")
    for key in ("eval_batch_size",):
        _positive(key, data.get(key, 256))
    checkpoint_every = data.get("checkpoint_every", 0)
    if not isinstance(checkpoint_every, int) or checkpoint_every < 0:
        raise ConfigError("checkpoint_every", "must be an integer >= 0")
    tta_raw = data.get("tta")
    if tta_raw is not None and not isinstance(tta_raw, bool):
        raise ConfigError("tta", f"expected true/false, got {tta_raw!r}")

    nb, before = arch.num_blocks, arch.before_spots
    impact_spots(impact, arch)

    # branchings: explicit or implied by the name
    if "branchings" in data:
        raw = data["branchings"] or []
        if not isinstance(raw, list):
            raise ConfigError("branchings", "expected a list")
        branchings = []
        for i, b in enumerate(raw):
            p = f"branchings[{i}]"
            if not isinstance(b, dict) or set(b) - {"spot", "transforms"} or "spot" not in b:
                raise ConfigError(p, "expected a mapping with keys 'spot' and 'transforms'")
            ts = b.get("transforms", ["identity", "flip"])
            if not isinstance(ts, list) or not ts:
                raise ConfigError(f"{p}.transforms", "must be a non-empty list")
            specs = [_transform(t, f"{p}.transforms[{j}]") for j, t in enumerate(ts)]
            branchings.append(BranchingConfig(b["spot"], specs))
    else:
        branchings = [BranchingConfig(sel, [IDENTITY, FLIP]) for sel in (spec.spot_selectors() if spec else [])]

    resolved = {}
    for i, b in enumerate(branchings):
        try:
            s = resolve_spot(nb, b.spot, before)
        except ValueError as exc:
            raise ConfigError(f"branchings[{i}].spot", str(exc)) from None
        if s >= nb:
            raise ConfigError(f"branchings[{i}].spot", f"spot {s} is the 'no changes' sentinel; nothing to branch")
        if s in resolved:
            raise ConfigError(f"branchings[{i}].spot", f"spot {s} listed twice")
        resolved[s] = b.transforms

    default_train = spec.train_reduction if spec and spec.family != "impact" else "vanilla"
    default_infer = spec.infer_reduction if spec and spec.family != "impact" else None
    train_red = _reduction("train_reduction", data.get("train_reduction", default_train))
    infer_default = default_infer if default_infer is not None else ("geo" if train_red == "none" else train_red)
    infer_red = _reduction("infer_reduction", data.get("infer_reduction", infer_default))
    if infer_red == "none":
        raise ConfigError("infer_reduction", "'none' is a training mode; use vanilla, max, sum or geo")
    tta = tta_raw if tta_raw is not None else bool(spec.tta if spec else False)

    cfg = ExperimentConfig(
        name=name,
        arch=arch,
        dataset=dataset,
        input_policy=policy,
        branchings=[BranchingConfig(s, resolved[s]) for s in sorted(resolved)],
        train_reduction=train_red,
        infer_reduction=infer_red,
        tta=tta,
        optim=optim,
        seeds=list(seeds),
        eval_batch_size=data.get("eval_batch_size", 256),
        checkpoint_every=checkpoint_every,
        impact=impact,
        bench=bench,
    )
    if spec is not None:
        check_name(cfg, spec)
    return cfg


def impact_spots(impact: ImpactSection, arch: ArchConfig) -> List[int]:
    """Resolved spots of the impact section; "all" means every spot plus the sentinel."""
    nb = arch.num_blocks
    if impact.spots == "all":
        return list(range(-1, nb + 1))
    if not isinstance(impact.spots, list) or not impact.spots:
        raise ConfigError("impact.spots", "must be 'all' or a non-empty list of spot selectors")
    out = []
    for i, sel in enumerate(impact.spots):
        try:
            out.append(resolve_spot(nb, sel, arch.before_spots))
        except ValueError as exc:
            raise ConfigError(f"impact.spots[{i}]", str(exc)) from None
    return out


def check_name(cfg: ExperimentConfig, spec: NameSpec) -> None:
    """Raise ConfigError when the structured fields contradict the name."""
    name = cfg.name
    if spec.family == "impact":
        if cfg.impact.mode != "training":
            raise ConfigError("impact.mode", f"name {name!r} describes a training-impact run")
        if cfg.impact.transforms != [spec.kind]:
            raise ConfigError("impact.transforms", f"{cfg.impact.transforms} contradicts name {name!r}")
        if cfg.impact.reductions != [spec.train_reduction, spec.infer_reduction]:
            raise ConfigError("impact.reductions", f"{cfg.impact.reductions} contradicts name {name!r}")
        return
    nb, before = cfg.arch.num_blocks, cfg.arch.before_spots
    expected = sorted(resolve_spot(nb, s, before) for s in spec.spot_selectors())
    actual = cfg.resolved_branchings()
    if sorted(actual) != expected:
        raise ConfigError("branchings", f"spots {sorted(actual)} contradict name {name!r} (expects {expected})")
    for s, specs in actual.items():
        if [t.kind for t in specs] != ["identity", "flip_h"]:
            raise ConfigError("branchings", f"spot {s}: name {name!r} implies [identity, flip_h]")
    if cfg.train_reduction != spec.train_reduction:
        raise ConfigError("train_reduction", f"{cfg.train_reduction!r} contradicts name {name!r}")
    if cfg.infer_reduction != spec.infer_reduction:
        raise ConfigError("infer_reduction", f"{cfg.infer_reduction!r} contradicts name {name!r}")
    if cfg.tta != spec.tta:
        raise ConfigError("tta", f"{cfg.tta} contradicts name {name!r}")


def bench_entry(cfg: ExperimentConfig, name: str) -> Tuple[Dict[int, List[TransformSpec]], str, bool]:
    """(branchings, inference reduction, tta) for a benchmark config name."""
    spec = parse_name(name)
    if spec is None or spec.family == "impact":
        raise ConfigError("bench.configs", f"{name!r} is not a vanilla/flip configuration name")
    nb, before = cfg.arch.num_blocks, cfg.arch.before_spots
    branchings = {resolve_spot(nb, s, before): [IDENTITY, FLIP] for s in spec.spot_selectors()}
    return branchings, spec.infer_reduction, spec.tta


def dump_echo(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
