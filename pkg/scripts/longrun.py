"""Opt-in full-length runs of the recipes under ``experiments/``.

    python scripts/longrun.py --data-root /data --out runs [--only cifar100] [--dry-run]

These take days to weeks on a CPU. Each run gets its own directory under
``--out``; a directory whose manifest says ``ok`` is skipped on rerun.
``--data-root`` must hold ``cifar-100-binary/`` and ``imagenet-tensors/``
(the latter as written by ``branchnet gen-data`` or an equivalent exporter).
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

import yaml

ROOT = Path(__file__).resolve().parent.parent
EXPERIMENTS = ROOT / "experiments"

# (subcommand, experiment file); impact/bench reuse the vanilla checkpoints
PLAN = [
    ("train", "cifar100-vanilla.yaml"),
    ("train", "cifar100-flip-1-max.yaml"),
    ("train", "cifar100-flip-2-max.yaml"),
    ("train", "cifar100-flip-3-max.yaml"),
    ("train", "cifar100-flip-4-max.yaml"),
    ("eval", "cifar100-vanilla-tta-sum.yaml"),
    ("eval", "cifar100-flip-4-max-tta.yaml"),
    ("impact", "cifar100-inference-impact.yaml"),
    ("impact", "cifar100-training-impact-flip.yaml"),
    ("bench", "cifar100-bench.yaml"),
    ("train", "imagenet-vanilla.yaml"),
    ("train", "imagenet-flip-3-max-sum.yaml"),
    ("train", "imagenet-flip-only2-none-geo.yaml"),
]

# eval runs reuse the checkpoints of the matching training run
CHECKPOINT_FROM = {
    "cifar100-vanilla-tta-sum.yaml": "cifar100-vanilla-train",
    "cifar100-flip-4-max-tta.yaml": "cifar100-flip-4-max-train",
    "cifar100-inference-impact.yaml": "cifar100-vanilla-train",
}


def resolved_config(exp: Path, data_root: Path, tmp_dir: Path) -> Path:
    """Copy of ``exp`` with the dataset path pointed at ``data_root``."""
    data = yaml.safe_load(exp.read_text())
    extends = str(data.get("extends", ""))
    sub = "imagenet-tensors" if extends.startswith("imagenet") else "cifar-100-binary"
    data.setdefault("dataset", {})["path"] = str(data_root / sub)
    out = tmp_dir / exp.name
    out.write_text(yaml.safe_dump(data, sort_keys=False))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data-root", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--only", help="substring filter on experiment file names")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--dry-run", action="store_true")
    args = ap.parse_args(argv)

    cfg_dir = args.out / "_configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    for sub, name in PLAN:
        if args.only and args.only not in name:
            continue
        run_dir = args.out / f"{Path(name).stem}-{sub}"
        manifest = run_dir / "manifest.json"
        if manifest.exists() and json.loads(manifest.read_text()).get("status") == "ok":
            print(f"skip {run_dir} (done)")
            continue
        cfg = resolved_config(EXPERIMENTS / name, args.data_root, cfg_dir)
        cmd = [sys.executable, "-m", "branchnet.cli", sub, "--config", str(cfg), "--out", str(run_dir)]
        if name in CHECKPOINT_FROM:
            cmd += ["--checkpoint", str(args.out / CHECKPOINT_FROM[name] / "checkpoints" / "seed{seed}.brnet")]
        if args.threads:
            cmd += ["--threads", str(args.threads)]
        print(" ".join(cmd), flush=True)
        if not args.dry_run:
            subprocess.run(cmd, check=True)


if __name__ == "__main__":
    main()
