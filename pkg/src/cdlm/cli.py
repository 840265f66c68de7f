"""``cdlm`` command line: gen-data, train, eval, ablate.

Each command writes into one output directory that starts with a
``manifest.json``. Failures print a single JSON line on stderr and exit
non-zero.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (BLENDS, SPLITS, DatasetSpec, DomainBatch, DomainPair, export_pair, gen_synthetic_pair, load_idx,
                   load_pair)
from .errors import CDLMError, UsageError
from .model import NetConfig
from .trainer import PRESETS, TrainConfig, fit, format_config, net_config_from_strings, parse_config_text, resume

log = logging.getLogger("cdlm")

MANIFEST = "manifest.json"
DATA_ENV = "CDLM_DATA_DIR"
# per-component seed offsets from the single --seed flag
CLASSIFIER_SEED_OFFSET = 2
EVAL_SEED_OFFSET = 3


# -- manifest ------------------------------------------------------------------------
def hash_paths(paths, root: Path | None = None) -> str:
    """sha256 over (relative name, bytes) of every file, in sorted order."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        p = Path(p)
        files += sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
    for f in sorted(files, key=lambda f: str(f.relative_to(root)) if root else str(f)):
        if f.name == MANIFEST:
            continue
        h.update(str(f.relative_to(root) if root else f.name).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def hash_config(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    input_hash: str
    out_dir: str
    started: float = field(default_factory=time.time)
    finished: float | None = None
    output_hash: str | None = None
    status: str = "running"
    version: str = __version__

    def write(self) -> Path:
        path = Path(self.out_dir) / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    def finish(self) -> Path:
        self.finished = time.time()
        self.output_hash = hash_paths([self.out_dir], root=Path(self.out_dir))
        self.status = "complete"
        return self.write()

    @classmethod
    def read(cls, out_dir) -> "RunManifest":
        return cls(**json.loads((Path(out_dir) / MANIFEST).read_text()))


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- data resolution ----------------------------------------------------------------------
def _split_tail(batch: DomainBatch, fraction: float = 0.2) -> tuple[DomainBatch, DomainBatch]:
    cut = len(batch) - max(1, int(round(len(batch) * fraction)))
    return batch.subset(slice(0, cut)), batch.subset(slice(cut, None))


def resolve_data(args) -> tuple[DomainPair, list[Path]]:
    """Dataset directory (flag, then $CDLM_DATA_DIR) or explicit IDX files."""
    if getattr(args, "source_images", None):
        if not args.target_images:
            raise UsageError("--source-images needs --target-images")
        src = load_idx(args.source_images, args.source_labels, channels=3)
        tgt = load_idx(args.target_images, args.target_labels, channels=3)
        inputs = [Path(p) for p in (args.source_images, args.source_labels, args.target_images, args.target_labels) if p]
        return DomainPair(*_split_tail(src), *_split_tail(tgt)), inputs
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no dataset: pass --data, set {DATA_ENV}, or give IDX paths")
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    return load_pair(root), [root / s for s in SPLITS]


def _train_config(args) -> tuple[TrainConfig, NetConfig]:
    # preset, then config file, then flags; later keys win
    text = PRESETS[args.preset] if args.preset else ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        text += "\n" + path.read_text()
    cfg, net = parse_config_text(text)
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = cfg.replace(**overrides)
    net_over = {k: v for k, v in (("h_tap", args.h_tap), ("z_dim", args.z_dim), ("h_gain", args.h_gain),
                                  ("conv", args.conv)) if v is not None}
    if net_over:
        net = net_config_from_strings({**_net_strings(net), **net_over})
    return cfg, net


def _net_strings(net: NetConfig) -> dict[str, str]:
    lines = format_config(TrainConfig(), net).splitlines()
    keys = {"z_dim", "disc_hidden", "slope", "h_tap", "h_gain", "conv"}
    out = {}
    for line in lines:
        k, v = (s.strip() for s in line.split("=", 1))
        if k in keys:
            out[k] = v
    return out


def _config_snapshot(cfg: TrainConfig, net: NetConfig) -> dict:
    return {"train": dataclasses.asdict(cfg), "net": net.to_dict()}


# -- commands --------------------------------------------------------------------------
def cmd_gen_data(args) -> Path:
    spec = DatasetSpec(num_classes=args.classes, image_shape=(3, args.size, args.size), n_train=args.n_train,
                       n_test=args.n_test, seed=args.seed, blend=args.blend)
    out = prepare_out(args.out, args.force)
    config = {"num_classes": spec.num_classes, "image_shape": list(spec.image_shape), "n_train": spec.n_train,
              "n_test": spec.n_test, "seed": spec.seed, "kind": spec.kind.value, "blend": spec.blend}
    manifest = RunManifest("gen-data", config, args.seed, hash_config(config), str(out))
    manifest.write()
    export_pair(gen_synthetic_pair(spec), out)
    manifest.finish()
    return out


def _classifier(pair: DomainPair, seed: int):
    from .evaluation import train_source_classifier

    return train_source_classifier(pair.source_train, seed=seed + CLASSIFIER_SEED_OFFSET)


def cmd_train(args) -> Path:
    from .evaluation import adaptation_accuracy, write_adaptation_mosaic

    cfg, net = _train_config(args)
    pair, inputs = resolve_data(args)
    out = prepare_out(args.out, args.force)
    snapshot = _config_snapshot(cfg, net)
    manifest = RunManifest("train", snapshot, cfg.seed, hash_paths(inputs) + ":" + hash_config(snapshot), str(out))
    manifest.write()
    (out / "config.txt").write_text(format_config(cfg, net))
    clf = _classifier(pair, cfg.seed) if cfg.steps > 0 else None

    def periodic(state) -> dict:
        write_adaptation_mosaic(state.model, pair.target_test, out / f"adapted_{state.step:06d}.ppm",
                                cfg.gamma1, cfg.gamma2, seed=cfg.seed + EVAL_SEED_OFFSET)
        acc = adaptation_accuracy(state.model, clf, pair.target_test, cfg.gamma1, cfg.gamma2,
                                  seed=cfg.seed + EVAL_SEED_OFFSET)
        return {"adapted_acc": acc}

    fit(cfg, pair.source_train, pair.target_train, net=net, out_dir=out, eval_fn=periodic if clf else None)
    manifest.finish()
    return out


def cmd_eval(args) -> Path:
    from .evaluation import (Classifier, evaluate, export_embeddings, train_source_classifier, verify_moments,
                             write_adaptation_mosaic)

    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if ckpt is None or not ckpt.is_file():
        raise UsageError(f"checkpoint {args.checkpoint!r} not found")
    state = resume(ckpt)
    model, cfg = state.model, state.config
    pair, inputs = resolve_data(args)
    out = prepare_out(args.out, args.force)
    seed = cfg.seed if args.seed is None else args.seed
    config = {"checkpoint": str(ckpt), "gamma1": cfg.gamma1, "gamma2": cfg.gamma2, "seed": seed,
              "a_distance": args.a_distance, "a_distance_on": args.a_distance_on,
              "verify_moments": args.verify_moments, "export_embeddings": args.export_embeddings}
    manifest = RunManifest("eval", config, seed, hash_paths(inputs + [ckpt]) + ":" + hash_config(config), str(out))
    manifest.write()
    clf = _classifier(pair, seed)
    target_only: Classifier = train_source_classifier(pair.target_train, seed=seed + CLASSIFIER_SEED_OFFSET,
                                                      num_classes=clf.num_classes)
    report = evaluate(model, pair, clf, target_only, cfg.gamma1, cfg.gamma2, seed=seed + EVAL_SEED_OFFSET,
                      with_a_distance=args.a_distance, a_distance_on=args.a_distance_on)
    report.write_csv(out / "eval_report.csv")
    write_adaptation_mosaic(model, pair.target_test, out / "adapted.ppm", cfg.gamma1, cfg.gamma2,
                            seed=seed + EVAL_SEED_OFFSET)
    if args.export_embeddings:
        export_embeddings(model, pair.source_test, pair.target_test, out / "embeddings.csv", cfg.gamma1,
                          cfg.gamma2, seed=seed)
    if args.verify_moments:
        rep = verify_moments(model, pair.target_test.images[:256], cfg.gamma1, cfg.gamma2,
                             n_samples=args.moment_samples, seed=seed)
        with (out / "moments.csv").open("w") as fh:
            fh.write("coordinate,mean_z,var_z\n")
            for i, (a, b) in enumerate(zip(rep.mean_z, rep.var_z)):
                fh.write(f"{i},{a!r},{b!r}\n")
            fh.write(f"max_abs_z,{rep.max_abs_z!r},{'pass' if rep.passed else 'fail'}\n")
    manifest.finish()
    return out


def cmd_ablate(args) -> Path:
    from .evaluation import consistency_grid, depth_grid, gamma_grid, run_ablations

    cfg, net = _train_config(args)
    pair, inputs = resolve_data(args)
    out = prepare_out(args.out, args.force)
    families = ["gamma", "consistency", "depth"] if args.grid == "all" else [args.grid]
    builders = {"gamma": gamma_grid, "consistency": consistency_grid, "depth": depth_grid}
    cells = [c for fam in families for c in builders[fam](cfg, net)]
    if args.cells:
        # commas inside "(g1,g2)" labels are not separators
        wanted = {c.strip() for c in re.split(r",(?![^()]*\))", args.cells)}
        cells = [c for c in cells if c.label in wanted]
        if not cells:
            raise UsageError(f"no grid cell matches {sorted(wanted)}")
    snapshot = {**_config_snapshot(cfg, net), "grid": families, "cells": [c.label for c in cells]}
    manifest = RunManifest("ablate", snapshot, cfg.seed, hash_paths(inputs) + ":" + hash_config(snapshot), str(out))
    manifest.write()
    clf = _classifier(pair, cfg.seed)
    dirs = [out / "cells" / f"{i:02d}_{c.family}_{_slug(c.label)}" for i, c in enumerate(cells)]
    run_ablations(cells, pair, clf, out_csv=out / "ablation.csv", jobs=args.jobs, cell_dirs=dirs)
    manifest.finish()
    return out


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in text).strip("_")


# -- parser --------------------------------------------------------------------------------
def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    p.add_argument("--source-images")
    p.add_argument("--source-labels")
    p.add_argument("--target-images")
    p.add_argument("--target-labels", help="only read for scoring")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="named overrides, applied before --config")
    p.add_argument("--config", help="key = value file; flags override it")
    for f in dataclasses.fields(TrainConfig):
        typ = {"int": int, "float": float, "str": str}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=typ, default=None,
                       help=f"default {f.default}")
    p.add_argument("--h-tap", default=None, help="conv layer feeding h (1-based or 'last')")
    p.add_argument("--h-gain", default=None)
    p.add_argument("--z-dim", default=None)
    p.add_argument("--conv", default=None, help="e.g. 16:3:2,32:3:2,64:3:2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic clean/noisy glyph pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--blend", choices=list(BLENDS), default="add", help="how glyphs sit on the target background")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model; writes trace, checkpoints, eval rows, mosaics")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--a-distance", action="store_true")
    p.add_argument("--a-distance-on", choices=["h", "decoded"], default="h",
                   help="features probed for the CDLM a-distance")
    p.add_argument("--verify-moments", action="store_true")
    p.add_argument("--moment-samples", type=int, default=100_000)
    p.add_argument("--export-embeddings", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="re-train over a grid and tabulate adapted accuracy")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--grid", choices=["gamma", "consistency", "depth", "all"], default="gamma")
    p.add_argument("--cells", help="comma-separated cell labels to keep, e.g. '(1.0,0.1),none'")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        out = args.func(args)
    except (CDLMError, OSError) as exc:
        kind = type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc).replace("\n", " ")}), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
