"""Command-line pipeline: synth, build-kg, update-kg, merge-kg, train, refine, score, eval.

Every command reads one JSON config (``--config``) whose sections map onto
the library's config dataclasses; command-line flags override it. All file
names default to fixed names under ``--out-dir`` so the commands chain::

    savad synth --config cfg.json --out-dir run
    savad build-kg --config cfg.json --out-dir run
    savad train --config cfg.json --out-dir run --mode weak
    savad refine --config cfg.json --out-dir run
    savad score --config cfg.json --out-dir run --data run/test.jsonl
    savad eval --out-dir run
"""

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import metrics, rkm, sai, synth, training
from .data import load_dataset, save_dataset
from .errors import ContractViolation, DatasetError, DivergenceError
from .refinement import UrConfig, stage2_iterate

log = logging.getLogger("scene_action_vad")

COMMANDS = ("synth", "build-kg", "update-kg", "merge-kg", "train", "refine", "score", "eval")


class ConfigError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


@dataclasses.dataclass
class WorldConfig:
    n_scenes: int = 5
    n_actions: int = 8
    abnormal_fraction: float = 0.3
    noise_level: float = 0.05
    d_s: int = 16
    clip_len: int = 24


@dataclasses.dataclass
class SampleConfig:
    videos_per_class: int = 40
    clips_per_video: int = 8
    test_videos_per_class: int = 20
    abnormal_clip_fraction: float = 0.5


@dataclasses.dataclass
class DimsConfig:
    h: int = 64
    h_g: int = 32
    h_t: int = 64
    h_p: int = 16
    h_f: int = 32
    h_d: int = 64


SECTIONS = {
    "world": WorldConfig,
    "sample": SampleConfig,
    "rkm": rkm.RkmConfig,
    "bags": training.BagConfig,
    "train": training.TrainConfig,
    "refine": UrConfig,
    "refine_train": training.TrainConfig,
    "unsup_train": training.TrainConfig,
    "dims": DimsConfig,
}


def _build_section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(name, "section must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"{name}.{k}", "unknown key")
        default = known[k].default
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{name}.{k}", f"expected a boolean, got {v!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{k}", f"expected a number, got {v!r}")
            if isinstance(default, int) and not float(v).is_integer():
                raise ConfigError(f"{name}.{k}", f"expected an integer, got {v!r}")
            if isinstance(default, int):
                v = int(v)
    try:
        return cls(**values)
    except (ContractViolation, TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from None


def load_config(path=None, overrides=None):
    """Parse a JSON config into ``{section: dataclass}``; missing sections use defaults."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"no such file: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError("--config", f"invalid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("--config", "top level must be an object")
    for k in raw:
        if k not in SECTIONS and k != "seed":
            raise ConfigError(k, "unknown section")
    cfg = {name: _build_section(name, cls, dict(raw.get(name, {}))) for name, cls in SECTIONS.items()}
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed", f"expected an integer, got {seed!r}")
    cfg["seed"] = seed
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            cfg["seed"] = value
        elif key == "iterations":
            cfg["refine"] = dataclasses.replace(cfg["refine"], iterations=value)
    return apply_seed(cfg)


def apply_seed(cfg):
    """Derive every component seed from the single run seed."""
    s = cfg["seed"]
    cfg["rkm"] = dataclasses.replace(cfg["rkm"], seed=s)
    cfg["train"] = dataclasses.replace(cfg["train"], seed=s)
    cfg["refine_train"] = dataclasses.replace(cfg["refine_train"], seed=s + 1)
    cfg["unsup_train"] = dataclasses.replace(cfg["unsup_train"], seed=s)
    return cfg


def sai_dims(cfg, header, decoder=False):
    d = cfg["dims"]
    return sai.SaiDims(d_s=header.d_s, J=header.J, T=header.clip_len, h=d.h, h_g=d.h_g,
                       h_t=d.h_t, h_p=d.h_p, h_f=d.h_f, h_d=d.h_d, decoder=decoder)


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg, out):
    w, sm = cfg["world"], cfg["sample"]
    seed = cfg["seed"]
    world = synth.generate_world(w.n_scenes, w.n_actions, w.abnormal_fraction, seed=seed,
                                 noise_level=w.noise_level, d_s=w.d_s, clip_len=w.clip_len)
    mode = args.mode or "weak"
    train = synth.sample_dataset(world, sm.videos_per_class, sm.clips_per_video, seed=seed + 1,
                                 mode=mode, abnormal_clip_fraction=sm.abnormal_clip_fraction)
    synth.save_world(world, out / "world.json")
    save_dataset(train, out / "train.jsonl")
    written = ["world.json", "train.jsonl"]
    if sm.test_videos_per_class > 0:
        test = synth.sample_dataset(world, sm.test_videos_per_class, sm.clips_per_video,
                                    seed=seed + 2, mode="full",
                                    abnormal_clip_fraction=sm.abnormal_clip_fraction)
        save_dataset(test, out / "test.jsonl")
        written.append("test.jsonl")
    print(f"wrote {', '.join(written)} to {out}")


def cmd_build_kg(args, cfg, out):
    ds = load_dataset(args.data or out / "train.jsonl")
    kg = rkm.build_graph(ds, cfg["rkm"])
    rkm.save_graph(kg, out / "kg.txt")
    print(f"kg: {len(kg.scene_nodes)} scene nodes, {len(kg.action_nodes)} action nodes, "
          f"{len(kg.relations)} edges")


def cmd_update_kg(args, cfg, out):
    if args.data is None:
        raise DatasetError("update-kg needs --data with the new clips")
    kg = rkm.load_graph(args.kg or out / "kg.txt")
    ds = load_dataset(args.data)
    grown = rkm.update_graph(kg, ds.clips, cfg["rkm"])
    merged = rkm.merge_subgraph(grown, rkm.build_subgraph(grown, ds.clips))
    rkm.save_graph(merged, out / "kg_updated.txt")
    print(f"kg: {len(merged.scene_nodes)} scene nodes, {len(merged.action_nodes)} action nodes, "
          f"{len(merged.relations)} edges")


def cmd_merge_kg(args, cfg, out):
    if args.other is None:
        raise DatasetError("merge-kg needs --other")
    main = rkm.load_graph(args.kg or out / "kg.txt")
    merged = rkm.merge_subgraph(main, rkm.load_graph(args.other))
    rkm.save_graph(merged, out / "kg_merged.txt")
    print(f"kg: {len(merged.relations)} edges")


def cmd_train(args, cfg, out):
    mode = args.mode or "weak"
    ds = load_dataset(args.data or out / "train.jsonl")
    if mode == "unsup":
        normal = type(ds)(clips=ds.subset("normal"), header=ds.header)
        params = sai.init_params(sai_dims(cfg, ds.header, decoder=True), cfg["seed"])
        res = training.train_unsupervised(normal, params, cfg["unsup_train"], out_dir=out)
        sai.save_params(res.params, out / "unsup.ckpt")
        print(f"unsup: final L_rec {res.log[-1]['L_rec']:.6f}" if res.log else "unsup: 0 epochs")
        return
    params = sai.init_params(sai_dims(cfg, ds.header), cfg["seed"])
    res = training.train_stage1(ds, params, bag_cfg=cfg["bags"], train_cfg=cfg["train"],
                                mode=mode, out_dir=out)
    sai.save_params(res.params, out / "stage1.ckpt")
    print(f"stage1 ({mode}): final L_mil {res.log[-1]['L_mil']:.6f}" if res.log else "stage1: 0 epochs")


def cmd_refine(args, cfg, out):
    ds = load_dataset(args.data or out / "train.jsonl")
    kg = rkm.load_graph(args.kg or out / "kg.txt")
    params = sai.load_params(args.ckpt or out / "stage1.ckpt")
    mode = args.mode or "weak"
    if mode == "unsup":
        raise ContractViolation("unsupervised models are not refined")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = stage2_iterate(params, kg, ds, cfg["refine"], cfg["refine_train"], cfg["bags"],
                             mode=mode, out_dir=out)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    sai.save_params(res.params, out / "refined.ckpt")
    n, a, p = res.pools.sizes()
    print(f"pools: normal {n}, abnormal {a}, pending {p}")


def _default_ckpt(out):
    for name in ("refined.ckpt", "stage1.ckpt", "unsup.ckpt"):
        if (out / name).exists():
            return out / name
    raise DatasetError(f"no checkpoint in {out}; pass --ckpt")


def cmd_score(args, cfg, out):
    ds = load_dataset(args.data or out / "test.jsonl")
    params = sai.load_params(args.ckpt or _default_ckpt(out))
    if params.dims.decoder:
        scores = training.minmax_by_video(ds.clips, training.recon_errors(params, ds.clips))
    else:
        scores = training.score_clips(params, ds.clips)
    paths = metrics.write_score_dumps(ds.clips, scores, out / "scores")
    print(f"wrote {len(paths)} score dumps to {out / 'scores'}")


def cmd_eval(args, cfg, out):
    src = Path(args.scores) if args.scores else out / "scores"
    paths = sorted(src.glob("*.tsv")) if src.is_dir() else [src]
    if not paths:
        raise DatasetError(f"no score dumps under {src}")
    m = metrics.evaluate_dumps(paths)
    print(f"AUC = {m['auc']:.4f}")
    print(f"AP = {m['ap']:.4f}")


HANDLERS = {
    "synth": cmd_synth, "build-kg": cmd_build_kg, "update-kg": cmd_update_kg,
    "merge-kg": cmd_merge_kg, "train": cmd_train, "refine": cmd_refine,
    "score": cmd_score, "eval": cmd_eval,
}


def build_parser():
    p = argparse.ArgumentParser(prog="savad", description="Scene-dependent video anomaly detection pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=("full", "weak", "unsup"))
        sp.add_argument("--out-dir", default=".")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--data", help="dataset (.jsonl)")
        sp.add_argument("--kg", help="knowledge-graph file")
        sp.add_argument("--other", help="second knowledge-graph file (merge-kg)")
        sp.add_argument("--ckpt", help="parameter checkpoint")
        sp.add_argument("--scores", help="score dump file or directory (eval)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0
        parser.print_usage(sys.stderr)
        print(f"savad: unknown command {argv[0]!r}" if argv else "savad: missing command", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "iterations": args.iterations})
    except ConfigError as e:
        print(f"savad: invalid config: {e}", file=sys.stderr)
        return 1
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        HANDLERS[args.command](args, cfg, out)
    except (ContractViolation, DatasetError, DivergenceError, ValueError, OSError) as e:
        print(f"savad {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
