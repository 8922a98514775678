"""Command-line entry point: ``ggpfn {synth,train,infer,eval,gradcheck}``.

Training reads a plain-text config file with one ``key = value`` per line
(``#`` starts a comment). Tuples are comma separated, booleans are
``true``/``false``. Any key can be overridden with ``--set key=value``.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import GgpfnConfig
from .errors import ConfigError, GgpfnError, ParseError, ShapeError

log = logging.getLogger("ggpfn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# keys besides the GgpfnConfig fields; value is (default, help)
RUN_KEYS = {
    "preset": ("tiny", "base hyperparameters before overrides: tiny or full"),
    "manifest": ("", "synth manifest; its volumes are split into train and validation"),
    "n_val": (1, "number of manifest volumes (taken from the end) used for validation"),
    "train_volumes": ("", "comma separated volume paths (instead of a manifest)"),
    "val_volumes": ("", "comma separated validation volume paths"),
    "out_dir": ("run", "directory receiving best.ckpt, last.ckpt and train_log.jsonl"),
    "plane": ("axial", "training view: axial, sagittal or coronal"),
    "seed": (0, "initialisation and sampling seed"),
    "epochs": ((200, 200, 100), "epochs of the global, pfn and finetune stages"),
    "batch_sizes": ((32, 4, 4), "batch size of each stage"),
    "lr": (1e-4, "Adam learning rate"),
    "val_interval": (10, "validate every this many epochs"),
    "augment": (False, "rotation and elastic deformation of training patches"),
}
STAGE_NAMES = ("global", "pfn", "finetune")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- run config

def _config_defaults(preset: str) -> dict:
    if preset == "tiny":
        return GgpfnConfig.tiny().to_dict()
    if preset == "full":
        return GgpfnConfig().to_dict()
    raise ConfigError(f"preset: expected tiny or full, got {preset!r}")


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        if default is None:
            return None if raw.lower() == "none" else tuple(int(x) for x in raw.split(","))
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_kv(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclasses.dataclass
class RunConfig:
    model: GgpfnConfig
    run: dict

    @classmethod
    def build(cls, raw: dict) -> "RunConfig":
        """Typed config from raw strings; rejects unknown keys."""
        preset = raw.get("preset", RUN_KEYS["preset"][0])
        model_defaults = _config_defaults(preset)
        known = set(model_defaults) | set(RUN_KEYS)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        model = dict(model_defaults)
        run = {k: d for k, (d, _) in RUN_KEYS.items()}
        for k, v in raw.items():
            if k in RUN_KEYS:
                run[k] = _coerce(k, v, RUN_KEYS[k][0])
            else:
                model[k] = _coerce(k, v, model_defaults[k])
        for k in ("epochs", "batch_sizes"):
            if len(run[k]) != 3:
                raise ConfigError(f"{k}: need 3 values (global, pfn, finetune), got {run[k]}")
        try:
            cfg = GgpfnConfig.from_dict(model).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(cfg, run)


def load_run_config(path, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = parse_kv(Path(path).read_text(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return RunConfig.build(raw)


def _config_help() -> str:
    lines = ["config keys (default shown for preset=tiny):"]
    for k, (d, h) in RUN_KEYS.items():
        lines.append(f"  {k} = {_fmt(d)}    {h}")
    for k, d in GgpfnConfig.tiny().to_dict().items():
        lines.append(f"  {k} = {_fmt(d)}")
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return "none" if v is None else str(v)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .volume_io import make_phantom, save_volume

    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_DATA) from None
    extents = tuple(int(x) for x in args.extents.split(","))
    if len(extents) != 3:
        raise CliError(f"--extents needs l,h,w, got {args.extents!r}", EXIT_CONFIG)
    entries = []
    for i in range(args.n):
        seed = args.seed + i
        path = out / f"phantom_{i:03d}.raw"
        vg = make_phantom(seed, extents, n_distractors=args.distractors)
        try:
            save_volume(vg, path)
        except OSError as exc:
            raise CliError(f"cannot write {path}: {exc}", EXIT_DATA) from None
        entries.append({"path": path.name, "seed": seed})
    manifest = {"extents": list(extents), "n_distractors": args.distractors, "volumes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.n} volumes and {out / 'manifest.json'}")
    return EXIT_OK


def _load_volumes(paths):
    from .volume_io import load_volume

    vols = []
    for p in paths:
        try:
            vols.append(load_volume(p))
        except OSError as exc:
            raise CliError(f"cannot read volume {p}: {exc}", EXIT_DATA) from None
    return vols


def _split_volumes(run: dict):
    if run["manifest"]:
        mpath = Path(run["manifest"])
        try:
            manifest = json.loads(mpath.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read manifest {mpath}: {exc}", EXIT_DATA) from None
        paths = [mpath.parent / e["path"] for e in manifest["volumes"]]
        n_val = run["n_val"]
        if not 0 < n_val < len(paths):
            raise CliError(f"n_val={n_val} leaves no train or validation volumes ({len(paths)} listed)", EXIT_CONFIG)
        return paths[:-n_val], paths[-n_val:]
    train = [p for p in run["train_volumes"].split(",") if p.strip()]
    val = [p for p in run["val_volumes"].split(",") if p.strip()]
    if not train or not val:
        raise CliError("config needs a manifest or both train_volumes and val_volumes", EXIT_CONFIG)
    return train, val


def cmd_train(args) -> int:
    from . import checkpoint as ckpt
    from .patches import AugmentParams
    from .training import default_schedule, train_full_schedule

    rc = load_run_config(args.config, args.set)
    run, config = rc.run, rc.model
    train_paths, val_paths = _split_volumes(run)
    train_vols, val_vols = _load_volumes(train_paths), _load_volumes(val_paths)
    for vg in train_vols + val_vols:
        if vg.labels is None:
            raise CliError("training and validation volumes need labels", EXIT_DATA)

    schedule = default_schedule(run["epochs"], run["batch_sizes"], run["lr"])
    init, start = None, (0, 0)
    if args.resume:
        init, meta = ckpt.load_checkpoint(args.resume)
        if init.config is not None and init.config != config:
            raise CliError("resume checkpoint was trained with a different model config", EXIT_CONFIG)
        init.config = config
        start = (int(meta.get("stage_index", 0)), int(meta.get("epoch", 0)))
    if args.stage:
        si = STAGE_NAMES.index(args.stage)
        schedule = [schedule[si]]
        start = (0, start[1]) if start[0] == si else (0, 0)

    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    offset = STAGE_NAMES.index(args.stage) if args.stage else 0

    def on_checkpoint(params, meta):
        meta = dict(meta, stage_index=meta["stage_index"] + offset)
        ckpt.save_checkpoint(params, out / "last.ckpt", meta)

    result = train_full_schedule(
        config, train_vols, val_vols, np.random.default_rng(run["seed"]), schedule=schedule,
        plane=run["plane"], seed=run["seed"], val_interval=run["val_interval"],
        augment_params=AugmentParams() if run["augment"] else None, init=init, start=start,
        log_path=out / "train_log.jsonl", on_checkpoint=on_checkpoint)
    ckpt.save_checkpoint(result.best, out / "best.ckpt",
                         {"plane": run["plane"], "val_dsc": result.best_dsc, "best_at": list(result.best_at)})
    print(f"best validation DSC {result.best_dsc:.4f} at {result.best_at}; wrote {out / 'best.ckpt'}")
    return EXIT_OK


def _parse_models(items):
    models = {}
    for item in items:
        if "=" not in item:
            raise CliError(f"--model expects view=checkpoint, got {item!r}", EXIT_CONFIG)
        view, path = item.split("=", 1)
        models[view.strip()] = path.strip()
    return models


def cmd_infer(args) -> int:
    from . import checkpoint as ckpt
    from .inference import segment_p3d
    from .volume_io import ViewPlane, VolumeGrid, load_volume, save_volume

    try:
        views = [ViewPlane(v.strip()) for v in args.views.split(",")]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    paths = _parse_models(args.model)
    models = {}
    for v in views:
        if v.value not in paths:
            raise CliError(f"no checkpoint given for view {v.value!r}", EXIT_CONFIG)
        store, _ = ckpt.load_checkpoint(paths[v.value])
        if store.config is None:
            raise CliError(f"checkpoint for view {v.value!r} carries no config", EXIT_DATA)
        models[v] = (store, store.config)
    weights = tuple(float(x) for x in args.weights.split(",")) if args.weights else None
    vg = load_volume(args.volume)
    fused, per_view = segment_p3d(vg, models, views, weights)
    save_volume(VolumeGrid(np.asarray(fused, dtype=np.float32), vg.spacing), args.out)
    if args.per_view:
        base = Path(args.out)
        for v, prob in per_view.items():
            save_volume(VolumeGrid(prob, vg.spacing), base.with_name(f"{base.stem}_{v.value}{base.suffix}"))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .inference import dsc, pr_curve, threshold_mask, write_pr_table
    from .volume_io import load_volume

    pred = load_volume(args.pred).intensities
    gvol = load_volume(args.gt)
    gt = gvol.labels if gvol.labels is not None else gvol.intensities >= 0.5
    if pred.shape != gt.shape:
        raise CliError(f"prediction extents {pred.shape} differ from ground truth {gt.shape}", EXIT_DATA)
    score = dsc(threshold_mask(pred, args.threshold), gt)
    metrics = {"dsc": score, "threshold": args.threshold}
    if args.pr:
        if not gt.any():
            raise CliError("ground truth is empty; recall is undefined", EXIT_DATA)
        write_pr_table(pr_curve(pred, gt, args.n_thresholds), args.pr)
        metrics["pr_table"] = str(args.pr)
    Path(args.out).write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"DSC {score:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, passed, run_suite

    report = run_suite(args.seed, args.repeats, include_model=not args.ops_only, inject=args.inject)
    width = max(len(k) for k in report)
    for name, err in report.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    ok = passed(report)
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="ggpfn", description=__doc__, formatter_class=fmt)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads (default: library default)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write phantom volumes and a manifest")
    s.add_argument("--n", type=int, default=3, help="number of volumes (default: 3)")
    s.add_argument("--extents", default="24,64,64", help="l,h,w of each volume (default: 24,64,64)")
    s.add_argument("--seed", type=int, default=0, help="seed of the first volume (default: 0)")
    s.add_argument("--distractors", type=int, default=0, help="unlabelled look-alike blobs (default: 0)")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run the staged training schedule", formatter_class=fmt,
                       epilog=_config_help())
    t.add_argument("--config", default=None, help="key = value config file (default: none, all defaults)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--stage", choices=STAGE_NAMES, default=None, help="run only this stage (default: all)")
    t.add_argument("--resume", default=None, help="continue from a last.ckpt written by an earlier run")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment a volume")
    i.add_argument("--volume", required=True, help="input volume (raw_v1 or .nii)")
    i.add_argument("--model", action="append", default=[], metavar="VIEW=CKPT",
                   help="checkpoint per view, e.g. axial=run/best.ckpt")
    i.add_argument("--views", default="axial", help="comma separated views (default: axial)")
    i.add_argument("--weights", default=None, help="fusion weights w_a,w_s,w_c (default: from the axial config)")
    i.add_argument("--out", required=True, help="fused probability volume (raw_v1)")
    i.add_argument("--per-view", action="store_true", help="also write OUT_<view> per-view volumes")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="DSC and precision-recall table")
    e.add_argument("--pred", required=True, help="probability volume")
    e.add_argument("--gt", required=True, help="ground truth volume (labels, else intensities >= 0.5)")
    e.add_argument("--out", required=True, help="metrics JSON")
    e.add_argument("--pr", default=None, help="PR table path: threshold, precision, recall, F per line")
    e.add_argument("--threshold", type=float, default=0.5, help="binarisation threshold (default: 0.5)")
    e.add_argument("--n-thresholds", type=int, default=101, help="PR table rows (default: 101)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0, help="default: 0")
    g.add_argument("--repeats", type=int, default=10, help="random instances per op (default: 10)")
    g.add_argument("--ops-only", action="store_true", help="skip the full-model loss check")
    g.add_argument("--inject", action="append", default=[], help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, ShapeError, FileNotFoundError, GgpfnError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
