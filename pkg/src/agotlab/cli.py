"""Command-line entry point: gen-data, train, eval, ablate, gradcheck, equiv-check.

Every verb reads an optional flat ``key = value`` config file, applies
repeated ``--set key=value`` overrides, validates everything, and only then
touches the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .ablation import (
    AXES,
    PUBLISHED_GRIDS,
    PUBLISHED_SEEDS,
    AblationError,
    AblationGrid,
    equivalence_check_r1,
    negative_control_r2,
    render_table,
    run_grid,
    trend_line,
    write_csv,
)
from .data import FORMAT_TAG, FORMAT_VERSION, DatasetManifest, generate_synthetic, load_dataset, save_dataset, \
    split_base_new
from .errors import ConfigError, DataError
from .objective import append_csv, harmonic_mean
from .train import CKPT_VERSION, MICRO, TrainConfig, evaluate, gradcheck_suite, load_checkpoint, make_split, \
    restore_model, train_run


VERBS = ("gen-data", "train", "eval", "ablate", "gradcheck", "equiv-check")


def manifest_name(verb: str) -> str:
    """One manifest per verb, so eval in a training directory keeps the training record."""
    return f"manifest-{verb}.txt"


DATA_KEYS = {f.name: f.type for f in dataclasses.fields(DatasetManifest)} | {"n_per_class": "int"}
DATA_DEFAULTS = dict(dataclasses.asdict(DatasetManifest()), n_per_class=64)
ABLATE_KEYS = {"axis": "str", "seeds": "str", "workers": "int"}
ABLATE_DEFAULTS = {"axis": "all", "seeds": ",".join(map(str, PUBLISHED_SEEDS)), "workers": 1}

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

EPILOG = """\
config file:
  flat "key = value" lines; '#' starts a comment; dotted keys reach nested
  settings. --set key=value overrides the file and may be repeated.

  training keys:  head (fixed|coop|cocoop|cotpt|agot), learning_rate, momentum,
                  epochs, batch_size, seed, tau, alpha_mode (dynamic|<float>),
                  shots, split (all|base|new), encoder_seed, image_hidden,
                  max_len, subnode_std, meta_scale, dataset, checkpoint, run_id,
                  agot.Z, agot.R, agot.L, agot.d_e, agot.d, agot.d_hidden
  data keys:      data.num_classes, data.raw_dim, data.sigma, data.seed,
                  data.multi_template, data.base_fraction, data.n_per_class
  ablation keys:  ablate.axis (steps|subnodes|alpha_mode|head|all),
                  ablate.seeds (comma list), ablate.workers

verbs:
  gen-data     write a synthetic dataset to OUT/dataset.txt
  train        train a prompt head; writes OUT/checkpoint.bin and OUT/metrics.csv
  eval         frozen evaluation of --checkpoint on --dataset; prints Base/New/H
  ablate       run the published ablation grids; CSV and text table per axis
  gradcheck    finite-difference check of every trainable tensor of every head
  equiv-check  AGoT with one subnode against CoT-PT, plus a negative control

exit status: 0 success, 1 usage or validation error, 2 runtime failure.
Every verb writes OUT/manifest-VERB.txt, itself a valid config file.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agotlab", description=__doc__.splitlines()[0], epilog=EPILOG,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("verb", metavar="VERB", help=f"one of: {', '.join(VERBS)}")
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key (repeatable)")
    p.add_argument("--out", metavar="DIR", default="agotlab-out", help="output directory (default: %(default)s)")
    p.add_argument("--checkpoint", metavar="PATH", help="eval: checkpoint to evaluate")
    p.add_argument("--dataset", metavar="PATH", help="eval: dataset to evaluate on (train: same as dataset key)")
    p.add_argument("--split", choices=("base", "new", "all", "both"), default="both",
                   help="eval: class subset; 'both' prints Base, New and H (default: %(default)s)")
    p.add_argument("--verbose", "-v", action="store_true", help="log per-epoch progress")
    p.add_argument("--version", action="version", version=f"agotlab {__version__}")
    return p


# ---------------------------------------------------------------- config


@dataclass
class ResolvedConfig:
    train: TrainConfig
    data: dict[str, Any]
    ablate: dict[str, Any]
    explicit: set[str] = field(default_factory=set)

    def flat(self) -> dict[str, Any]:
        out = dict(self.train.to_flat())
        out.update({f"data.{k}": v for k, v in self.data.items()})
        out.update({f"ablate.{k}": v for k, v in self.ablate.items()})
        return out

    def manifest_for(self) -> DatasetManifest:
        return DatasetManifest(**{k: v for k, v in self.data.items() if k != "n_per_class"})


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = val
    return out


def _known_keys() -> list[str]:
    keys = [k for k in TrainConfig().to_flat()]
    keys += [f"data.{k}" for k in DATA_KEYS] + [f"ablate.{k}" for k in ABLATE_KEYS]
    return keys


def _unknown(key: str) -> ConfigError:
    near = difflib.get_close_matches(key, _known_keys(), n=1)
    hint = f"; did you mean {near[0]!r}?" if near else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


def _coerce(key: str, val: Any, typ: str) -> Any:
    if not isinstance(val, str):
        return val
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {val!r} as {typ}") from None
    return val


def resolve_config(config_path: str | None, overrides: Sequence[str]) -> ResolvedConfig:
    flat: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        flat.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        flat[k] = v

    train_flat: dict[str, Any] = {}
    data = dict(DATA_DEFAULTS)
    ablate = dict(ABLATE_DEFAULTS)
    train_keys = set(TrainConfig().to_flat())
    for key, val in flat.items():
        if key.startswith("data."):
            name = key[5:]
            if name not in DATA_KEYS:
                raise _unknown(key)
            data[name] = _coerce(key, val, DATA_KEYS[name])
        elif key.startswith("ablate."):
            name = key[7:]
            if name not in ABLATE_KEYS:
                raise _unknown(key)
            ablate[name] = _coerce(key, val, ABLATE_KEYS[name])
        elif key in train_keys:
            train_flat[key] = val
        else:
            raise _unknown(key)
    try:
        train = TrainConfig.from_flat(train_flat)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if data["n_per_class"] < 1:
        raise ConfigError(f"data.n_per_class must be >= 1, got {data['n_per_class']}")
    try:
        DatasetManifest(**{k: v for k, v in data.items() if k != "n_per_class"})
    except TypeError as e:
        raise ConfigError(str(e)) from None
    if ablate["axis"] != "all" and ablate["axis"] not in AXES:
        raise ConfigError(f"ablate.axis must be 'all' or one of {AXES}, got {ablate['axis']!r}")
    try:
        ablate["seeds"] = ",".join(str(int(s)) for s in str(ablate["seeds"]).split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"ablate.seeds must be a comma list of integers, got {ablate['seeds']!r}") from None
    if ablate["workers"] < 1:
        raise ConfigError(f"ablate.workers must be >= 1, got {ablate['workers']}")
    return ResolvedConfig(train, data, ablate, set(flat))


def _prepare(out: Path) -> Path:
    """Create the output directory; called only once all inputs have validated."""
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, verb: str, cfg: ResolvedConfig, argv: Sequence[str], extra: dict | None = None) -> None:
    lines = [
        f"# agotlab run manifest v1, agotlab {__version__}",
        f"# verb: {verb}",
        f"# argv: {' '.join(argv)}",
        f"# formats: dataset {FORMAT_TAG} {FORMAT_VERSION}, checkpoint v{CKPT_VERSION}",
        f"# config_hash: {cfg.train.config_hash()}",
    ]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"# {k}: {v}")
    for k, v in sorted(cfg.flat().items()):
        lines.append(f"{k} = {v}")
    (out / manifest_name(verb)).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- verbs


def _dataset_for(cfg: ResolvedConfig):
    if cfg.train.dataset:
        return load_dataset(cfg.train.dataset)
    return generate_synthetic(cfg.manifest_for(), cfg.data["n_per_class"])


def cmd_gen_data(args, cfg: ResolvedConfig, out: Path) -> int:
    data = generate_synthetic(cfg.manifest_for(), cfg.data["n_per_class"])
    path = _prepare(out) / "dataset.txt"
    save_dataset(data, path)
    base, new = split_base_new(cfg.manifest_for())
    print(f"wrote {len(data)} examples ({data.num_classes} classes, raw_dim={data.raw_dim}) to {path}")
    print(f"base classes: {base}  new classes: {new}")
    write_manifest(out, "gen-data", cfg, args.argv, {"base_classes": base, "new_classes": new})
    return EXIT_OK


def cmd_train(args, cfg: ResolvedConfig, out: Path) -> int:
    tc = cfg.train
    data = _dataset_for(cfg)
    base, new = split_base_new(dataclasses.replace(cfg.manifest_for(), num_classes=data.num_classes))
    split = make_split(tc, data, base, new)
    ckpt_path = tc.checkpoint or str(out / "checkpoint.bin")
    _prepare(out)
    run_cfg = tc.replace(checkpoint=ckpt_path)
    ckpt, history = train_run(run_cfg, data, split=split)
    append_csv(out / "metrics.csv", history)
    last = history[-1] if history else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.loss:.4f}  train R@1 {last.recall_at_1:.4f}")
    print(f"checkpoint: {ckpt_path}")
    write_manifest(out, "train", cfg, args.argv, {"checkpoint": ckpt_path, "epochs_run": ckpt.epoch})
    return EXIT_OK


def cmd_eval(args, cfg: ResolvedConfig, out: Path) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ds_path = args.dataset or cfg.train.dataset
    if not ds_path:
        raise ConfigError("eval needs --dataset (or the dataset config key)")
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(ds_path)
    if ckpt.raw_dim != data.raw_dim:
        raise ConfigError(f"checkpoint expects raw_dim={ckpt.raw_dim}, dataset has raw_dim={data.raw_dim}")
    model = restore_model(ckpt)
    base, new = split_base_new(dataclasses.replace(cfg.manifest_for(), num_classes=data.num_classes))
    groups = {"all": sorted(set(data.labels().tolist())), "base": base, "new": new}
    wanted = ["base", "new"] if args.split == "both" else [args.split]
    tau = ckpt.config.tau
    reports = {}
    for name in wanted:
        subset = data.restrict(groups[name])
        if len(subset) == 0:
            raise DataError(f"dataset has no examples of the {name} classes {groups[name]}")
        reports[name] = evaluate(model, subset, tau, run_id=f"eval:{name}", head=ckpt.config.head.value,
                                 Z=ckpt.config.agot.Z, R=ckpt.config.agot.R, alpha_mode=ckpt.config.alpha_mode,
                                 epoch=ckpt.epoch)
    if args.split == "both":
        b, n = 100 * reports["base"].accuracy, 100 * reports["new"].accuracy
        h = harmonic_mean(b, n) if b > 0 and n > 0 else 0.0
        for r in reports.values():
            r.base_acc, r.new_acc, r.H = b, n, h
        print(f"{'Base':>8} {'New':>8} {'H':>8}")
        print(f"{b:8.2f} {n:8.2f} {h:8.2f}")
    else:
        r = reports[args.split]
        print(f"{args.split}: R@1 {r.recall_at_1:.4f}  accuracy {r.accuracy:.4f}")
    append_csv(_prepare(out) / "metrics.csv", list(reports.values()))
    write_manifest(out, "eval", cfg, args.argv, {"checkpoint": args.checkpoint, "dataset": ds_path})
    return EXIT_OK


def cmd_ablate(args, cfg: ResolvedConfig, out: Path) -> int:
    axes = list(PUBLISHED_GRIDS) if cfg.ablate["axis"] == "all" else [cfg.ablate["axis"]]
    seeds = tuple(int(s) for s in cfg.ablate["seeds"].split(","))
    grids = []
    for axis in axes:
        if axis == "head":
            grids.append(AblationGrid("head", ("cotpt", "agot"), cfg.train, seeds))
        else:
            grids.append(AblationGrid.published(axis, cfg.train, seeds))
    data = _dataset_for(cfg)
    _prepare(out)
    status = EXIT_OK
    for grid in grids:
        try:
            res = run_grid(grid, data, cfg.ablate["workers"])
        except AblationError as e:
            print(f"error: {e}", file=sys.stderr)
            res, status = e.partial, EXIT_RUNTIME
        write_csv(res, out / f"ablation_{grid.axis}.csv")
        table = render_table(res)
        trend = f"trend (reported, not gated): {trend_line(res)}"
        (out / f"ablation_{grid.axis}.txt").write_text(f"{table}\n{trend}\n", encoding="utf-8")
        print(f"{grid.axis} ({len(grid.values)} values x {len(seeds)} seeds, held-out R@1 %):")
        print(table)
        print(trend)
    write_manifest(out, "ablate", cfg, args.argv, {"axes": ",".join(axes)})
    return status


def cmd_gradcheck(args, cfg: ResolvedConfig, out: Path) -> int:
    agot_kw = {k[5:]: getattr(cfg.train.agot, k[5:]) for k in cfg.explicit if k.startswith("agot.")}
    agot = dataclasses.replace(MICRO, **agot_kw)
    rows = gradcheck_suite(agot=agot, seed=cfg.train.seed)
    print(f"{'head':<8} {'parameter':<28} {'max rel err':>12}  result")
    for r in rows:
        print(f"{r.head:<8} {r.param:<28} {r.max_rel_error:12.3e}  {'pass' if r.passed else 'FAIL'}")
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} tensors pass")
    with open(_prepare(out) / "gradcheck.csv", "w", encoding="utf-8") as fh:
        fh.write("head,param,max_rel_error,analytic,numeric,passed\n")
        for r in rows:
            fh.write(f"{r.head},{r.param},{r.max_rel_error:.6e},{r.analytic!r},{r.numeric!r},{int(r.passed)}\n")
    write_manifest(out, "gradcheck", cfg, args.argv, {"micro_config": dataclasses.asdict(agot)})
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_equiv_check(args, cfg: ResolvedConfig, out: Path) -> int:
    rep = equivalence_check_r1(seed=cfg.train.seed)
    neg = negative_control_r2(seed=cfg.train.seed)
    lines = [
        f"R=1 vs CoT-PT, {rep.n_inputs} inputs: max |diff| {rep.max_abs_diff:.3e} before step, "
        f"{rep.max_abs_diff_after_step:.3e} after one lockstep SGD step -> {'pass' if rep.passed else 'FAIL'}",
        f"negative control R=2: max |diff| {neg.max_abs_diff:.3e} (input {neg.worst_seed}) -> "
        f"{'correctly differs' if not neg.passed else 'FAIL: control did not differ'}",
    ]
    print("\n".join(lines))
    (_prepare(out) / "equiv_check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, "equiv-check", cfg, args.argv)
    return EXIT_OK if rep.passed and not neg.passed else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "equiv-check": cmd_equiv_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        print("agotlab: error: no verb given; try 'agotlab --help'", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.verb not in COMMANDS:
            near = difflib.get_close_matches(args.verb, VERBS, n=1)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            raise UsageError(f"unknown verb {args.verb!r}{hint}")
        cfg = resolve_config(args.config, args.overrides)
        if args.dataset and args.verb == "train":
            cfg.train = cfg.train.replace(dataset=args.dataset)
    except SystemExit as e:  # --help and --version
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"agotlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"agotlab: config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    args.argv = argv
    out = Path(args.out)
    try:
        return COMMANDS[args.verb](args, cfg, out)
    except ConfigError as e:
        print(f"agotlab: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"agotlab: {args.verb} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
