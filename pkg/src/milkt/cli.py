"""``milkt`` command line: gen-data, train, transfer, eval, gradcheck, bench.

Exit codes: 0 ok, 1 configuration or contract error, 2 I/O error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from collections import Counter
from pathlib import Path

from . import __version__, gradcheck
from . import synthdata as sd
from .checkpoint import CheckpointError
from .experiment import (
    BenchmarkConfig,
    ConfigError,
    ExperimentConfig,
    run_benchmark,
    run_experiment,
    split_target,
)
from .milb import MILBFormatError
from .model import load_checkpoint
from .tensor import ShapeError
from .trainer import evaluate_bags
from .transfer import METHODS, TransferError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("milkt")


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; expected e.g. 0,1,2") from None


def _prepare_out(out: str, no_overwrite: bool) -> Path:
    path = Path(out)
    if path.exists() and no_overwrite:
        raise CLIError(EXIT_CONFIG, f"{path} already exists and --no-overwrite was given")
    if path.exists() and not path.is_dir():
        raise CLIError(EXIT_IO, f"{path} exists and is not a directory")
    return path


def _clear(path: Path) -> None:
    # stale seed directories from a previous run would mix with new output
    if path.is_dir():
        for child in path.iterdir():
            if child.is_dir() and child.name.startswith("seed_"):
                shutil.rmtree(child)


def cmd_gen_data(args) -> int:
    profile = sd.load_profile(args.profile, args.d_in)
    out = _prepare_out(args.out, args.no_overwrite)
    bags = sd.generate_dataset(profile, args.n_bags, args.seed)
    if out.is_dir():
        shutil.rmtree(out / "bags", ignore_errors=True)
    sd.write_dataset(bags, out, profile)
    hist = Counter(b.label for b in bags)
    print(f"wrote {len(bags)} bags of profile {profile.name!r} to {out}")
    print("class histogram: " + ", ".join(f"{k}: {hist.get(k, 0)}" for k in range(profile.n_classes)))
    if args.split:
        tr, va, te = sd.split_dataset(bags, sd.parse_ratios(args.split), args.seed)
        print(f"split {args.split}: {len(tr)}/{len(va)}/{len(te)}")
    return EXIT_OK


def _experiment_config(args, defaults: dict, forced: dict | None = None) -> ExperimentConfig:
    """Defaults, then the config file, then flags; ``forced`` entries win over all."""
    flags = {
        "target": args.data, "source": getattr(args, "source", None), "teacher": getattr(args, "teacher", None),
        "method": args.method, "alpha": args.alpha, "heads": args.heads, "seeds": args.seeds, "split": args.split,
        "split_seed": args.split_seed, "train_size": args.train_size, "max_epochs": args.max_epochs,
        "patience": args.patience, "student_arch": args.arch, "teacher_arch": getattr(args, "teacher_arch", None),
    }
    return ExperimentConfig.load(args.config, {**flags, **(forced or {})}, defaults).validate()


def _run(cfg: ExperimentConfig, args) -> int:
    out = _prepare_out(args.out, args.no_overwrite)
    _clear(out)
    summary = run_experiment(cfg, out)
    print(json.dumps({"method": cfg.method, "seeds": cfg.seeds, "mean": summary["mean"], "sd": summary["sd"]},
                     sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    forced = {"method": "finetune", "teacher": args.init_from} if args.init_from else None
    cfg = _experiment_config(args, {"method": "none"}, forced)
    if cfg.method not in ("none", "finetune"):
        raise CLIError(EXIT_CONFIG, f"train runs method none or finetune; use 'transfer' for {cfg.method!r}")
    return _run(cfg, args)


def cmd_transfer(args) -> int:
    return _run(_experiment_config(args, {"method": "mhfa"}), args)


def cmd_eval(args) -> int:
    params, arch, _ = load_checkpoint(args.checkpoint)
    bags, profile = sd.read_dataset(args.data)
    if profile.d_in != arch.d_in or profile.n_classes != arch.n_classes:
        raise CLIError(EXIT_CONFIG, f"checkpoint expects d_in={arch.d_in}, c={arch.n_classes}; dataset has "
                                    f"d_in={profile.d_in}, c={profile.n_classes}")
    if args.part == "all":
        chosen = bags
    else:
        cfg = ExperimentConfig(target=args.data, split=args.split or "6:1.5:2.5", split_seed=args.split_seed,
                               train_size=args.train_size).validate()
        chosen = dict(zip(("train", "val", "test"), split_target(cfg, bags)))[args.part]
    print(json.dumps(evaluate_bags(params, chosen).to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = gradcheck.run(args.scope, args.seed, fault=args.inject_fault)
    width = max(len(k) for k in results)
    for name, err in results.items():
        flag = "ok" if name not in gradcheck.failures({name: err}) else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    bad = gradcheck.failures(results)
    print(f"{len(results)} checks, {len(bad)} failed, {time.perf_counter() - start:.1f} s")
    if bad:
        print("failed: " + ", ".join(bad), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_bench(args) -> int:
    bc = BenchmarkConfig()
    if args.seeds:
        bc = dataclasses.replace(bc, seeds=tuple(args.seeds))
    if args.max_epochs:
        bc = dataclasses.replace(bc, max_epochs=args.max_epochs)
    res = run_benchmark(bc, args.out)
    for method, s in res["methods"].items():
        print(f"{method:<6} mean test auc {s['mean']['auc']:.4f} (sd {s['sd']['auc']:.4f})")
    print(f"total {res['seconds']:.1f} s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milkt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"milkt {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--data", help="target dataset directory (or 'target' in the config)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seeds", type=_seeds)
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--heads", type=int)
        sp.add_argument("--split", help="train:val:test ratios, default 6:1.5:2.5")
        sp.add_argument("--split-seed", type=int)
        sp.add_argument("--train-size", type=int, help="keep only the first N training bags")
        sp.add_argument("--max-epochs", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--arch", choices=("small", "big"), help="student architecture")
        sp.add_argument("--no-overwrite", action="store_true")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--profile", required=True, help="built-in profile name or JSON profile file")
    g.add_argument("--n-bags", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--d-in", type=int)
    g.add_argument("--split", help="report the split sizes for these ratios")
    g.add_argument("--out", required=True)
    g.add_argument("--no-overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from scratch (or fine-tune) on one dataset")
    common(t)
    t.add_argument("--init-from", help="teacher checkpoint to fine-tune from")
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transfer", help="train a student with a frozen teacher")
    common(x)
    x.add_argument("--teacher", help="teacher checkpoint directory")
    x.add_argument("--teacher-arch", choices=("small", "big"))
    x.add_argument("--source", help="source dataset tag recorded in the summary")
    x.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--part", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--split")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--train-size", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("scope", nargs="?", default="all", choices=("all",) + gradcheck.SCOPES)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", choices=("matmul", "tanh"), help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="tcga_a -> came_like directional benchmark")
    b.add_argument("--out")
    b.add_argument("--seeds", type=_seeds)
    b.add_argument("--max-epochs", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (CheckpointError, MILBFormatError, sd.DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, TransferError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
