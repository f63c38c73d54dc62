"""Multi-seed experiments: configuration, per-seed runs, summaries, and the built-in benchmark.

An experiment directory holds ``summary.json``, ``timing.json`` and one
``seed_<n>/`` directory per seed (``run.jsonl``, ``student/`` checkpoint and,
for MHFA, ``mhfa/``). Everything except ``timing.json`` is a pure function
of the resolved configuration.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import synthdata as sd
from .metrics import EvalResult
from .model import PRESETS, MILArch, MILParams, load_checkpoint, save_checkpoint
from .trainer import FrozenTeacher, RunRecord, TrainConfig, train_run
from .transfer import DEFAULT_ALPHA, DEFAULT_GATE_DIM, DEFAULT_HEADS, METHODS, PTSConfig, TransferSetting, save_mhfa

log = logging.getLogger(__name__)

METRICS = ("auc", "f1", "accuracy")


class ConfigError(ValueError):
    """An experiment configuration violates its contract."""


@dataclass
class ExperimentConfig:
    target: str = ""
    source: str | None = None
    teacher: str | None = None  # teacher checkpoint directory
    method: str = "none"
    alpha: float = DEFAULT_ALPHA
    heads: int = DEFAULT_HEADS
    d_gate: int = DEFAULT_GATE_DIM
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    teacher_arch: str | None = None
    student_arch: str = "small"
    split: str = "6:1.5:2.5"
    split_seed: int = 0
    train_size: int | None = None
    max_epochs: int = 200
    patience: int = 20
    lr: float = 2e-4
    weight_decay: float = 1e-5
    pts_T: float = 0.1
    pts_t: float = 3.0

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        for name in (self.student_arch, self.teacher_arch):
            if name is not None and name not in PRESETS:
                raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(PRESETS)}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if self.train_size is not None and self.train_size < 1:
            raise ConfigError("train_size must be >= 1")
        if not self.target:
            raise ConfigError("no target dataset given")
        try:
            sd.parse_ratios(self.split)
            PTSConfig(self.pts_T, self.pts_t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None,
             defaults: dict | None = None) -> "ExperimentConfig":
        """Defaults, then the JSON file (optional), then overrides; ``None`` overrides are ignored."""
        base: dict = dict(defaults or {})
        if path is not None:
            try:
                loaded = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: expected a JSON object")
            if isinstance(loaded.get("config"), dict):
                loaded = loaded["config"]  # a summary.json re-runs its own config
            base.update(loaded)
        base.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(base)


def aggregate(results: list[EvalResult]) -> tuple[dict, dict]:
    """Per-metric mean and population standard deviation over seeds.

    Undefined AUCs are left out; a metric undefined for every seed stays ``None``.
    """
    mean, sd_ = {}, {}
    for k in METRICS:
        vals = [getattr(r, k) for r in results if getattr(r, k) is not None]
        mean[k] = float(np.mean(vals)) if vals else None
        sd_[k] = float(np.std(vals)) if vals else None
    n = [r.n_samples for r in results]
    mean["n_samples"] = sd_["n_samples"] = None
    if n:
        mean["n_samples"] = int(n[0]) if len(set(n)) == 1 else float(np.mean(n))
        sd_["n_samples"] = float(np.std(n))
    return mean, sd_


def summary_dict(config: dict, runs: list[tuple[int, RunRecord]], provenance: dict | None = None) -> dict:
    tests = [r.test for _, r in runs]
    mean, sd_ = aggregate(tests)
    per_seed = [{"seed": s, "best_epoch": r.best_epoch, "epochs_run": len(r.val_loss), "init": r.init,
                 "test": r.test.to_dict()} for s, r in runs]
    out = {"config": config, "per_seed": per_seed, "mean": mean, "sd": sd_}
    if provenance:
        out["provenance"] = provenance
    return out


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _student_arch(cfg: ExperimentConfig, profile: sd.DomainProfile) -> MILArch:
    return MILArch.preset(cfg.student_arch, d_in=profile.d_in, n_classes=profile.n_classes)


def load_teacher(cfg: ExperimentConfig) -> tuple[MILParams, MILArch]:
    if cfg.teacher is None:
        raise ConfigError(f"method {cfg.method!r} needs a teacher checkpoint")
    params, arch, _ = load_checkpoint(cfg.teacher)
    if cfg.teacher_arch is not None:
        want = PRESETS[cfg.teacher_arch]
        if (arch.d_embed, arch.d_attn) != (want["d_embed"], want["d_attn"]):
            raise ConfigError(
                f"teacher checkpoint has d_embed={arch.d_embed}, d_attn={arch.d_attn}; "
                f"declared teacher_arch {cfg.teacher_arch!r} expects {want}")
    return params, arch


def split_target(cfg: ExperimentConfig, bags: list) -> tuple[list, list, list]:
    train, val, test = sd.split_dataset(bags, sd.parse_ratios(cfg.split), cfg.split_seed)
    if cfg.train_size is not None:
        if cfg.train_size > len(train):
            raise ConfigError(f"train_size {cfg.train_size} exceeds the {len(train)} training bags")
        train = train[:cfg.train_size]
    return train, val, test


def run_seeds(cfg: ExperimentConfig, train: list, val: list, test: list, student_arch: MILArch,
              teacher: tuple[MILParams, MILArch] | None, out: Path | None) -> list[tuple[int, RunRecord]]:
    t_arch = teacher[1] if teacher else None
    setting = TransferSetting(cfg.method, cfg.alpha, cfg.source or "", cfg.target, t_arch, student_arch)
    runs = []
    for seed in cfg.seeds:
        tc = TrainConfig(setting, max_epochs=cfg.max_epochs, patience=cfg.patience, seed=seed, lr=cfg.lr,
                         weight_decay=cfg.weight_decay, heads=cfg.heads, d_gate=cfg.d_gate,
                         pts=PTSConfig(cfg.pts_T, cfg.pts_t))
        frozen = FrozenTeacher(*teacher) if teacher else None
        student, mhfa, record = train_run(train, val, tc, teacher=frozen, test=test)
        log.info("seed %d: best epoch %d of %d, test auc %s", seed, record.best_epoch,
                 len(record.val_loss), record.test.auc)
        if out is not None:
            sdir = out / f"seed_{seed}"
            sdir.mkdir(parents=True, exist_ok=True)
            record.write_jsonl(sdir / "run.jsonl")
            save_checkpoint(sdir / "student", student, student_arch, seed=seed,
                            extra={"method": cfg.method, "init": record.init})
            if mhfa is not None:
                save_mhfa(sdir / "mhfa", mhfa)
        runs.append((seed, record))
    return runs


def run_experiment(cfg: ExperimentConfig, out: str | Path | None) -> dict:
    """Train every seed on the target dataset and write the experiment directory."""
    cfg.validate()
    bags, profile = sd.read_dataset(cfg.target)
    student_arch = _student_arch(cfg, profile)
    teacher = None
    if cfg.method != "none":
        teacher = load_teacher(cfg)
        # fail on method/arch conflicts before any training
        TransferSetting(cfg.method, cfg.alpha, teacher_arch=teacher[1], student_arch=student_arch)
    train, val, test = split_target(cfg, bags)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    runs = run_seeds(cfg, train, val, test, student_arch, teacher, out)
    provenance = {
        "version": __version__,
        "student_arch": student_arch.to_dict(),
        "teacher_arch": teacher[1].to_dict() if teacher else None,
        "split_sizes": [len(train), len(val), len(test)],
        "profile": profile.name,
    }
    if cfg.method == "mhfa":
        provenance["mhfa"] = {"m": cfg.heads, "alpha": cfg.alpha, "d_gate": cfg.d_gate}
    summary = summary_dict(cfg.to_dict(), runs, provenance)
    if out is not None:
        dump_json(out / "summary.json", summary)
        dump_json(out / "timing.json", {"total_seconds": time.perf_counter() - start,
                                        "per_seed": {str(s): r.wall_time for s, r in runs}})
    return summary


# ----------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchmarkConfig:
    """The tcga_a -> came_like directional benchmark at desk scale."""

    source_bags: int = 100
    target_bags: int = 200
    train_size: int = 40
    seeds: tuple[int, ...] = (0, 1, 2)
    methods: tuple[str, ...] = ("none", "mhfa")
    teacher_epochs: int = 5
    max_epochs: int = 25  # the most epochs that fit the 5 minute single-core budget
    patience: int = 20
    data_seed: int = 0
    split: str = "6:1.5:2.5"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_benchmark(bc: BenchmarkConfig = BenchmarkConfig(), out: str | Path | None = None) -> dict:
    """Train a tcga_a teacher, then every method on came_like; returns mean test AUC per method."""
    start = time.perf_counter()
    ratios = sd.parse_ratios(bc.split)
    src_prof, tgt_prof = sd.builtin_profile("tcga_a"), sd.builtin_profile("came_like")
    s_train, s_val, _ = sd.split_dataset(sd.generate_dataset(src_prof, bc.source_bags, bc.data_seed),
                                         ratios, bc.data_seed)
    t_arch = MILArch.preset("small", d_in=src_prof.d_in, n_classes=src_prof.n_classes)
    t_cfg = TrainConfig(TransferSetting("none", student_arch=t_arch), max_epochs=bc.teacher_epochs,
                        patience=bc.teacher_epochs, seed=bc.data_seed)
    t_params, _, t_rec = train_run(s_train, s_val, t_cfg)
    log.info("teacher: best epoch %d, val loss %.4f", t_rec.best_epoch, t_rec.best_val_loss)

    tgt = sd.generate_dataset(tgt_prof, bc.target_bags, bc.data_seed + 1)
    train, val, test = sd.split_dataset(tgt, ratios, bc.data_seed)
    train = train[:bc.train_size]
    s_arch = MILArch.preset("small", d_in=tgt_prof.d_in, n_classes=tgt_prof.n_classes)
    results: dict = {"config": bc.to_dict(), "methods": {}}
    out = Path(out) if out is not None else None
    for method in bc.methods:
        cfg = ExperimentConfig(target="came_like", source="tcga_a", method=method, seeds=list(bc.seeds),
                               max_epochs=bc.max_epochs, patience=bc.patience)
        teacher = (t_params, t_arch) if method != "none" else None
        mdir = out / method if out is not None else None
        runs = run_seeds(cfg, train, val, test, s_arch, teacher, mdir)
        results["methods"][method] = summary_dict(cfg.to_dict(), runs)
    results["seconds"] = time.perf_counter() - start
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_json(out / "benchmark.json", results)
    return results
