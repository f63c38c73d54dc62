"""Seeded synthetic MIL bags with a controllable source/target domain shift.

Each bag mixes "witness" instances drawn around its class mean with
background instances around the origin; ``witness_fraction`` sets how much
of a bag carries the signal and ``mean_shift`` offsets every feature, a
stand-in for stain/tone differences between sites.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import milb
from .seeding import derive_seed

FORMAT_VERSION = 1
PROTOTYPE_SEED = 20230614
PROTOTYPE_SCALE = 0.15


class DatasetError(ValueError):
    """A dataset directory or profile is invalid."""


class DatasetFormatError(DatasetError):
    """Dataset files on disk are malformed or inconsistent."""


@dataclass
class Bag:
    instances: np.ndarray
    label: int
    bag_id: str
    witness_mask: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.instances.shape[0]


@dataclass
class DomainProfile:
    name: str
    n_classes: int
    witness_fraction: float
    class_means: np.ndarray
    mean_shift: float = 0.0
    noise_scale: float = 1.0
    n_range: tuple[int, int] = (50, 200)
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.n_range = tuple(int(v) for v in self.n_range)
        if self.class_weights is None:
            self.class_weights = tuple([1.0 / self.n_classes] * self.n_classes)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.validate()

    @property
    def d_in(self) -> int:
        return self.class_means.shape[1]

    def validate(self) -> None:
        if self.n_classes < 1:
            raise DatasetError(f"{self.name}: n_classes must be >= 1")
        if not 0.0 < self.witness_fraction <= 1.0:
            raise DatasetError(f"{self.name}: witness_fraction must lie in (0, 1], got {self.witness_fraction}")
        if self.class_means.ndim != 2 or self.class_means.shape[0] != self.n_classes:
            raise DatasetError(f"{self.name}: class_means must be n_classes x d_in, got {self.class_means.shape}")
        lo, hi = self.n_range
        if lo < 1 or hi < lo:
            raise DatasetError(f"{self.name}: bad n_range {self.n_range}")
        if len(self.class_weights) != self.n_classes or min(self.class_weights) < 0 or \
                abs(sum(self.class_weights) - 1.0) > 1e-9:
            raise DatasetError(f"{self.name}: class_weights must be a distribution over {self.n_classes} classes")
        if self.noise_scale < 0:
            raise DatasetError(f"{self.name}: noise_scale must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_means"] = self.class_means.tolist()
        d["n_range"] = list(self.n_range)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainProfile":
        try:
            return cls(**d)
        except TypeError as exc:
            raise DatasetError(f"bad profile record: {exc}") from exc


def prototypes(d_in: int = 1024, count: int = 5) -> np.ndarray:
    """Fixed bank of class-mean vectors shared by the built-in profiles."""
    rng = np.random.default_rng(PROTOTYPE_SEED)
    return rng.normal(0.0, PROTOTYPE_SCALE, size=(count, d_in))


BUILTIN_PROFILES = ("tcga_a", "tcga_b", "came_like")


def builtin_profile(name: str, d_in: int = 1024) -> DomainProfile:
    """Built-in domains.

    ``tcga_a`` (3 classes) and ``tcga_b`` (2 classes) have dense witnesses
    (80% of a bag); ``came_like`` has sparse ones (10%) and a larger tone
    shift. ``came_like`` negatives are pure background and its positive
    class reuses a ``tcga_a`` class mean, so a ``tcga_a`` teacher carries
    usable knowledge.
    """
    P = prototypes(d_in)
    zero = np.zeros(d_in)
    if name == "tcga_a":
        return DomainProfile(name, 3, 0.8, P[[0, 1, 2]])
    if name == "tcga_b":
        return DomainProfile(name, 2, 0.8, P[[1, 3]], mean_shift=0.5)
    if name == "came_like":
        return DomainProfile(name, 2, 0.1, np.stack([zero, P[1]]), mean_shift=1.0)
    raise DatasetError(f"unknown profile {name!r}; built-ins are {', '.join(BUILTIN_PROFILES)}")


def witness_count(witness_fraction: float, n: int) -> int:
    # round first so 0.1 * 70 = 7.000000000000001 does not ceil to 8
    return min(n, math.ceil(round(witness_fraction * n, 9)))


def generate_bag(profile: DomainProfile, seed: int, bag_id: str) -> Bag:
    rng = np.random.default_rng(derive_seed(seed, bag_id))
    label = int(rng.choice(profile.n_classes, p=profile.class_weights))
    lo, hi = profile.n_range
    n = int(rng.integers(lo, hi + 1))
    k = witness_count(profile.witness_fraction, n)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:k]] = True
    centres = np.where(mask[:, None], profile.class_means[label][None, :], 0.0)
    x = centres + profile.mean_shift + profile.noise_scale * rng.standard_normal((n, profile.d_in))
    return Bag(x, label, bag_id, mask)


def bag_ids(profile: DomainProfile, n_bags: int) -> list[str]:
    return [f"{profile.name}_{i:05d}" for i in range(n_bags)]


def generate_dataset(profile: DomainProfile, n_bags: int, seed: int) -> list[Bag]:
    if n_bags < 1:
        raise DatasetError("n_bags must be >= 1")
    profile.validate()
    return [generate_bag(profile, seed, bid) for bid in bag_ids(profile, n_bags)]


def split_dataset(bags: list, ratios: tuple[float, float, float], seed: int) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous train/val/test cuts; rounding slack goes to train."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DatasetError(f"split ratios must be three positive numbers, got {ratios}")
    total = float(sum(ratios))
    N = len(bags)
    n_val = math.floor(ratios[1] / total * N)
    n_test = math.floor(ratios[2] / total * N)
    n_train = N - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"split {ratios} of {N} bags leaves an empty part ({n_train}/{n_val}/{n_test})")
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(N)
    shuffled = [bags[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise DatasetError(f"bad split {text!r}; expected a:b:c") from exc
    if len(vals) != 3:
        raise DatasetError(f"bad split {text!r}; expected a:b:c")
    return vals


def write_dataset(bags: list[Bag], directory: str | Path, profile: DomainProfile) -> Path:
    directory = Path(directory)
    (directory / "bags").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in bags:
        fname = f"bags/{bag.bag_id}.milb"
        milb.write(directory / fname, bag.instances)
        entries.append({"id": bag.bag_id, "label": bag.label, "file": fname})
    manifest = {"format_version": FORMAT_VERSION, "profile": profile.to_dict(), "bags": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest) + "\n")
    return directory


def read_dataset(directory: str | Path) -> tuple[list[Bag], DomainProfile]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"{directory}: no manifest.json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    try:
        profile = DomainProfile.from_dict(manifest["profile"])
        entries = manifest["bags"]
    except (KeyError, DatasetError) as exc:
        raise DatasetFormatError(f"{path}: bad manifest ({exc})") from exc
    bags = []
    for entry in entries:
        bid, label = entry["id"], int(entry["label"])
        if not 0 <= label < profile.n_classes:
            raise DatasetFormatError(f"bag {bid}: label {label} out of range for {profile.n_classes} classes")
        fpath = directory / entry["file"]
        if not fpath.is_file():
            raise FileNotFoundError(f"bag {bid}: missing file {entry['file']}")
        x = milb.read(fpath, name=f"bag {bid}")
        if x.shape[1] != profile.d_in:
            raise DatasetFormatError(f"bag {bid}: width {x.shape[1]} but profile d_in is {profile.d_in}")
        bags.append(Bag(x, label, bid))
    return bags, profile


def load_profile(name_or_path: str, d_in: int | None = None) -> DomainProfile:
    """A built-in profile name or a path to a JSON profile file."""
    if name_or_path in BUILTIN_PROFILES:
        return builtin_profile(name_or_path, d_in or 1024)
    path = Path(name_or_path)
    if not path.is_file():
        raise DatasetError(f"{name_or_path!r} is neither a built-in profile nor a file")
    return DomainProfile.from_dict(json.loads(path.read_text()))
