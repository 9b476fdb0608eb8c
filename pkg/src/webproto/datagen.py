"""Synthetic paired web / real-world dataset generation with hidden ground truth.

Class clusters are isotropic Gaussians around orthonormal means scaled so
every pair of class means sits at a known, identical distance. Out-of-vocab
distractor clusters live at the antipodes of class means, which keeps them
at least one inter-mean distance away from every class center by
construction. The web domain is a rotated + per-class translated copy of
the real domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

OOD = -1  # truth_label sentinel for out-of-distribution samples

WEB = "web"
FEWSHOT = "fewshot"
TEST = "test"

# Distance between any two class means in the real domain.
INTER_MEAN_DIST = 1.0
FINE_GRAINED_DIST = 0.4


@dataclass
class DatasetSpec:
    num_classes: int
    input_dim: int
    web_per_class: int
    shots_per_class: int
    test_per_class: int
    flip_rate: float = 0.0
    ood_rate: float = 0.0
    domain_shift: float = 0.0
    class_spread: float = 0.1
    seed: int = 0
    fine_grained: bool = False
    flip_rate_per_class: list[float] | None = None

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_dim < self.num_classes:
            raise ValueError("input_dim must be >= num_classes for mean placement")
        if self.web_per_class < 1 or self.test_per_class < 1:
            raise ValueError("web_per_class and test_per_class must be positive")
        if self.shots_per_class < 0:
            raise ValueError("shots_per_class must be non-negative")
        if not (0.0 <= self.flip_rate < 1.0):
            raise ValueError("flip_rate must be in [0, 1)")
        if not (0.0 <= self.ood_rate < 1.0):
            raise ValueError("ood_rate must be in [0, 1)")
        if self.flip_rate + self.ood_rate >= 1.0:
            raise ValueError("flip_rate + ood_rate must be < 1")
        if self.domain_shift < 0:
            raise ValueError("domain_shift must be non-negative")
        if self.class_spread <= 0:
            raise ValueError("class_spread must be positive")
        if self.flip_rate_per_class is not None:
            if len(self.flip_rate_per_class) != self.num_classes:
                raise ValueError("flip_rate_per_class must have one entry per class")
            if any(not (0.0 <= r < 1.0) for r in self.flip_rate_per_class):
                raise ValueError("per-class flip rates must be in [0, 1)")

    @property
    def inter_mean_dist(self) -> float:
        return FINE_GRAINED_DIST if self.fine_grained else INTER_MEAN_DIST


@dataclass
class Sample:
    sample_id: int
    input: np.ndarray
    given_label: int  # 1..C
    source: str  # web | fewshot | test
    truth_label: int | None  # 1..C, OOD, or None when truth is withheld


def _class_geometry(spec: DatasetSpec, rng: np.random.Generator):
    """Return (class_means [C,d], distractor_means [D,d]) in the real domain."""
    C, d = spec.num_classes, spec.input_dim
    raw = rng.standard_normal((d, C))
    q, _ = np.linalg.qr(raw)
    # Orthonormal unit vectors are sqrt(2) apart; rescale to the target distance.
    scale = spec.inter_mean_dist / math.sqrt(2.0)
    means = q.T * scale  # [C, d]
    n_distractors = max(1, C // 3)
    # Antipodes sit at 2*scale from their own class and exactly one
    # inter-mean distance from every other class mean.
    distractors = -means[:n_distractors]
    return means, distractors


def _domain_transform(spec: DatasetSpec, rng: np.random.Generator):
    """Rotation matrix and per-cluster translations for the web domain."""
    d = spec.input_dim
    skew = rng.standard_normal((d, d))
    skew = (skew - skew.T) / 2.0
    norm = np.linalg.norm(skew, 2)
    if norm > 0:
        skew = skew / norm
    rot = torch.matrix_exp(torch.from_numpy(spec.domain_shift * skew)).numpy()
    n_clusters = spec.num_classes + max(1, spec.num_classes // 3)
    dirs = rng.standard_normal((n_clusters, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    shifts = dirs * spec.domain_shift * spec.inter_mean_dist
    return rot, shifts


def generate(spec: DatasetSpec) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Generate (web, fewshot, test) sample lists, pure in (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, d = spec.num_classes, spec.input_dim
    means, distractors = _class_geometry(spec, rng)
    rot, shifts = _domain_transform(spec, rng)

    next_id = 0

    def draw(mean: np.ndarray) -> np.ndarray:
        return mean + spec.class_spread * rng.standard_normal(d)

    web: list[Sample] = []
    n_web = C * spec.web_per_class
    truth = np.repeat(np.arange(1, C + 1), spec.web_per_class)
    rng.shuffle(truth)

    n_ood = round(spec.ood_rate * n_web)
    ood_idx = rng.choice(n_web, size=n_ood, replace=False)
    is_ood = np.zeros(n_web, dtype=bool)
    is_ood[ood_idx] = True

    ind_idx = np.flatnonzero(~is_ood)
    if spec.flip_rate_per_class is not None:
        flip_set: list[int] = []
        for k in range(1, C + 1):
            k_idx = ind_idx[truth[ind_idx] == k]
            n_flip_k = round(spec.flip_rate_per_class[k - 1] * len(k_idx))
            flip_set.extend(rng.choice(k_idx, size=n_flip_k, replace=False))
        flip_idx = np.array(flip_set, dtype=int)
    else:
        n_flip = round(spec.flip_rate * len(ind_idx))
        flip_idx = rng.choice(ind_idx, size=n_flip, replace=False)
    is_flip = np.zeros(n_web, dtype=bool)
    is_flip[flip_idx] = True

    for i in range(n_web):
        if is_ood[i]:
            cluster = rng.integers(len(distractors))
            x = rot @ draw(distractors[cluster]) + shifts[C + cluster]
            given = int(rng.integers(1, C + 1))
            web.append(Sample(next_id, x, given, WEB, OOD))
        else:
            k = int(truth[i])
            x = rot @ draw(means[k - 1]) + shifts[k - 1]
            if is_flip[i]:
                given = int(rng.integers(1, C))
                if given >= k:
                    given += 1
            else:
                given = k
            web.append(Sample(next_id, x, given, WEB, k))
        next_id += 1

    fewshot: list[Sample] = []
    for k in range(1, C + 1):
        for _ in range(spec.shots_per_class):
            fewshot.append(Sample(next_id, draw(means[k - 1]), k, FEWSHOT, k))
            next_id += 1

    test: list[Sample] = []
    for k in range(1, C + 1):
        for _ in range(spec.test_per_class):
            test.append(Sample(next_id, draw(means[k - 1]), k, TEST, k))
            next_id += 1

    return web, fewshot, test


def noise_summary(web: list[Sample]) -> tuple[int, int, int]:
    """Count (clean, flipped, ood) web samples from their hidden truth."""
    n_ood = sum(1 for s in web if s.truth_label == OOD)
    n_flipped = sum(
        1 for s in web if s.truth_label != OOD and s.given_label != s.truth_label
    )
    return len(web) - n_flipped - n_ood, n_flipped, n_ood


def perturb(x: np.ndarray, strength: float, seed: int) -> np.ndarray:
    """Additive Gaussian perturbation, deterministic in seed; identity at 0."""
    if strength < 0:
        raise ValueError("strength must be non-negative")
    if strength == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + strength * rng.standard_normal(x.shape)


# ---------------------------------------------------------------------------
# Disk format: meta + one TSV per split. Columns are
# sample_id, given_label, truth_label, source, then input_dim features.
# Truth columns exist for evaluation only; the trainer loads without them.
# ---------------------------------------------------------------------------

def save_dataset(out_dir: str | Path, spec: DatasetSpec,
                 web: list[Sample], fewshot: list[Sample],
                 test: list[Sample]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_clean, n_flipped, n_ood = noise_summary(web)
    with open(out / "meta", "w") as f:
        for key, val in asdict(spec).items():
            f.write(f"{key}: {val}\n")
        f.write(f"n_web: {len(web)}\n")
        f.write(f"n_fewshot: {len(fewshot)}\n")
        f.write(f"n_test: {len(test)}\n")
        f.write(f"n_clean: {n_clean}\n")
        f.write(f"n_flipped: {n_flipped}\n")
        f.write(f"n_ood: {n_ood}\n")
    for name, split in ((WEB, web), (FEWSHOT, fewshot), (TEST, test)):
        with open(out / f"{name}.tsv", "w") as f:
            for s in split:
                feats = "\t".join(repr(float(v)) for v in s.input)
                f.write(f"{s.sample_id}\t{s.given_label}\t{s.truth_label}\t"
                        f"{s.source}\t{feats}\n")


def load_split(path: str | Path, with_truth: bool = True) -> list[Sample]:
    samples = []
    with open(path) as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            sid, given, truth, source = parts[:4]
            x = np.array([float(v) for v in parts[4:]])
            samples.append(Sample(int(sid), x, int(given), source,
                                  int(truth) if with_truth else None))
    return samples


def load_dataset(data_dir: str | Path, with_truth: bool = True):
    d = Path(data_dir)
    return (load_split(d / "web.tsv", with_truth),
            load_split(d / "fewshot.tsv", with_truth),
            load_split(d / "test.tsv", with_truth))


def read_meta(data_dir: str | Path) -> dict:
    meta = {}
    with open(Path(data_dir) / "meta") as f:
        for line in f:
            key, _, val = line.partition(":")
            meta[key.strip()] = val.strip()
    return meta
