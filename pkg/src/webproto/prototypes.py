"""Class prototypes: few-shot initialization, per-class concentration
temperatures, and EMA polish from samples ruled clean.

Class indices are 0-based throughout this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

TEMP_CLAMP_LO_FACTOR = 0.05
TEMP_CLAMP_HI_FACTOR = 20.0


@dataclass
class PrototypeConfig:
    num_classes: int
    proj_dim: int
    momentum: float = 0.999  # m_p
    alpha: float = 10.0      # concentration smoother
    tau: float = 0.1         # default temperature before first refresh

    @property
    def temp_lo(self) -> float:
        return TEMP_CLAMP_LO_FACTOR * self.tau

    @property
    def temp_hi(self) -> float:
        return TEMP_CLAMP_HI_FACTOR * self.tau


class PrototypeStore:
    """One unit-norm center and one temperature per class."""

    def __init__(self, cfg: PrototypeConfig, vectors: torch.Tensor):
        if vectors.shape != (cfg.num_classes, cfg.proj_dim):
            raise ValueError("prototype matrix shape mismatch")
        self.cfg = cfg
        self.vectors = F.normalize(vectors, dim=-1)
        self.temps = torch.full((cfg.num_classes,), cfg.tau,
                                dtype=vectors.dtype)
        self.counts = torch.zeros(cfg.num_classes, dtype=torch.long)

    @classmethod
    def init_from_fewshots(cls, cfg: PrototypeConfig, z: torch.Tensor,
                           labels: torch.Tensor) -> "PrototypeStore":
        """Mean-then-normalize of few-shot embeddings per class."""
        vectors = torch.zeros(cfg.num_classes, cfg.proj_dim, dtype=z.dtype)
        for k in range(cfg.num_classes):
            members = z[labels == k]
            if members.shape[0] == 0:
                raise ValueError(f"class {k} has no few-shot embeddings")
            vectors[k] = members.mean(dim=0)
        return cls(cfg, vectors)

    @classmethod
    def init_zero_shot(cls, cfg: PrototypeConfig, z: torch.Tensor,
                       labels: torch.Tensor, per_class_n: int,
                       seed: int) -> "PrototypeStore":
        """Average `per_class_n` randomly sampled web embeddings per class."""
        gen = torch.Generator().manual_seed(seed)
        vectors = torch.zeros(cfg.num_classes, cfg.proj_dim, dtype=z.dtype)
        for k in range(cfg.num_classes):
            idx = torch.nonzero(labels == k, as_tuple=True)[0]
            if idx.numel() == 0:
                raise ValueError(f"class {k} has no web embeddings")
            take = min(per_class_n, idx.numel())
            perm = torch.randperm(idx.numel(), generator=gen)[:take]
            vectors[k] = z[idx[perm]].mean(dim=0)
        return cls(cfg, vectors)

    @torch.no_grad()
    def refresh_temperatures(self, z: torch.Tensor,
                             labels: torch.Tensor) -> None:
        """Per-class concentration: mean member distance, damped by the log
        of the member count. Empty classes keep their prior temperature."""
        for k in range(self.cfg.num_classes):
            members = z[labels == k]
            n = members.shape[0]
            if n == 0:
                continue
            dist_sum = torch.linalg.norm(
                members - self.vectors[k], dim=-1).sum()
            phi = float(dist_sum) / (n * math.log(n + self.cfg.alpha))
            self.temps[k] = min(max(phi, self.cfg.temp_lo), self.cfg.temp_hi)
            self.counts[k] = n

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, k: int) -> None:
        """Blend one clean embedding into class k's center and renormalize."""
        m = self.cfg.momentum
        blended = m * self.vectors[k] + (1.0 - m) * z
        self.vectors[k] = F.normalize(blended, dim=-1)
        self.counts[k] += 1

    def reset_counts(self) -> None:
        self.counts.zero_()

    def state(self) -> dict:
        return {"config": self.cfg.__dict__, "vectors": self.vectors,
                "temps": self.temps, "counts": self.counts}

    @classmethod
    def from_state(cls, state: dict) -> "PrototypeStore":
        store = cls(PrototypeConfig(**state["config"]), state["vectors"])
        # restore verbatim: renormalizing would perturb the last bits
        store.vectors = state["vectors"].clone()
        store.temps = state["temps"].clone()
        store.counts = state["counts"].clone()
        return store

    def dump_report(self, fewshot_means: torch.Tensor | None = None) -> str:
        """Structured text report, one row per class (1-based ids)."""
        lines = ["class\ttemperature\tmember_count\tcos_to_fewshot_mean\tcenter"]
        for k in range(self.cfg.num_classes):
            if fewshot_means is not None:
                cos = float(F.cosine_similarity(
                    self.vectors[k], fewshot_means[k], dim=0))
                cos_str = f"{cos:.6f}"
            else:
                cos_str = "NA"
            center = " ".join(f"{v:.6f}" for v in self.vectors[k])
            lines.append(f"{k + 1}\t{float(self.temps[k]):.6f}\t"
                         f"{int(self.counts[k])}\t{cos_str}\t{center}")
        return "\n".join(lines) + "\n"
