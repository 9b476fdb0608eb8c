"""Network components: siamese encoder pair with EMA coupling, heads, and
the FIFO embedding bank used as the negative pool for instance contrast.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

UNLABELED = -1  # bank label for entries without a class assignment


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int
    feature_dim: int = 64   # d_e
    proj_dim: int = 128     # d_p
    hidden_dim: int = 64
    encoder_momentum: float = 0.999  # m_e
    bank_capacity: int = 8192       # Q
    dtype: str = "float32"

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


class Encoder(nn.Module):
    """Dense feature extractor: input_dim -> hidden -> hidden -> feature_dim."""

    def __init__(self, input_dim: int, hidden_dim: int, feature_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, feature_dim),
        )

    def forward(self, x):
        return self.net(x)


class Projector(nn.Module):
    """Two affine maps with one ReLU; output l2-normalized."""

    def __init__(self, feature_dim: int, proj_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.ReLU(),
            nn.Linear(feature_dim, proj_dim),
        )

    def forward(self, v):
        return F.normalize(self.net(v), dim=-1)


class RelationHead(nn.Module):
    """Scores the compatibility of (instance embedding, prototype) pairs."""

    def __init__(self, proj_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * proj_dim, proj_dim), nn.ReLU(),
            nn.Linear(proj_dim, 1),
        )

    def forward(self, z: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        """z: [n, d_p], prototypes: [C, d_p] -> scores [n, C]."""
        n, C = z.shape[0], prototypes.shape[0]
        zi = z.unsqueeze(1).expand(n, C, z.shape[1])
        ck = prototypes.unsqueeze(0).expand(n, C, prototypes.shape[1])
        pairs = torch.cat([zi, ck], dim=-1)
        return self.net(pairs).squeeze(-1)


class Network(nn.Module):
    """Plain-path network: encoder plus all heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.input_dim, cfg.hidden_dim, cfg.feature_dim)
        self.classifier = nn.Linear(cfg.feature_dim, cfg.num_classes)
        self.projector = Projector(cfg.feature_dim, cfg.proj_dim)
        self.reconstructor = nn.Sequential(
            nn.Linear(cfg.proj_dim, cfg.feature_dim), nn.ReLU(),
            nn.Linear(cfg.feature_dim, cfg.feature_dim),
        )
        self.aux_classifier = nn.Linear(cfg.proj_dim, cfg.num_classes)
        self.relation = RelationHead(cfg.proj_dim)

    def forward(self, x):
        if x.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"expected input dim {self.cfg.input_dim}, "
                             f"got {x.shape[-1]}")
        v = self.encoder(x)
        p = F.softmax(self.classifier(v), dim=-1)
        z = self.projector(v)
        v_rec = self.reconstructor(z)
        q = F.softmax(self.aux_classifier(z), dim=-1)
        return v, p, z, v_rec, q


class ModelPair(nn.Module):
    """Plain network plus a momentum copy of (encoder, projector).

    The momentum side never receives gradients; it tracks the plain side
    through `ema_step` and is initialized as an exact copy.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.plain = Network(cfg)
        self.m_encoder = copy.deepcopy(self.plain.encoder)
        self.m_projector = copy.deepcopy(self.plain.projector)
        for p in self.m_encoder.parameters():
            p.requires_grad_(False)
        for p in self.m_projector.parameters():
            p.requires_grad_(False)
        self.to(cfg.torch_dtype())

    def forward_plain(self, x):
        return self.plain(x)

    @torch.no_grad()
    def forward_momentum(self, x):
        if x.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"expected input dim {self.cfg.input_dim}, "
                             f"got {x.shape[-1]}")
        return self.m_projector(self.m_encoder(x))

    def relation_scores(self, z, prototypes):
        if prototypes.shape[0] != self.cfg.num_classes:
            raise ValueError("prototypes incomplete: expected one per class")
        return self.plain.relation(z, prototypes)

    @torch.no_grad()
    def ema_step(self):
        m = self.cfg.encoder_momentum
        for src, dst in ((self.plain.encoder, self.m_encoder),
                         (self.plain.projector, self.m_projector)):
            for p_src, p_dst in zip(src.parameters(), dst.parameters()):
                p_dst.mul_(m).add_((1.0 - m) * p_src)

    def momentum_parameters(self):
        yield from self.m_encoder.parameters()
        yield from self.m_projector.parameters()


class EmbeddingBank:
    """Fixed-capacity FIFO of (unit-norm embedding, label) pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: deque[tuple[torch.Tensor, int]] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    def push(self, z: torch.Tensor, labels=None) -> None:
        z = z.detach()
        for i in range(z.shape[0]):
            label = UNLABELED if labels is None else int(labels[i])
            self._entries.append((z[i].clone(), label))

    def view(self) -> tuple[torch.Tensor, list[int]]:
        """Snapshot of current contents, oldest first."""
        if not self._entries:
            return torch.empty(0), []
        embs = torch.stack([e for e, _ in self._entries])
        return embs, [l for _, l in self._entries]

    def state(self) -> dict:
        embs, labels = self.view()
        return {"capacity": self.capacity, "embeddings": embs, "labels": labels}

    @classmethod
    def from_state(cls, state: dict) -> "EmbeddingBank":
        bank = cls(state["capacity"])
        embs = state["embeddings"]
        if len(embs):
            bank.push(embs, state["labels"])
        return bank


def save_checkpoint(path, pair: ModelPair, bank: EmbeddingBank,
                    extra: dict | None = None) -> None:
    torch.save({
        "model_config": pair.cfg.__dict__,
        "model_state": pair.state_dict(),
        "bank": bank.state(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path) -> tuple[ModelPair, EmbeddingBank, dict]:
    blob = torch.load(path, weights_only=False)
    cfg = ModelConfig(**blob["model_config"])
    pair = ModelPair(cfg)
    pair.load_state_dict(blob["model_state"])
    bank = EmbeddingBank.from_state(blob["bank"])
    return pair, bank, blob["extra"]
