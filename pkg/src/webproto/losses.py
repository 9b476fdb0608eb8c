"""Training objectives.

All functions are pure in their tensor inputs and return per-sample loss
vectors; callers reduce. Class indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class LossConfig:
    tau: float = 0.1        # instance-contrast temperature
    delta_w: float = 0.0    # margin for web samples
    delta_t: float = 0.5    # margin for few-shot samples (tighter)
    weights: dict = field(default_factory=lambda: {
        "cls": 1.0, "prj": 1.0, "proto": 1.0, "ins": 1.0,
        "rel": 1.0, "hybrid": 1.0,
    })

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.delta_t < self.delta_w:
            raise ValueError("delta_t must be >= delta_w")


def loss_cls(p: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on already-normalized probabilities. [n,C],[n] -> [n]."""
    if labels.min() < 0 or labels.max() >= p.shape[-1]:
        raise ValueError("label out of range")
    return -torch.log(p.gather(-1, labels.unsqueeze(-1)).squeeze(-1))


def loss_prj(v_rec: torch.Tensor, v: torch.Tensor, q: torch.Tensor,
             labels: torch.Tensor, aux_mask: torch.Tensor) -> torch.Tensor:
    """Squared reconstruction error, plus auxiliary cross-entropy on the
    rows selected by aux_mask (few shots, or confident web in 0-shot mode).
    """
    rec = ((v_rec - v) ** 2).sum(dim=-1)
    aux = -torch.log(q.gather(-1, labels.unsqueeze(-1)).squeeze(-1))
    return rec + aux * aux_mask.to(rec.dtype)


def loss_proto(z: torch.Tensor, labels: torch.Tensor,
               proto_vectors: torch.Tensor, temps: torch.Tensor,
               margins: torch.Tensor) -> torch.Tensor:
    """Prototypical contrast with per-class temperatures and a per-sample
    margin subtracted inside every denominator term.

    z: [n,d_p], proto_vectors: [C,d_p], temps: [C], margins: [n].
    """
    logits = (z @ proto_vectors.T - margins.unsqueeze(-1)) / temps.unsqueeze(0)
    return torch.logsumexp(logits, dim=-1) - logits.gather(
        -1, labels.unsqueeze(-1)).squeeze(-1)


def loss_ins(z: torch.Tensor, z_pos: torch.Tensor,
             bank_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """Instance contrast of z against its momentum positive, with the bank
    snapshot as negatives. Empty bank degenerates to zero loss.
    """
    pos = (z * z_pos).sum(dim=-1, keepdim=True) / tau
    if bank_embs.numel() == 0:
        return torch.zeros(z.shape[0], dtype=z.dtype)
    neg = (z @ bank_embs.T) / tau
    all_logits = torch.cat([pos, neg], dim=-1)
    return torch.logsumexp(all_logits, dim=-1) - pos.squeeze(-1)


def loss_rel(r: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over relation scores. [n,C],[n] -> [n]."""
    return torch.logsumexp(r, dim=-1) - r.gather(
        -1, labels.unsqueeze(-1)).squeeze(-1)


def loss_hybrid_web(p_web: torch.Tensor, corrected: torch.Tensor,
                    confidence: torch.Tensor) -> torch.Tensor:
    """Confidence-weighted mix of the hard corrected-label target and the
    soft self-target: s * CE(corrected) + (1 - s) * entropy(p).

    Confidence is clamped to [0, 1]; prototype similarities can be negative.
    """
    s = confidence.clamp(0.0, 1.0)
    hard = -torch.log(p_web.gather(-1, corrected.unsqueeze(-1)).squeeze(-1))
    neg_plogp = -(p_web * torch.log(p_web)).sum(dim=-1)
    return s * hard + (1.0 - s) * neg_plogp


def loss_hybrid(p_web: torch.Tensor, corrected: torch.Tensor,
                confidence: torch.Tensor, p_fewshot: torch.Tensor,
                fewshot_labels: torch.Tensor) -> torch.Tensor:
    """Full hybrid target: few-shot hard CE plus the confidence-weighted
    web term. Scalar (sums both parts; callers wanting means use the parts).
    """
    web = loss_hybrid_web(p_web, corrected, confidence).sum()
    fs = loss_cls(p_fewshot, fewshot_labels).sum()
    return web + fs
