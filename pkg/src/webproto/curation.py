"""Noise control: clean-set selection, hybrid confidence scoring, and the
four-branch keep / correct / keep-hard / discard rule for web labels.

Class indices are 0-based. Few-shot samples never pass through these rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

KEPT = "kept"
CORRECTED = "corrected"
OOD_VERDICT = "ood"


@dataclass
class CurationConfig:
    sigma: float = 20.0  # clean-set threshold for relation pretraining
    beta: float = 0.5    # hybrid score mix
    gamma: float = 0.6   # keep / correct threshold

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must be in [0, 1]")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0, 1)")


@dataclass
class LabelState:
    sample_id: int
    given_label: int
    verdict: str                 # kept | corrected | ood
    new_label: int | None        # final label; None iff verdict == ood
    relation_prob: float         # normalized relation score of the given label
    scores: torch.Tensor         # hybrid score vector s, length C
    branch: int                  # 1..4


def select_clean_stage3(z: torch.Tensor, labels: torch.Tensor,
                        proto_vectors: torch.Tensor,
                        sigma: float) -> torch.Tensor:
    """Flag web samples whose residual to their class center has small
    total projection on all class centers. [n,d_p],[n],[C,d_p] -> [n] bool.
    """
    residual = z - proto_vectors[labels]
    return (residual @ proto_vectors.T).abs().sum(dim=-1) <= sigma


def hybrid_score(p: torch.Tensor, z: torch.Tensor,
                 proto_vectors: torch.Tensor, beta: float) -> torch.Tensor:
    """Convex mix of classifier probability and prototype similarity.
    No normalization is applied. [n,C],[n,d_p],[C,d_p] -> [n,C]."""
    return beta * p + (1.0 - beta) * (z @ proto_vectors.T)


def _argmax_first(row: torch.Tensor) -> int:
    # lowest-class-index-wins on ties
    return int((row == row.max()).nonzero(as_tuple=True)[0][0])


def adjust_label(relation_prob: torch.Tensor, s: torch.Tensor,
                 given: int, gamma: float, sample_id: int = -1) -> LabelState:
    """Four-branch verdict for one web sample.

    1. relation prob of the given label above gamma -> keep.
    2. else: max hybrid score above gamma -> relabel to its argmax.
    3. else: hybrid score of the given label above 1/C -> keep as hard example.
    4. else: discard as out-of-distribution.
    """
    C = s.shape[0]
    rel_given = float(relation_prob[given])
    if rel_given > gamma:
        return LabelState(sample_id, given, KEPT, given, rel_given, s, 1)
    if float(s.max()) > gamma:
        k = _argmax_first(s)
        verdict = KEPT if k == given else CORRECTED
        return LabelState(sample_id, given, verdict, k, rel_given, s, 2)
    if float(s[given]) > 1.0 / C:
        return LabelState(sample_id, given, KEPT, given, rel_given, s, 3)
    return LabelState(sample_id, given, OOD_VERDICT, None, rel_given, s, 4)


def adjust_labels_batch(relation_probs: torch.Tensor, s: torch.Tensor,
                        given: torch.Tensor, gamma: float,
                        sample_ids) -> list[LabelState]:
    return [adjust_label(relation_probs[i], s[i], int(given[i]), gamma,
                         int(sample_ids[i]))
            for i in range(len(given))]


def select_reliable_for_relation(
        states: list[LabelState]) -> list[tuple[int, int]]:
    """(sample_id, final label) for branch-1/2 verdicts; hard examples and
    discarded samples are excluded from relation training."""
    return [(st.sample_id, st.new_label) for st in states
            if st.branch in (1, 2)]
