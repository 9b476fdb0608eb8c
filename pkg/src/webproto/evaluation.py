"""Checkpoint and curation-log scoring against hidden ground truth, plus
the K-shot sweep and the relation-metric ablation.

Truth columns are consumed here and nowhere else.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F

from . import datagen, trainer as trainer_mod
from .config import TrainConfig
from .datagen import OOD
from .model import load_checkpoint
from .prototypes import PrototypeStore
from .trainer import is_web_holdout


@dataclass
class EvalReport:
    top1: float
    top5: float
    web_test_accuracy: float
    gap: float
    correction_precision: float = float("nan")
    correction_recall: float = float("nan")
    correction_f1: float = float("nan")
    ood_precision: float = float("nan")
    ood_recall: float = float("nan")
    proto_fewshot_cosine: list[float] = field(default_factory=list)
    mean_intra_class_dist: float = float("nan")
    mean_inter_proto_dist: float = float("nan")

    COLUMNS = ["top1", "top5", "web_test_accuracy", "gap",
               "correction_precision", "correction_recall", "correction_f1",
               "ood_precision", "ood_recall", "mean_intra_class_dist",
               "mean_inter_proto_dist"]

    def to_text(self) -> str:
        lines = [f"{c}: {getattr(self, c):.6f}" for c in self.COLUMNS]
        for k, cos in enumerate(self.proto_fewshot_cosine):
            lines.append(f"proto_fewshot_cosine_{k + 1}: {cos:.6f}")
        return "\n".join(lines) + "\n"


def _forward_probs(pair, x: np.ndarray) -> torch.Tensor:
    xt = torch.as_tensor(x, dtype=pair.cfg.torch_dtype())
    with torch.no_grad():
        _, p, _, _, _ = pair.forward_plain(xt)
    return p


def _topk_accuracy(p: torch.Tensor, truth0: torch.Tensor, k: int) -> float:
    k = min(k, p.shape[-1])
    topk = p.topk(k, dim=-1).indices
    return float((topk == truth0.unsqueeze(-1)).any(dim=-1)
                 .to(torch.float64).mean())


def score_curation(log_path, web: list[datagen.Sample]) -> dict:
    """Score a per-epoch verdict log against hidden web truth."""
    truth = {s.sample_id: s.truth_label for s in web}
    n_corr_tp = n_corrected = n_flipped = 0
    n_ood_tp = n_ood_flagged = n_ood_truth = 0
    with open(log_path) as f:
        next(f)  # header
        for line in f:
            sid_s, given_s, verdict, new_s, *_ = line.rstrip("\n").split("\t")
            sid, given = int(sid_s), int(given_s)
            t = truth[sid]
            flipped = t != OOD and given != t
            if flipped:
                n_flipped += 1
            if t == OOD:
                n_ood_truth += 1
            if verdict == "corrected":
                n_corrected += 1
                if new_s and int(new_s) == t:
                    n_corr_tp += 1
            elif verdict == "ood":
                n_ood_flagged += 1
                if t == OOD:
                    n_ood_tp += 1
    prec = n_corr_tp / n_corrected if n_corrected else 0.0
    rec = n_corr_tp / n_flipped if n_flipped else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return {
        "correction_precision": prec,
        "correction_recall": rec,
        "correction_f1": f1,
        "ood_precision": (n_ood_tp / n_ood_flagged if n_ood_flagged else 0.0),
        "ood_recall": (n_ood_tp / n_ood_truth if n_ood_truth else 0.0),
    }


def last_curation_log(run_dir) -> Path | None:
    logs = sorted(Path(run_dir, "curation").glob("epoch_*.tsv"))
    return logs[-1] if logs else None


def evaluate(checkpoint_path, data_dir, curation_log=None) -> EvalReport:
    pair, _, extra = load_checkpoint(checkpoint_path)
    web, fewshot, test = datagen.load_dataset(data_dir, with_truth=True)
    if web[0].input.shape[0] != pair.cfg.input_dim:
        raise ValueError("checkpoint and dataset input dims differ")
    if extra.get("num_classes", pair.cfg.num_classes) != pair.cfg.num_classes:
        raise ValueError("checkpoint and dataset class counts differ")

    test_x = np.stack([s.input for s in test])
    test_y0 = torch.tensor([s.truth_label - 1 for s in test])
    p_test = _forward_probs(pair, test_x)
    top1 = _topk_accuracy(p_test, test_y0, 1)
    top5 = _topk_accuracy(p_test, test_y0, 5)

    # Web-domain test split: the held-out tenth, clean non-OOD only.
    held = [s for i, s in enumerate(web)
            if is_web_holdout(i) and s.truth_label != OOD
            and s.truth_label == s.given_label]
    if held:
        p_web = _forward_probs(pair, np.stack([s.input for s in held]))
        web_y0 = torch.tensor([s.truth_label - 1 for s in held])
        web_acc = _topk_accuracy(p_web, web_y0, 1)
    else:
        web_acc = float("nan")
    report = EvalReport(top1=top1, top5=top5, web_test_accuracy=web_acc,
                        gap=web_acc - top1)

    if curation_log is not None:
        for k, v in score_curation(curation_log, web).items():
            setattr(report, k, v)

    if extra.get("protos") is not None:
        protos = PrototypeStore.from_state(extra["protos"])
        with torch.no_grad():
            z_test = pair.forward_momentum(
                torch.as_tensor(test_x, dtype=pair.cfg.torch_dtype()))
            report.mean_intra_class_dist = float(torch.linalg.norm(
                z_test - protos.vectors[test_y0], dim=-1).mean())
            pd = torch.cdist(protos.vectors, protos.vectors)
            C = protos.cfg.num_classes
            report.mean_inter_proto_dist = float(
                pd.sum() / (C * (C - 1))) if C > 1 else 0.0
            if fewshot:
                fs_x = np.stack([s.input for s in fewshot])
                fs_y0 = torch.tensor([s.given_label - 1 for s in fewshot])
                z_fs = pair.forward_momentum(
                    torch.as_tensor(fs_x, dtype=pair.cfg.torch_dtype()))
                for k in range(C):
                    mean_k = F.normalize(z_fs[fs_y0 == k].mean(dim=0), dim=0)
                    report.proto_fewshot_cosine.append(
                        float((protos.vectors[k] * mean_k).sum()))
    return report


def export_embeddings(checkpoint_path, data_dir, out_path) -> int:
    """Dump plain-path embeddings for every sample; returns the row count."""
    pair, _, _ = load_checkpoint(checkpoint_path)
    web, fewshot, test = datagen.load_dataset(data_dir, with_truth=True)
    n = 0
    with open(out_path, "w") as f:
        for split in (web, fewshot, test):
            if not split:
                continue
            x = np.stack([s.input for s in split])
            xt = torch.as_tensor(x, dtype=pair.cfg.torch_dtype())
            with torch.no_grad():
                z = pair.plain.projector(pair.plain.encoder(xt))
            for s, zi in zip(split, z):
                feats = "\t".join(repr(float(v)) for v in zi)
                f.write(f"{s.sample_id}\t{s.source}\t{s.given_label}\t"
                        f"{s.truth_label}\t{feats}\n")
                n += 1
    return n


def _prepare_dataset(cfg: TrainConfig, data_dir) -> None:
    web, fewshot, test = datagen.generate(cfg.data)
    datagen.save_dataset(data_dir, cfg.data, web, fewshot, test)


def run_and_score(cfg: TrainConfig, work_dir,
                  relation_mode: str = "learned",
                  branch1_target_rate: float | None = None,
                  data_dir=None) -> tuple[EvalReport, Path]:
    """Generate data (unless given), train, and evaluate one configuration."""
    work = Path(work_dir)
    if data_dir is None:
        data_dir = work / "data"
        _prepare_dataset(cfg, data_dir)
    run_dir = work / "run"
    ckpt = trainer_mod.train(cfg, data_dir, run_dir,
                             relation_mode=relation_mode,
                             branch1_target_rate=branch1_target_rate)
    report = evaluate(ckpt, data_dir, curation_log=last_curation_log(run_dir))
    return report, ckpt


def kshot_sweep(cfg: TrainConfig, k_values: list[int],
                out_dir) -> list[dict]:
    """One full train + evaluate per K with a shared seed; reports the gain
    over K=0 and the web-vs-real gap per row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in k_values:
        cfg_k = copy.deepcopy(cfg)
        cfg_k.data = replace(cfg.data, shots_per_class=k)
        report, _ = run_and_score(cfg_k, out / f"K{k}")
        rows.append({"K": k, "top1": report.top1, "top5": report.top5,
                     "web_test_accuracy": report.web_test_accuracy,
                     "gap": report.gap})
    base = next((r["top1"] for r in rows if r["K"] == 0), rows[0]["top1"])
    for r in rows:
        r["gain_over_0shot"] = r["top1"] - base
    with open(out / "sweep.tsv", "w") as f:
        cols = ["K", "top1", "top5", "web_test_accuracy", "gap",
                "gain_over_0shot"]
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float)
                              else str(r[c]) for c in cols) + "\n")
    _plot_sweep(rows, out / "sweep.png")
    return rows


def _plot_sweep(rows: list[dict], path) -> None:
    ks = [r["K"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(ks, [r["top1"] for r in rows], "o-")
    ax1.set_xlabel("shots per class")
    ax1.set_ylabel("real-test top-1")
    ax2.plot(ks, [r["gap"] for r in rows], "s-", color="tab:red")
    ax2.set_xlabel("shots per class")
    ax2.set_ylabel("web - real accuracy gap")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(run_dir, path=None) -> Path:
    run = Path(run_dir)
    header, *lines = (run / "metrics.tsv").read_text().splitlines()
    cols = header.split("\t")
    data = {c: [] for c in cols}
    for line in lines:
        for c, v in zip(cols, line.split("\t")):
            data[c].append(float(v))
    fig, ax = plt.subplots(figsize=(7, 4))
    for c in cols:
        if c.startswith("loss_") and any(v != 0 for v in data[c]):
            ax.plot(data["epoch"], data[c], label=c)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path) if path else run / "losses.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablate_relation(cfg: TrainConfig, out_dir,
                    data_dir=None) -> tuple[EvalReport, EvalReport]:
    """Paired runs: learned relation metric vs a fixed-cosine stand-in whose
    keep threshold is calibrated to match the learned run's few-shot
    branch-1 acceptance rate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data_dir is None:
        data_dir = out / "data"
        _prepare_dataset(cfg, data_dir)

    full_dir = out / "full"
    ckpt_full = trainer_mod.train(cfg, data_dir, full_dir / "run")
    _, _, extra = load_checkpoint(ckpt_full)
    rate = extra.get("fewshot_branch1_rate")
    report_full = evaluate(ckpt_full, data_dir,
                           curation_log=last_curation_log(full_dir / "run"))

    ablated_dir = out / "ablated"
    ckpt_abl = trainer_mod.train(cfg, data_dir, ablated_dir / "run",
                                 relation_mode="cosine",
                                 branch1_target_rate=rate)
    report_abl = evaluate(ckpt_abl, data_dir,
                          curation_log=last_curation_log(ablated_dir / "run"))

    with open(out / "ablation.tsv", "w") as f:
        f.write("variant\ttop1\tcorrection_f1\tood_precision\tood_recall\n")
        for name, rep in (("learned_metric", report_full),
                          ("cosine_metric", report_abl)):
            f.write(f"{name}\t{rep.top1:.6f}\t{rep.correction_f1:.6f}\t"
                    f"{rep.ood_precision:.6f}\t{rep.ood_recall:.6f}\n")
    return report_full, report_abl
