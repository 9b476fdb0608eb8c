"""Four-stage training loop: warm-up, prototype incubation, relation-metric
fitting on a frozen encoder, and verified training with label correction,
OOD removal, and prototype polish.

Every 10th web sample in file order is held out as the web-domain test
split and never trained on; evaluation uses it to measure the web-vs-real
accuracy gap. The trainer loads data without truth columns.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import curation, datagen, losses
from .config import TrainConfig
from .curation import LabelState, OOD_VERDICT
from .model import UNLABELED, EmbeddingBank, ModelPair, save_checkpoint
from .prototypes import PrototypeConfig, PrototypeStore

WEB_HOLDOUT_MOD = 10  # web samples at file-order index % 10 == 0 are held out

METRIC_COLUMNS = [
    "epoch", "stage", "lr", "loss_cls", "loss_prj", "loss_proto", "loss_ins",
    "loss_rel", "loss_hybrid", "n_branch1", "n_branch2", "n_branch3",
    "n_branch4", "seconds",
]


def is_web_holdout(file_index: int) -> bool:
    return file_index % WEB_HOLDOUT_MOD == 0


class Trainer:
    def __init__(self, cfg: TrainConfig, data_dir, out_dir,
                 relation_mode: str = "learned",
                 branch1_target_rate: float | None = None):
        if relation_mode not in ("learned", "cosine"):
            raise ValueError("relation_mode must be 'learned' or 'cosine'")
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "curation").mkdir(exist_ok=True)
        self.relation_mode = relation_mode
        self.branch1_target_rate = branch1_target_rate
        self.dtype = cfg.model.torch_dtype()

        web, fewshot, _ = datagen.load_dataset(data_dir, with_truth=False)
        train_web = [s for i, s in enumerate(web) if not is_web_holdout(i)]
        self.web_x = np.stack([s.input for s in train_web])
        self.web_y = torch.tensor([s.given_label - 1 for s in train_web])
        self.web_ids = [s.sample_id for s in train_web]
        self.n_web = len(train_web)
        if fewshot:
            self.fs_x = np.stack([s.input for s in fewshot])
            self.fs_y = torch.tensor([s.given_label - 1 for s in fewshot])
        else:
            self.fs_x = np.zeros((0, cfg.data.input_dim))
            self.fs_y = torch.zeros(0, dtype=torch.long)
        self.n_fs = len(fewshot)

        torch.manual_seed(cfg.seed)
        self.pair = ModelPair(cfg.model)
        self.bank = EmbeddingBank(cfg.model.bank_capacity)
        self.protos: PrototypeStore | None = None
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.opt = torch.optim.SGD(self.pair.plain.parameters(),
                                   lr=cfg.schedule.lr,
                                   momentum=cfg.schedule.opt_momentum,
                                   weight_decay=cfg.schedule.weight_decay)
        self.epoch = 0
        # samples discarded as out-of-distribution stay removed from all
        # label-supervised terms for the rest of training (they keep
        # contributing to the label-free instance contrast)
        self.removed_ids: set[int] = set()
        self.gamma_prime: float | None = None
        self.fewshot_branch1_rate: float | None = None
        self.metrics: list[dict] = []
        self._frozen_for_stage3 = False

    # -- schedule ----------------------------------------------------------

    def _lr_at(self, epoch: int) -> float:
        sched = self.cfg.schedule
        if sched.warmup_epochs and epoch < sched.warmup_epochs:
            return sched.lr * (epoch + 1) / sched.warmup_epochs
        span = max(1, sched.total_epochs - sched.warmup_epochs)
        progress = (epoch - sched.warmup_epochs) / span
        return sched.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def _set_lr(self, lr: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = lr

    def _set_requires_grad(self) -> None:
        """Warm-up freezes the encoder; stage 3 freezes all but relation."""
        stage = self.cfg.schedule.stage_of(self.epoch)
        warmup = self.epoch < self.cfg.schedule.warmup_epochs
        plain = self.pair.plain
        for p in plain.parameters():
            p.requires_grad_(stage != 3)
        for p in plain.relation.parameters():
            p.requires_grad_(self.relation_mode == "learned")
        if warmup:
            for p in plain.encoder.parameters():
                p.requires_grad_(False)

    # -- batch assembly ----------------------------------------------------

    def _fewshot_per_batch(self) -> int:
        sched = self.cfg.schedule
        if self.n_fs == 0:
            return 0
        want = max(1, round(sched.batch_size * self.n_fs / self.n_web))
        return min(want, sched.batch_size // 4)

    def _perturb_seed(self) -> int:
        return int(torch.randint(0, 2**31 - 1, (1,), generator=self.gen))

    def _batches(self):
        """Yield (web_rows, fs_rows) index tensors for one epoch."""
        sched = self.cfg.schedule
        b_fs = self._fewshot_per_batch()
        b_web = sched.batch_size - b_fs
        order = torch.randperm(self.n_web, generator=self.gen)
        fs_order = (torch.randperm(self.n_fs, generator=self.gen)
                    if self.n_fs else torch.zeros(0, dtype=torch.long))
        fs_ptr = 0
        for start in range(0, self.n_web, b_web):
            web_rows = order[start:start + b_web]
            fs_rows = []
            for _ in range(b_fs):
                if fs_ptr == self.n_fs:
                    fs_order = torch.randperm(self.n_fs, generator=self.gen)
                    fs_ptr = 0
                fs_rows.append(fs_order[fs_ptr])
                fs_ptr += 1
            yield web_rows, (torch.stack(fs_rows) if fs_rows
                             else torch.zeros(0, dtype=torch.long))

    def _make_inputs(self, web_rows, fs_rows):
        x = np.concatenate([self.web_x[web_rows.numpy()],
                            self.fs_x[fs_rows.numpy()]]) \
            if len(fs_rows) else self.web_x[web_rows.numpy()]
        labels = torch.cat([self.web_y[web_rows], self.fs_y[fs_rows]])
        n_web = len(web_rows)
        is_fs = torch.zeros(len(labels), dtype=torch.bool)
        is_fs[n_web:] = True
        sched = self.cfg.schedule
        x_weak = datagen.perturb(x, sched.strength_weak, self._perturb_seed())
        x_strong = datagen.perturb(x, sched.strength_strong,
                                   self._perturb_seed())
        return (torch.as_tensor(x_weak, dtype=self.dtype),
                torch.as_tensor(x_strong, dtype=self.dtype),
                labels, is_fs, n_web)

    def _aux_mask(self, p: torch.Tensor, labels: torch.Tensor,
                  is_fs: torch.Tensor) -> torch.Tensor:
        """Few-shot rows train the auxiliary classifier; with no shots,
        confident web rows stand in."""
        if self.n_fs > 0:
            return is_fs
        conf = p.detach().gather(-1, labels.unsqueeze(-1)).squeeze(-1)
        return conf > self.cfg.curation.gamma

    # -- prototype lifecycle -------------------------------------------------

    @torch.no_grad()
    def _momentum_embed(self, x: np.ndarray) -> torch.Tensor:
        return self.pair.forward_momentum(torch.as_tensor(x, dtype=self.dtype))

    def _init_prototypes(self) -> None:
        pcfg = PrototypeConfig(num_classes=self.cfg.model.num_classes,
                               proj_dim=self.cfg.model.proj_dim,
                               momentum=self.cfg.proto_momentum,
                               alpha=self.cfg.proto_alpha,
                               tau=self.cfg.losses.tau)
        if self.n_fs > 0:
            z = self._momentum_embed(self.fs_x)
            self.protos = PrototypeStore.init_from_fewshots(pcfg, z, self.fs_y)
        else:
            z = self._momentum_embed(self.web_x)
            self.protos = PrototypeStore.init_zero_shot(
                pcfg, z, self.web_y, self.cfg.schedule.zero_shot_per_class,
                seed=self._perturb_seed())

    def _refresh_temperatures(self, verdicts: dict[int, LabelState]) -> None:
        """Epoch-end concentration estimate over currently-clean samples
        (all web before stage 4) plus few shots, with corrected labels."""
        keep = np.ones(self.n_web, dtype=bool)
        labels = self.web_y.clone()
        if verdicts:
            for i, sid in enumerate(self.web_ids):
                st = verdicts.get(sid)
                if st is None or st.verdict == OOD_VERDICT:
                    keep[i] = False
                else:
                    labels[i] = st.new_label
        z_web = self._momentum_embed(self.web_x[keep])
        y = labels[torch.as_tensor(keep)]
        if self.n_fs > 0:
            z = torch.cat([z_web, self._momentum_embed(self.fs_x)])
            y = torch.cat([y, self.fs_y])
        else:
            z = z_web
        self.protos.refresh_temperatures(z, y)

    # -- stage 4 helpers -----------------------------------------------------

    @torch.no_grad()
    def _enter_stage4(self) -> None:
        if self.n_fs == 0:
            if self.relation_mode == "cosine":
                self.gamma_prime = self.cfg.curation.gamma
            return
        z = self._momentum_embed(self.fs_x)
        if self.relation_mode == "learned":
            r = self.pair.relation_scores(z, self.protos.vectors)
            probs = F.softmax(r, dim=-1)
            hit = probs.gather(-1, self.fs_y.unsqueeze(-1)).squeeze(-1)
            self.fewshot_branch1_rate = float(
                (hit > self.cfg.curation.gamma).to(torch.float64).mean())
        else:
            rate = (self.branch1_target_rate
                    if self.branch1_target_rate is not None else 0.9)
            cos = (z * self.protos.vectors[self.fs_y]).sum(dim=-1)
            q = min(max(1.0 - rate, 0.0), 1.0)
            self.gamma_prime = float(torch.quantile(
                cos.to(torch.float64), q))

    def _branch1_rows(self, z_web: torch.Tensor,
                      given: torch.Tensor) -> torch.Tensor:
        """Per-row relation probability vectors used by the verdict rule.

        Cosine ablation replaces the learned score with an indicator on
        cosine(z, c_given) exceeding the calibrated threshold."""
        C = self.cfg.model.num_classes
        if self.relation_mode == "learned":
            r = self.pair.relation_scores(z_web, self.protos.vectors)
            return F.softmax(r, dim=-1)
        cos = (z_web * self.protos.vectors[given]).sum(dim=-1)
        rel = torch.zeros(len(given), C, dtype=z_web.dtype)
        rel[torch.arange(len(given)), given] = (
            cos > self.gamma_prime).to(z_web.dtype)
        return rel

    # -- epoch loops ---------------------------------------------------------

    def run_epoch(self) -> dict:
        stage = self.cfg.schedule.stage_of(self.epoch)
        if stage >= 2 and self.protos is None:
            self._init_prototypes()
        if stage == 4 and (self.gamma_prime is None
                           and self.fewshot_branch1_rate is None):
            self._enter_stage4()
        self._set_requires_grad()
        self._set_lr(self._lr_at(self.epoch))

        start = time.monotonic()
        sums = {k: 0.0 for k in ("cls", "prj", "proto", "ins", "rel",
                                 "hybrid")}
        steps = 0
        branch_counts = [0, 0, 0, 0]
        verdicts: dict[int, LabelState] = {}
        if self.protos is not None:
            self.protos.reset_counts()

        for web_rows, fs_rows in self._batches():
            step_stats = self._step(stage, web_rows, fs_rows, verdicts)
            for k, v in step_stats.items():
                sums[k] += v
            steps += 1

        for st in verdicts.values():
            branch_counts[st.branch - 1] += 1

        if stage >= 2:
            self._refresh_temperatures(verdicts)
        if stage == 4:
            self._dump_curation(verdicts)

        row = {"epoch": self.epoch, "stage": stage,
               "lr": self._lr_at(self.epoch),
               **{f"loss_{k}": (sums[k] / steps if steps else 0.0)
                  for k in sums},
               "n_branch1": branch_counts[0], "n_branch2": branch_counts[1],
               "n_branch3": branch_counts[2], "n_branch4": branch_counts[3],
               "seconds": time.monotonic() - start}
        self.metrics.append(row)
        self._write_metrics()
        self.epoch += 1
        return row

    def _step(self, stage: int, web_rows, fs_rows,
              verdicts: dict[int, LabelState]) -> dict:
        cfg = self.cfg
        x_weak, x_strong, labels, is_fs, n_web = self._make_inputs(
            web_rows, fs_rows)
        stats = {k: 0.0 for k in ("cls", "prj", "proto", "ins", "rel",
                                  "hybrid")}

        if stage == 3:
            if self.relation_mode == "cosine":
                return stats  # ablation: relation metric is never trained
            # relation inputs live in the momentum space, like the prototypes
            z = self.pair.forward_momentum(x_weak)
            clean_web = curation.select_clean_stage3(
                z[:n_web], labels[:n_web], self.protos.vectors,
                cfg.curation.sigma)
            mask = torch.cat([clean_web,
                              torch.ones(len(labels) - n_web,
                                         dtype=torch.bool)])
            if not bool(mask.any()):
                return stats
            r = self.pair.relation_scores(z[mask], self.protos.vectors)
            l_rel = losses.loss_rel(r, labels[mask]).mean()
            self.opt.zero_grad(set_to_none=True)
            (cfg.losses.weights["rel"] * l_rel).backward()
            self.opt.step()
            stats["rel"] = l_rel.item()
            return stats

        v, p, z, v_rec, q = self.pair.forward_plain(x_weak)
        z_m = self.pair.forward_momentum(x_strong)
        bank_embs, _ = self.bank.view()
        bank_embs = bank_embs.to(self.dtype) if len(bank_embs) else bank_embs

        terms = []
        w = cfg.losses.weights
        aux_mask = self._aux_mask(p, labels, is_fs)
        margins = torch.where(is_fs,
                              torch.tensor(cfg.losses.delta_t, dtype=self.dtype),
                              torch.tensor(cfg.losses.delta_w, dtype=self.dtype))
        final_labels = labels.clone()
        keep = torch.ones(len(labels), dtype=torch.bool)

        if stage in (1, 2):
            l_cls = losses.loss_cls(p, labels).mean()
            l_prj = losses.loss_prj(v_rec, v, q, labels, aux_mask).mean()
            terms += [w["cls"] * l_cls, w["prj"] * l_prj]
            stats["cls"], stats["prj"] = l_cls.item(), l_prj.item()

        if stage == 2:
            l_proto = losses.loss_proto(z, labels, self.protos.vectors,
                                        self.protos.temps, margins).mean()
            l_ins = losses.loss_ins(z, z_m, bank_embs, cfg.losses.tau).mean()
            terms += [w["proto"] * l_proto, w["ins"] * l_ins]
            stats["proto"], stats["ins"] = l_proto.item(), l_ins.item()

        if stage == 4:
            with torch.no_grad():
                # verdicts compare momentum embeddings to the prototypes:
                # both live in the same (momentum) space
                zm_weak = self.pair.forward_momentum(x_weak[:n_web])
                rel_probs = self._branch1_rows(zm_weak, labels[:n_web])
                s = curation.hybrid_score(p[:n_web], zm_weak,
                                          self.protos.vectors,
                                          cfg.curation.beta)
            sample_ids = [self.web_ids[i] for i in web_rows.tolist()]
            states = curation.adjust_labels_batch(
                rel_probs, s, labels[:n_web], cfg.curation.gamma, sample_ids)
            states = [st if st.sample_id not in self.removed_ids else
                      LabelState(st.sample_id, st.given_label, OOD_VERDICT,
                                 None, st.relation_prob, st.scores, 4)
                      for st in states]
            self.removed_ids.update(
                st.sample_id for st in states if st.branch == 4)
            for st in states:
                verdicts[st.sample_id] = st
            for i, st in enumerate(states):
                if st.verdict == OOD_VERDICT:
                    keep[i] = False
                else:
                    final_labels[i] = st.new_label

            kept_web = keep[:n_web]
            conf = torch.stack([
                s[i, st.new_label] if st.new_label is not None
                else torch.zeros((), dtype=self.dtype)
                for i, st in enumerate(states)])
            if bool(kept_web.any()):
                l_hyb_web = losses.loss_hybrid_web(
                    p[:n_web][kept_web], final_labels[:n_web][kept_web],
                    conf[kept_web]).mean()
            else:
                l_hyb_web = torch.zeros((), dtype=self.dtype)
            if self.n_fs > 0:
                l_hyb = l_hyb_web + losses.loss_cls(p[n_web:],
                                                    labels[n_web:]).mean()
            else:
                l_hyb = l_hyb_web
            l_proto = losses.loss_proto(
                z[keep], final_labels[keep], self.protos.vectors,
                self.protos.temps, margins[keep]).mean()
            l_ins = losses.loss_ins(z, z_m, bank_embs, cfg.losses.tau).mean()
            l_prj = losses.loss_prj(v_rec[keep], v[keep], q[keep],
                                    final_labels[keep], aux_mask[keep]).mean()
            terms += [w["hybrid"] * l_hyb, w["proto"] * l_proto,
                      w["ins"] * l_ins, w["prj"] * l_prj]
            stats["hybrid"], stats["proto"] = l_hyb.item(), l_proto.item()
            stats["ins"], stats["prj"] = l_ins.item(), l_prj.item()

            if self.relation_mode == "learned":
                reliable = curation.select_reliable_for_relation(states)
                rel_rows = [i for i, st in enumerate(states)
                            if st.branch in (1, 2)]
                if rel_rows:
                    r = self.pair.relation_scores(
                        zm_weak[rel_rows], self.protos.vectors)
                    rel_labels = torch.tensor([lbl for _, lbl in reliable])
                    l_rel = losses.loss_rel(r, rel_labels).mean()
                    terms.append(w["rel"] * l_rel)
                    stats["rel"] = l_rel.item()

        total = sum(terms)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.pair.ema_step()

        polish = (stage == 4) or (stage == 2 and
                                  self.cfg.schedule.polish_in_stage2)
        if polish:
            for i in range(len(labels)):
                if stage == 4 and i < n_web:
                    st = states[i]
                    if st.branch in (1, 2):
                        self.protos.ema_update(z_m[i], int(final_labels[i]))
                elif is_fs[i] or stage == 2:
                    self.protos.ema_update(z_m[i], int(final_labels[i]))

        bank_labels = [int(final_labels[i]) if keep[i] else UNLABELED
                       for i in range(len(labels))]
        self.bank.push(z_m, bank_labels)
        return stats

    # -- reporting / persistence ---------------------------------------------

    def _dump_curation(self, verdicts: dict[int, LabelState]) -> None:
        path = self.out_dir / "curation" / f"epoch_{self.epoch:03d}.tsv"
        with open(path, "w") as f:
            f.write("sample_id\tgiven_label\tverdict\tnew_label\tbranch\t"
                    "relation_prob\tmax_score\tscore_given\n")
            for sid in sorted(verdicts):
                st = verdicts[sid]
                new = "" if st.new_label is None else st.new_label + 1
                f.write(f"{sid}\t{st.given_label + 1}\t{st.verdict}\t{new}\t"
                        f"{st.branch}\t{st.relation_prob:.6f}\t"
                        f"{float(st.scores.max()):.6f}\t"
                        f"{float(st.scores[st.given_label]):.6f}\n")

    def _write_metrics(self) -> None:
        with open(self.out_dir / "metrics.tsv", "w") as f:
            f.write("\t".join(METRIC_COLUMNS) + "\n")
            for row in self.metrics:
                f.write("\t".join(
                    f"{row[c]:.6f}" if isinstance(row[c], float)
                    else str(row[c]) for c in METRIC_COLUMNS) + "\n")

    def _fewshot_means(self) -> torch.Tensor | None:
        if self.n_fs == 0:
            return None
        z = self._momentum_embed(self.fs_x)
        C = self.cfg.model.num_classes
        means = torch.zeros(C, self.cfg.model.proj_dim, dtype=z.dtype)
        for k in range(C):
            means[k] = z[self.fs_y == k].mean(dim=0)
        return F.normalize(means, dim=-1)

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.out_dir / "checkpoint.pt"
        extra = {
            "epoch": self.epoch,
            "gen_state": self.gen.get_state(),
            "opt_state": self.opt.state_dict(),
            "protos": self.protos.state() if self.protos else None,
            "removed_ids": sorted(self.removed_ids),
            "gamma_prime": self.gamma_prime,
            "fewshot_branch1_rate": self.fewshot_branch1_rate,
            "relation_mode": self.relation_mode,
            "num_classes": self.cfg.model.num_classes,
        }
        save_checkpoint(path, self.pair, self.bank, extra)
        return path

    def restore(self, extra: dict, pair: ModelPair,
                bank: EmbeddingBank) -> None:
        self.pair = pair
        self.bank = bank
        self.opt = torch.optim.SGD(self.pair.plain.parameters(),
                                   lr=self.cfg.schedule.lr,
                                   momentum=self.cfg.schedule.opt_momentum,
                                   weight_decay=self.cfg.schedule.weight_decay)
        self.opt.load_state_dict(extra["opt_state"])
        self.gen.set_state(extra["gen_state"])
        self.epoch = extra["epoch"]
        self.removed_ids = set(extra.get("removed_ids") or [])
        self.gamma_prime = extra["gamma_prime"]
        self.fewshot_branch1_rate = extra["fewshot_branch1_rate"]
        if extra["protos"] is not None:
            self.protos = PrototypeStore.from_state(extra["protos"])

    def run(self) -> Path:
        while self.epoch < self.cfg.schedule.total_epochs:
            self.run_epoch()
        if self.protos is not None:
            (self.out_dir / "prototypes.txt").write_text(
                self.protos.dump_report(self._fewshot_means()))
        with open(self.out_dir / "summary.txt", "w") as f:
            f.write(f"epochs: {self.epoch}\n")
            f.write(f"relation_mode: {self.relation_mode}\n")
            f.write(f"fewshot_branch1_rate: {self.fewshot_branch1_rate}\n")
            f.write(f"gamma_prime: {self.gamma_prime}\n")
        return self.save()


def train(cfg: TrainConfig, data_dir, out_dir,
          relation_mode: str = "learned",
          branch1_target_rate: float | None = None) -> Path:
    """Run the full curriculum; returns the final checkpoint path."""
    torch.set_num_threads(1)
    trainer = Trainer(cfg, data_dir, out_dir, relation_mode=relation_mode,
                      branch1_target_rate=branch1_target_rate)
    return trainer.run()


def train_baseline(cfg: TrainConfig, data_dir, out_dir) -> Path:
    """Plain cross-entropy on web labels as-is: same encoder, classifier,
    optimizer, augmentation, and epoch budget; no few shots, no curation."""
    torch.set_num_threads(1)
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    web, _, _ = datagen.load_dataset(data_dir, with_truth=False)
    train_web = [s for i, s in enumerate(web) if not is_web_holdout(i)]
    x_all = np.stack([s.input for s in train_web])
    y_all = torch.tensor([s.given_label - 1 for s in train_web])

    torch.manual_seed(cfg.seed)
    pair = ModelPair(cfg.model)
    dtype = cfg.model.torch_dtype()
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(pair.plain.parameters(), lr=cfg.schedule.lr,
                          momentum=cfg.schedule.opt_momentum,
                          weight_decay=cfg.schedule.weight_decay)
    sched = cfg.schedule
    rows = []
    for epoch in range(sched.total_epochs):
        if sched.warmup_epochs and epoch < sched.warmup_epochs:
            lr = sched.lr * (epoch + 1) / sched.warmup_epochs
            frozen = True
        else:
            span = max(1, sched.total_epochs - sched.warmup_epochs)
            lr = sched.lr * 0.5 * (1.0 + math.cos(
                math.pi * (epoch - sched.warmup_epochs) / span))
            frozen = False
        for p in pair.plain.encoder.parameters():
            p.requires_grad_(not frozen)
        for g in opt.param_groups:
            g["lr"] = lr
        order = torch.randperm(len(train_web), generator=gen)
        total = 0.0
        steps = 0
        for start in range(0, len(train_web), sched.batch_size):
            idx = order[start:start + sched.batch_size]
            seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
            xb = datagen.perturb(x_all[idx.numpy()], sched.strength_weak, seed)
            xb = torch.as_tensor(xb, dtype=dtype)
            _, p, _, _, _ = pair.forward_plain(xb)
            loss = losses.loss_cls(p, y_all[idx]).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        rows.append((epoch, lr, total / max(1, steps)))
    with open(out / "metrics.tsv", "w") as f:
        f.write("epoch\tlr\tloss_cls\n")
        for epoch, lr, loss in rows:
            f.write(f"{epoch}\t{lr:.6f}\t{loss:.6f}\n")
    path = out / "checkpoint.pt"
    save_checkpoint(path, pair, EmbeddingBank(cfg.model.bank_capacity),
                    {"epoch": sched.total_epochs, "protos": None,
                     "relation_mode": "baseline", "gamma_prime": None,
                     "fewshot_branch1_rate": None,
                     "num_classes": cfg.model.num_classes})
    return path
