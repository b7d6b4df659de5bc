"""Supervised similarity training.

Each epoch searches the training claims with the parameters as of epoch
start, turns every trace into positive (Y=0) and hard-negative (Y=1)
query/support pairs, and steps the optimizer of one parameter group while the
other stays frozen.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import LABELS, ClaimRecord, EvidencePointer, WikiStore, candidate_pointers, select_training_evidence
from .model import MemoryModel
from .searcher import Level1Encoder, SearchConfig, SearchTrace, search_many
from .seqformat import FormattedSequence, dedup_evidence, format_query, format_support

log = logging.getLogger(__name__)


def bce_loss(delta: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Mean per-filter BCE on a difference vector and its gradient w.r.t. delta.

    Y=0 marks a correct match. Uses softplus forms, so large deltas don't
    overflow: -log sigma(d) = softplus(-d), -log(1 - sigma(d)) = softplus(d).
    """
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise ValueError("non-finite difference vector")
    if y not in (0, 1):
        raise ValueError("target must be 0 or 1")
    per = np.logaddexp(0.0, -delta) if y == 1 else np.logaddexp(0.0, delta)
    sig = 0.5 * (1.0 + np.tanh(0.5 * delta))
    return float(per.mean()), (sig - y) / delta.size


def per_filter_loss(delta: np.ndarray, y: int) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    return np.logaddexp(0.0, -delta) if y == 1 else np.logaddexp(0.0, delta)


def torch_bce(delta: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-instance mean over filters; delta (B, M), y (B,)."""
    zero = torch.zeros((), dtype=delta.dtype)
    pos = torch.logaddexp(zero, -delta)
    neg = torch.logaddexp(zero, delta)
    y = y.to(delta.dtype)[:, None]
    return (y * pos + (1 - y) * neg).mean(dim=1)


@dataclass(frozen=True)
class TrainingInstance:
    query: FormattedSequence
    support: FormattedSequence
    level: int
    target: int  # 0 = correct match


def build_instances(
    claim: ClaimRecord, trace: SearchTrace, store: WikiStore, max_len: dict[int, int] | None = None
) -> list[TrainingInstance]:
    """Positive and hard-negative pairs for one claim.

    Verifiable: level 1 one positive per training evidence sentence plus the
    nearest non-gold beam entry; level 2 the leading evidence sentence plus
    the nearest non-gold re-scored entry; level 3 prediction and reference
    sequences with the correct label and both flipped labels. Unverifiable
    claims only get the level-3 prediction triple.
    """
    if trace.claim_id != claim.claim_id:
        raise ValueError(f"trace for claim {trace.claim_id} given with claim {claim.claim_id}")
    ml = max_len or {1: None, 2: None, 3: None}
    out: list[TrainingInstance] = []

    def label_triple(mode: str, evidence: Sequence[EvidencePointer]) -> None:
        q = format_query(claim, 3, mode)
        pairs = [(p, store.text(p)) for p in evidence]
        for lab in LABELS:
            s = format_support(3, claim, pairs, label=lab, max_tokens=ml[3])
            out.append(TrainingInstance(q, s, 3, 0 if lab is claim.label else 1))

    if claim.verifiable:
        ev = select_training_evidence(claim, store)
        gold = claim.gold_pointers()
        q1 = format_query(claim, 1)
        for p in ev:
            out.append(TrainingInstance(q1, format_support(1, claim, [(p, store.text(p))], max_tokens=ml[1]), 1, 0))
        neg1 = next((e.pointer for e in trace.level1 if e.pointer not in gold), None)
        if neg1 is not None:
            out.append(TrainingInstance(q1, format_support(1, claim, [(neg1, store.text(neg1))], max_tokens=ml[1]), 1, 1))
        q2 = format_query(claim, 2)
        lead = ev[0]
        out.append(TrainingInstance(q2, format_support(2, claim, [(lead, store.text(lead))], max_tokens=ml[2]), 2, 0))
        neg2 = next((e.pointer for e in trace.level2 if e.pointer not in gold), None)
        if neg2 is not None:
            out.append(TrainingInstance(q2, format_support(2, claim, [(neg2, store.text(neg2))], max_tokens=ml[2]), 2, 1))
    label_triple("search", dedup_evidence(e.pointer for e in trace.level2[: trace.z]))
    if claim.verifiable:
        label_triple("reference", ev)
    return out


def batch_loss(model: MemoryModel, instances: Sequence[TrainingInstance]) -> torch.Tensor:
    """Mean over instances of the mean per-filter loss, as a differentiable scalar."""
    losses = []
    for level in (1, 2, 3):
        inst = [x for x in instances if x.level == level]
        if not inst:
            continue
        texts = sorted({x.query.text for x in inst} | {x.support.text for x in inst})
        pos = {t: i for i, t in enumerate(texts)}
        ids, pad = model.batch(texts, level)
        g, _, _ = model.forward_level(ids, pad, level)
        qi = torch.tensor([pos[x.query.text] for x in inst])
        si = torch.tensor([pos[x.support.text] for x in inst])
        delta = (g[qi] - g[si]).abs()
        losses.append(torch_bce(delta, torch.tensor([x.target for x in inst])))
    return torch.cat(losses).mean()


@dataclass
class TrainConfig:
    epochs_max: int = 15
    k1_schedule: tuple[int, ...] = (10, 30)
    z: int = 3
    patience: int = 4
    encoder_freeze_after: int = 6
    optimizer: str = "adaptive"  # "adaptive" (AdamW encoder + Adadelta memory) | "sgd"
    lr_encoder: float = 0.003
    lr_memory: float = 1.0
    weight_decay: float = 0.01  # AdamW only
    warmup_proportion: float = 0.1  # AdamW only, of the scheduled encoder steps
    batch_claims: int = 9
    seed: int = 0
    dev_k1: int | None = None  # defaults to the phase's k1

    def __post_init__(self):
        self.k1_schedule = tuple(self.k1_schedule)
        if self.optimizer not in ("sgd", "adaptive"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise ValueError("warmup_proportion must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if list(self.k1_schedule) != sorted(self.k1_schedule) or not self.k1_schedule:
            raise ValueError("k1 schedule must be non-empty and non-decreasing")


@dataclass
class EpochMetrics:
    epoch: int
    phase: int
    k1: int
    trained_group: str
    train_loss: float
    dev_accuracy: float
    dev_fever: float
    seconds: float

    def log_line(self) -> str:
        return (f"epoch={self.epoch} phase={self.phase} k1={self.k1} group={self.trained_group} "
                f"train_loss={self.train_loss:.6f} dev_accuracy={self.dev_accuracy:.4f} "
                f"dev_fever={self.dev_fever:.4f} seconds={self.seconds:.1f}")


@dataclass
class TrainResult:
    model: MemoryModel
    history: list[EpochMetrics] = field(default_factory=list)
    best_accuracy: float = -1.0
    best_epoch: int = 0
    diverged: bool = False


@dataclass
class TrainData:
    train: list[ClaimRecord]
    dev: list[ClaimRecord]
    store: WikiStore
    train_candidates: list[list[EvidencePointer]] | None = None
    dev_candidates: list[list[EvidencePointer]] | None = None

    def __post_init__(self):
        if not self.train:
            raise ValueError("no training claims")
        if self.train_candidates is None:
            self.train_candidates = [candidate_pointers(c.claim_text, self.store) for c in self.train]
        if self.dev_candidates is None:
            self.dev_candidates = [candidate_pointers(c.claim_text, self.store) for c in self.dev]


def make_optimizers(model: MemoryModel, cfg: TrainConfig, encoder_steps: int):
    """One optimizer per parameter group; the encoder's may carry a warmup schedule."""
    if cfg.optimizer == "sgd":
        return (torch.optim.SGD(model.encoder_parameters(), lr=cfg.lr_encoder),
                torch.optim.SGD(model.memory_parameters(), lr=cfg.lr_memory), None)
    enc = torch.optim.AdamW(model.encoder_parameters(), lr=cfg.lr_encoder, weight_decay=cfg.weight_decay)
    mem = torch.optim.Adadelta(model.memory_parameters(), lr=cfg.lr_memory)
    warm = max(1, int(cfg.warmup_proportion * encoder_steps))
    sched = torch.optim.lr_scheduler.LambdaLR(enc, lambda step: min(1.0, (step + 1) / warm))
    return enc, mem, sched


def _snapshot(model: MemoryModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(
    data: TrainData,
    model: MemoryModel,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    from .evaluator import accuracy, fever_score, predictions_from_traces

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_f, lineterminator="\n")
        writer.writerow(["epoch", "phase", "k1", "train_loss", "dev_accuracy", "dev_fever"])
    result = TrainResult(model)
    best_state = _snapshot(model)
    encoder_epochs = 0
    best_encoder_epochs = 0
    epoch_global = 0
    dev_gold = {c.claim_id: c for c in data.dev}
    try:
        for phase, k1 in enumerate(cfg.k1_schedule, 1):
            if phase > 1:
                model.load_state_dict(best_state)
                encoder_epochs = best_encoder_epochs
            steps_per_epoch = -(-len(data.train) // cfg.batch_claims)
            opt_enc, opt_mem, sched = make_optimizers(model, cfg, steps_per_epoch * ((cfg.epochs_max + 1) // 2))
            scfg = SearchConfig(k1=k1, z=min(cfg.z, k1))
            dev_cfg = SearchConfig(k1=cfg.dev_k1 or k1, z=min(cfg.z, cfg.dev_k1 or k1))
            stale = 0
            phase_best = -1.0
            for epoch in range(1, cfg.epochs_max + 1):
                t0 = time.perf_counter()
                epoch_global += 1
                train_encoder = epoch % 2 == 0 and encoder_epochs < cfg.encoder_freeze_after
                group = "encoder" if train_encoder else "memory"
                for p in model.encoder_parameters():
                    p.requires_grad_(train_encoder)
                for p in model.memory_parameters():
                    p.requires_grad_(not train_encoder)
                opt = opt_enc if train_encoder else opt_mem
                start_state = _snapshot(model)

                model.eval()
                traces = search_many(data.train, data.train_candidates, data.store, model, scfg)
                per_claim = [build_instances(c, t, data.store, model.max_len) for c, t in zip(data.train, traces)]
                order = np.random.default_rng([cfg.seed, epoch_global]).permutation(len(per_claim))
                total, count = 0.0, 0
                for b in range(0, len(order), cfg.batch_claims):
                    inst = [x for i in order[b : b + cfg.batch_claims] for x in per_claim[i]]
                    opt.zero_grad(set_to_none=True)
                    loss = batch_loss(model, inst)
                    if not torch.isfinite(loss):
                        log.error("non-finite loss at epoch %d; restoring epoch-start parameters", epoch_global)
                        model.load_state_dict(start_state)
                        result.diverged = True
                        break
                    loss.backward()
                    opt.step()
                    if train_encoder and sched is not None:
                        sched.step()
                    total += float(loss.detach()) * len(inst)
                    count += len(inst)
                if result.diverged:
                    break
                if train_encoder:
                    encoder_epochs += 1

                dev_traces = search_many(data.dev, data.dev_candidates, data.store, model, dev_cfg)
                preds = predictions_from_traces(dev_traces)
                acc = accuracy(preds, dev_gold) if data.dev else 0.0
                fev = fever_score(preds, dev_gold) if data.dev else 0.0
                m = EpochMetrics(epoch_global, phase, k1, group, total / max(count, 1), acc, fev,
                                 time.perf_counter() - t0)
                result.history.append(m)
                log.info(m.log_line())
                if out:
                    writer.writerow([m.epoch, m.phase, m.k1, f"{m.train_loss:.6f}", f"{acc:.6f}", f"{fev:.6f}"])
                    metrics_f.flush()
                if on_epoch:
                    on_epoch(m)
                if acc > result.best_accuracy:
                    result.best_accuracy, result.best_epoch = acc, epoch_global
                    best_state = _snapshot(model)
                    best_encoder_epochs = encoder_epochs
                    if out:
                        model.save(out / "checkpoint.bin")
                if acc > phase_best:
                    phase_best, stale = acc, 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
            if result.diverged:
                break
    finally:
        if out:
            metrics_f.close()
    model.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    return result
