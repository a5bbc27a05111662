"""Losses, the alternating two-step trainer, and classification metrics.

Step 1 trains every module on reconstruction + classification + the
seed-feature/prototype decorrelation penalty. Step 2 freezes everything but
the decoder and teaches it to emit FC that the frozen encoder classifies as
the class of a donor summary taken from the opposite class.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import ConfigError, DomainError, NoValidPairs, ShapeError
from .fc_data import Dataset
from .model import CCFCNet, ModelConfig, cosine_similarity, vectorize_upper_t

log = logging.getLogger(__name__)

ABLATIONS = ("no_mask", "no_intra", "no_prototype", "no_step2", "no_reg")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Ablations:
    no_mask: bool = False
    no_intra: bool = False
    no_prototype: bool = False
    no_step2: bool = False
    no_reg: bool = False

    @classmethod
    def parse(cls, text: str) -> "Ablations":
        names = [t.strip() for t in (text or "").split(",") if t.strip()]
        unknown = [n for n in names if n not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablation(s) {unknown}; choose from {list(ABLATIONS)}")
        return cls(**{n: True for n in names})

    def active(self) -> list[str]:
        return [n for n in ABLATIONS if getattr(self, n)]


@dataclass(frozen=True)
class TrainConfig:
    lr_step1: float = 5e-4
    lr_step2: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 1e-4
    lambda_recon: float = 1.0
    lambda_class: float = 0.1
    epochs: int = 60
    seed: int = 0
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if self.lr_step1 <= 0 or self.lr_step2 <= 0:
            raise ConfigError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = ",".join(self.ablations.active())
        return d


@dataclass(frozen=True)
class MetricSet:
    auc: float
    acc: float
    sen: float
    spc: float

    def as_row(self) -> list[float]:
        return [self.auc, self.acc, self.sen, self.spc]


@dataclass
class EpochLog:
    epoch: int
    step: int
    loss_recon: float
    loss_class: float
    loss_reg: float
    loss_total: float
    val: MetricSet


LOG_FIELDS = ["epoch", "step", "loss_recon", "loss_class", "loss_reg", "loss_total",
              "val_auc", "val_acc", "val_sen", "val_spc"]


# --------------------------------------------------------------------------
# losses


def loss_recon(x_hat: torch.Tensor, x_mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the strict upper triangle."""
    if x_hat.shape != x_mask.shape:
        raise ShapeError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x_mask.shape)}")
    return (vectorize_upper_t(x_hat) - vectorize_upper_t(x_mask)).abs().mean()


def loss_class(probs, label) -> torch.Tensor:
    """Cross-entropy ``-log probs[label]`` averaged over a batch."""
    probs = torch.as_tensor(probs)
    label = torch.as_tensor(label, dtype=torch.long)
    if probs.dim() == 1:
        probs, label = probs[None], label.reshape(1)
    picked = probs.gather(-1, label[:, None]).squeeze(-1)
    if bool((picked <= 0).any()):
        raise DomainError("probability of the target class is zero")
    return -torch.log(picked).mean()


def loss_class_logits(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    # same quantity as loss_class, evaluated stably from logits
    return torch.nn.functional.cross_entropy(logits, label)


def loss_reg(z_bar: torch.Tensor, prototypes: torch.Tensor, check: bool = True) -> torch.Tensor:
    """``sum_c |cos(z_bar, p_c)|``, averaged over the batch."""
    if z_bar.dim() == 1:
        z_bar = z_bar[None]
    return cosine_similarity(z_bar, prototypes, check=check).abs().sum(dim=-1).mean()


def shuffle_opposite(summaries: torch.Tensor, labels, rng: np.random.Generator):
    """Give each sample the summary of a uniformly drawn opposite-class batch member.

    Returns ``(shuffled, donor_index, valid)``; samples without an
    opposite-class partner keep their own summary and are flagged invalid.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    donors = np.arange(n)
    valid = np.zeros(n, dtype=bool)
    for i in range(n):
        pool = np.flatnonzero(labels != labels[i])
        if pool.size:
            donors[i] = pool[rng.integers(pool.size)]
            valid[i] = True
    idx = torch.as_tensor(donors, device=summaries.device)
    return summaries[idx], donors, valid


# --------------------------------------------------------------------------
# optimisation steps


@dataclass
class StepLosses:
    recon: float
    cls: float
    reg: float
    total: float


class Trainer:
    """Owns the model and the two AdamW states."""

    def __init__(self, model: CCFCNet, config: TrainConfig):
        self.model = model
        self.config = config
        self.opt1 = torch.optim.AdamW(
            model.parameters(), lr=config.lr_step1, betas=ADAM_BETAS, eps=ADAM_EPS,
            weight_decay=config.weight_decay,
        )
        dec = [p for n, p in model.named_parameters() if n.startswith("decoder.")]
        self.opt2 = torch.optim.AdamW(
            dec, lr=config.lr_step2, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=config.weight_decay,
        )
        self.rng = np.random.default_rng([config.seed, 2])
        self.gumbel = torch.Generator().manual_seed(config.seed + 1)

    def step1_losses(self, x: torch.Tensor, y: torch.Tensor):
        """Train-mode forward and the three Step-1 loss terms (tensors)."""
        trace = self.model(x, generator=self.gumbel)
        l_rec = loss_recon(trace.x_hat, trace.x_mask)
        l_cls = loss_class_logits(trace.logits, y)
        if self.config.ablations.no_reg or self.model.cfg.no_prototype:
            l_reg = torch.zeros((), dtype=x.dtype)
        else:
            l_reg = loss_reg(trace.z_bar, self.model.prototypes, check=False)
        return trace, l_rec, l_cls, l_reg

    def step1_update(self, x: torch.Tensor, y: torch.Tensor) -> StepLosses:
        if x.shape[0] == 0:
            raise ShapeError("empty batch")
        self.model.train()
        _, l_rec, l_cls, l_reg = self.step1_losses(x, y)
        total = l_rec + l_cls + l_reg
        self.opt1.zero_grad(set_to_none=True)
        total.backward()
        self.opt1.step()
        return StepLosses(l_rec.item(), l_cls.item(), l_reg.item(), total.item())

    def step2_update(self, x: torch.Tensor, y: torch.Tensor) -> StepLosses:
        model = self.model
        with torch.no_grad():
            model.eval()
            trace = model(x)
        shuffled, donors, valid = shuffle_opposite(trace.z_summary_out, y.cpu().numpy(), self.rng)
        if not valid.any():
            raise NoValidPairs("no sample in the batch has an opposite-class partner")

        frozen = [p for n, p in model.named_parameters() if not n.startswith("decoder.")]
        for p in frozen:
            p.requires_grad_(False)
        try:
            model.decoder.train()
            x_hat = model.decode(trace.z_bar + trace.z_summary_out)
            l_rec = loss_recon(x_hat, trace.x_mask)
            keep = torch.as_tensor(np.flatnonzero(valid))
            x_shuffle = model.decode(trace.z_bar[keep] + shuffled[keep])
            _, logits, _ = model.classify_fc(x_shuffle)
            target = y[torch.as_tensor(donors[valid])]
            l_cls = loss_class_logits(logits, target)
            total = self.config.lambda_recon * l_rec + self.config.lambda_class * l_cls
            self.opt2.zero_grad(set_to_none=True)
            total.backward()
            self.opt2.step()
        finally:
            for p in frozen:
                p.requires_grad_(True)
            model.eval()
        return StepLosses(l_rec.item(), l_cls.item(), 0.0, total.item())


# --------------------------------------------------------------------------
# metrics / evaluation


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC of ``scores`` for the positive class (label 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metric_set(prob_patient, pred, labels) -> MetricSet:
    prob_patient = np.asarray(prob_patient, dtype=np.float64)
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    pos, neg = labels == 1, labels == 0
    acc = float((pred == labels).mean()) if labels.size else float("nan")
    sen = float((pred[pos] == 1).mean()) if pos.any() else float("nan")
    spc = float((pred[neg] == 0).mean()) if neg.any() else float("nan")
    return MetricSet(roc_auc(prob_patient, labels), acc, sen, spc)


def to_tensor(dataset: Dataset, dtype=torch.float32):
    x = torch.as_tensor(dataset.fcs, dtype=dtype)
    y = torch.as_tensor(dataset.labels, dtype=torch.long)
    return x, y


@dataclass
class Prediction:
    subject_id: str
    label: int
    prob_patient: float
    pred: int


@torch.no_grad()
def predict(model: CCFCNet, dataset: Dataset):
    model.eval()
    dtype = next(model.parameters()).dtype
    x, _ = to_tensor(dataset, dtype)
    trace = model(x)
    probs = trace.probs.double().cpu().numpy()
    pred = trace.prediction.cpu().numpy()
    return [
        Prediction(rec.subject_id, rec.label, float(probs[k, 1]), int(pred[k]))
        for k, rec in enumerate(dataset.records)
    ], trace


def evaluate(dataset: Dataset, model: CCFCNet):
    """Returns ``(MetricSet, per-subject predictions)``; the model runs in eval mode."""
    preds, _ = predict(model, dataset)
    metrics = metric_set([p.prob_patient for p in preds], [p.pred for p in preds], [p.label for p in preds])
    return metrics, preds


# --------------------------------------------------------------------------
# training loop


def epoch_schedule(epochs: int, no_step2: bool) -> list[int]:
    """Step per epoch: odd epochs Step 1, even epochs Step 2 (all Step 1 without Step 2)."""
    return [1 if (no_step2 or e % 2 == 1) else 2 for e in range(1, epochs + 1)]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[k : k + batch_size] for k in range(0, n, batch_size)]


@dataclass
class TrainResult:
    model: CCFCNet
    logs: list[EpochLog]
    best_epoch: int
    best_val: Optional[MetricSet]
    final_model: CCFCNet


def train(train_set: Dataset, val_set: Dataset, model_config: ModelConfig, config: TrainConfig,
          progress=None) -> TrainResult:
    """Alternating training; keeps the snapshot with the best validation AUC.

    Validation AUC is measured after each Step-1 epoch. Step 2 leaves the
    classifier untouched, so a Step-1 epoch and the Step-2 epoch after it
    share one score and the snapshot is taken once the pair completes.
    Ties go to the later epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ShapeError("train and validation splits must be non-empty")
    ab = config.ablations
    model_config = model_config.with_(no_mask=ab.no_mask, no_intra=ab.no_intra, no_prototype=ab.no_prototype)
    torch.manual_seed(config.seed)
    model = CCFCNet(model_config.with_(init_seed=config.seed))
    trainer = Trainer(model, config)
    order_rng = np.random.default_rng([config.seed, 1])

    x_all, y_all = to_tensor(train_set)
    schedule = epoch_schedule(config.epochs, ab.no_step2)
    logs: list[EpochLog] = []
    best_state, best_auc, best_epoch, best_val = None, -math.inf, 0, None
    pending = None

    for epoch, step in enumerate(schedule, start=1):
        sums = np.zeros(4)
        count = 0
        for idx in _batches(len(train_set), config.batch_size, order_rng):
            x, y = x_all[idx], y_all[idx]
            if step == 1:
                out = trainer.step1_update(x, y)
            else:
                try:
                    out = trainer.step2_update(x, y)
                except NoValidPairs:
                    continue
            w = len(idx)
            sums += w * np.array([out.recon, out.cls, out.reg, out.total])
            count += w
        means = sums / max(count, 1)
        val, _ = evaluate(val_set, model)
        logs.append(EpochLog(epoch, step, *means.tolist(), val))
        if progress:
            progress(logs[-1])

        if step == 1:
            auc = -1.0 if math.isnan(val.auc) else val.auc
            pending = (auc, epoch, val) if auc >= best_auc else None
            if pending:
                best_auc = auc
        closes_pair = step == 2 or ab.no_step2 or epoch == len(schedule) or schedule[epoch] == 1
        if pending and closes_pair:
            best_state = copy.deepcopy(model.state_dict())
            _, best_epoch, best_val = pending
            pending = None

    final_model = model
    best_model = CCFCNet(model.cfg)
    best_model.load_state_dict(best_state if best_state is not None else model.state_dict())
    best_model.eval()
    final_model.eval()
    return TrainResult(best_model, logs, best_epoch, best_val, final_model)


def write_epoch_log(logs: list[EpochLog], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for rec in logs:
            writer.writerow([rec.epoch, rec.step, repr(rec.loss_recon), repr(rec.loss_class),
                             repr(rec.loss_reg), repr(rec.loss_total), *(repr(v) for v in rec.val.as_row())])


def train_config_from_dict(data: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in data.items() if k in names}
    if isinstance(kw.get("ablations"), str):
        kw["ablations"] = Ablations.parse(kw["ablations"])
    return TrainConfig(**kw)
