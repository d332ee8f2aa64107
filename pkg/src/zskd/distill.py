"""Training loops: cross-entropy baselines, classical KD, zero-shot KD on impressions, fine-tuning, evaluation.

Soft targets come from the frozen teacher on every batch; stored impression
targets are never used as labels. Evaluation is always at temperature 1.

TrainReport files: ``<stem>.csv`` has columns ``epoch,loss,test_acc`` (one row
per epoch, ``test_acc`` empty on epochs that were not evaluated) and ``<stem>.json`` holds
``epochs, final_acc, best_acc, best_epoch, wall_clock_s, seed, config`` plus
any ``extra`` fields.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import DimensionError, NumericalError, ParameterError, ProvenanceError
from .impressions import TransferSet
from .models import Network, parameter_hash

log = logging.getLogger(__name__)

EVAL_TAU = 1.0


@dataclass
class DistillConfig:
    tau: float = 20.0
    lam: float = 0.3
    lr: float = 0.001
    batch_size: int = 512
    epochs: int = 200
    optimizer: str = "adam"
    seed: int = 0
    kd_loss: str = "ce"
    eval_tau: float = EVAL_TAU
    eval_every: int = 1

    def __post_init__(self):
        problems = []
        if not self.tau > 0:
            problems.append(f"tau must be > 0, got {self.tau}")
        if not self.lam >= 0:
            problems.append(f"lambda must be >= 0, got {self.lam}")
        if not self.lr > 0:
            problems.append(f"learning rate must be > 0, got {self.lr}")
        if int(self.batch_size) < 1:
            problems.append(f"batch size must be >= 1, got {self.batch_size}")
        if int(self.epochs) < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer != "adam":
            problems.append(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.kd_loss not in ("ce", "mse"):
            problems.append(f"kd_loss must be 'ce' or 'mse', got {self.kd_loss!r}")
        if int(self.eval_every) < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eval_tau != EVAL_TAU:
            problems.append("evaluation temperature is fixed at 1")
        if problems:
            raise ParameterError("; ".join(problems))


@dataclass
class TrainReport:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    best_acc: float | None = None
    best_epoch: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def final_acc(self) -> float | None:
        done = [a for a in self.test_acc if a is not None]
        return done[-1] if done else None

    def record(self, epoch: int, loss: float, acc: float | None) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise ParameterError(f"epoch {epoch} recorded after epoch {self.epochs[-1]}")
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.test_acc.append(acc)
        if acc is not None:
            if self.best_acc is None or acc > self.best_acc:
                self.best_acc, self.best_epoch = acc, epoch

    def summary(self) -> dict:
        return {"epochs": len(self.epochs), "final_acc": self.final_acc, "best_acc": self.best_acc,
                "best_epoch": self.best_epoch, "wall_clock_s": self.wall_clock_s, "seed": self.seed,
                "config": self.config, **self.extra}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(**d)

    def save(self, stem) -> tuple:
        stem = Path(stem)
        csv_path, json_path = stem.with_name(stem.name + ".csv"), stem.with_name(stem.name + ".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "test_acc"])
            for e, l, a in zip(self.epochs, self.losses, self.test_acc):
                w.writerow([e, repr(float(l)), "" if a is None else repr(float(a))])
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


# ------------------------------------------------------------------- losses

def _onehot(labels: np.ndarray, K: int) -> np.ndarray:
    return np.eye(K)[np.asarray(labels, dtype=np.int64)]


def teacher_soft_labels(teacher: Network, x: np.ndarray, tau: float) -> np.ndarray:
    with teacher.frozen():
        return T.softmax_np(teacher.logits(x).data, tau)


def ce_batch_loss(net: Network, x: np.ndarray, labels: np.ndarray) -> T.Tensor:
    probs = T.softmax_t(net.logits(x), 1.0)
    return T.cross_entropy(_onehot(labels, net.num_classes), probs)


def _kd_term(student_logits: T.Tensor, soft: np.ndarray, tau: float, kind: str) -> T.Tensor:
    probs = T.softmax_t(student_logits, tau)
    if kind == "mse":
        return T.mse(probs, T.Tensor(soft))
    return T.cross_entropy(soft, probs)


def kd_batch_loss(student: Network, teacher: Network, x: np.ndarray, labels=None, tau: float = 20.0,
                  lam: float = 0.3, kind: str = "ce") -> T.Tensor:
    """Soft-target loss against the teacher at ``tau`` plus ``lam`` times hard-label CE at temperature 1."""
    if student.num_classes != teacher.num_classes:
        raise DimensionError(f"student has {student.num_classes} classes, teacher {teacher.num_classes}")
    logits = student.logits(x)
    loss = _kd_term(logits, teacher_soft_labels(teacher, x, tau), tau, kind)
    if lam > 0:
        if labels is None:
            raise ParameterError("hard labels are required when lambda > 0")
        hard = T.cross_entropy(_onehot(labels, student.num_classes), T.softmax_t(logits, 1.0))
        loss = loss + hard * lam
    return loss


def zskd_batch_loss(student: Network, teacher: Network, x: np.ndarray, tau: float = 20.0,
                    kind: str = "ce") -> T.Tensor:
    """Soft-target loss only; no ground-truth term."""
    if student.num_classes != teacher.num_classes:
        raise DimensionError(f"student has {student.num_classes} classes, teacher {teacher.num_classes}")
    return _kd_term(student.logits(x), teacher_soft_labels(teacher, x, tau), tau, kind)


# --------------------------------------------------------------- evaluation

def predict(net: Network, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return np.argmax(net.predict_logits(images, batch_size), axis=1)


def evaluate(net: Network, data, labels=None) -> float:
    """Top-1 accuracy in percent at temperature 1."""
    images, labels = (data.images, data.labels) if isinstance(data, Dataset) else (data, labels)
    if labels is None or len(labels) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    return float(100.0 * np.mean(predict(net, images) == np.asarray(labels)))


# -------------------------------------------------------------- core loop

def _save_state(path: Path, net: Network, opt: T.Adam, report: TrainReport, epoch: int, best: dict) -> None:
    arrays = {f"p/{n}": p.data for n, p in net.params.items()}
    for i, st in enumerate(opt.states):
        arrays[f"m/{i}"], arrays[f"v/{i}"] = st.m, st.v
    for n, arr in (best or {}).items():
        arrays[f"best/{n}"] = arr
    meta = {"epoch": epoch, "steps": [st.step for st in opt.states], "report": report.to_dict()}
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, meta=np.frombuffer(json.dumps(meta).encode(), np.uint8), **arrays)
    tmp.replace(path)


def _load_state(path: Path, net: Network, opt: T.Adam, config: dict):
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta["report"]["config"] != config:
            raise ProvenanceError(f"{path}: resume state was written under a different configuration")
        for n, p in net.params.items():
            p.data[...] = z[f"p/{n}"]
        for i, st in enumerate(opt.states):
            st.m[...], st.v[...], st.step = z[f"m/{i}"], z[f"v/{i}"], meta["steps"][i]
        best = {k[5:]: z[k].copy() for k in z.files if k.startswith("best/")}
    return meta["epoch"], TrainReport.from_dict(meta["report"]), best


def _fit(net: Network, n: int, batch_loss, config: DistillConfig, test: Dataset | None, name: str,
         state_path=None, extra_config=None, progress=None) -> tuple:
    if n < 1:
        raise ParameterError(f"{name}: training set is empty")
    cfg = dict(asdict(config), stage=name, **(extra_config or {}))
    net.requires_grad_(True)
    opt = T.Adam(net.parameters(), config.lr)
    report, start, best = TrainReport(cfg, config.seed), 0, {}
    state_path = Path(state_path) if state_path else None
    if state_path is not None and state_path.exists():
        start, report, best = _load_state(state_path, net, opt, cfg)
        log.info("%s: resuming after epoch %d", name, start)
    t0 = time.perf_counter() - report.wall_clock_s
    for epoch in range(start, config.epochs):
        total, count = 0.0, 0
        for idx in batches(n, config.batch_size, config.seed, epoch):
            opt.zero_grad()
            try:
                loss = batch_loss(idx)
            except NumericalError as exc:
                raise NumericalError(f"{name}: non-finite value in epoch {epoch + 1}: {exc}") from exc
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        due = (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs
        acc = evaluate(net, test) if test is not None and due else None
        report.record(epoch + 1, total / count, acc)
        if acc is not None and report.best_epoch == epoch + 1:
            best = net.state()
        report.wall_clock_s = time.perf_counter() - t0
        log.info("%s epoch %d/%d loss %.5f acc %s", name, epoch + 1, config.epochs, total / count, acc)
        if progress:
            progress(epoch + 1, config.epochs, total / count, acc)
        if state_path is not None:
            _save_state(state_path, net, opt, report, epoch + 1, best)
    report.wall_clock_s = time.perf_counter() - t0
    report.extra["best_state"] = bool(best)
    net.best_state = best or None
    return net, report


# ----------------------------------------------------------------- stages

def train_teacher(net: Network, train: Dataset, config: DistillConfig, test: Dataset | None = None,
                  state_path=None, progress=None) -> tuple:
    """Mean cross-entropy on one-hot labels with Adam."""
    return _fit(net, len(train), lambda idx: ce_batch_loss(net, train.images[idx], train.labels[idx]),
                config, test, "teacher", state_path, progress=progress)


def train_student_ce(net: Network, train: Dataset, config: DistillConfig, test: Dataset | None = None,
                     state_path=None, progress=None) -> tuple:
    return _fit(net, len(train), lambda idx: ce_batch_loss(net, train.images[idx], train.labels[idx]),
                config, test, "student_ce", state_path, progress=progress)


def train_student_kd(student: Network, teacher: Network, train: Dataset, config: DistillConfig,
                     test: Dataset | None = None, state_path=None, progress=None) -> tuple:
    if student.num_classes != teacher.num_classes:
        raise DimensionError(f"student has {student.num_classes} classes, teacher {teacher.num_classes}")
    with teacher.frozen():
        return _fit(student, len(train),
                    lambda idx: kd_batch_loss(student, teacher, train.images[idx], train.labels[idx],
                                              config.tau, config.lam, config.kd_loss),
                    config, test, "student_kd", state_path, {"teacher_hash": parameter_hash(teacher)},
                    progress)


def _check_provenance(tset, teacher: Network, allow_mismatch: bool) -> str:
    th = parameter_hash(teacher)
    found = tset.provenance.get("teacher_hash")
    if found != th and not allow_mismatch:
        raise ProvenanceError(f"transfer set was crafted from teacher {found}, not {th}")
    return th


def zskd_distill(student: Network, teacher: Network, tset, config: DistillConfig, test: Dataset | None = None,
                 allow_mismatch: bool = False, state_path=None, progress=None) -> tuple:
    """Distil on impressions only, with the teacher's soft outputs as targets."""
    if len(tset) == 0:
        raise ParameterError("transfer set is empty")
    th = _check_provenance(tset, teacher, allow_mismatch)
    images = tset.images
    with teacher.frozen():
        return _fit(student, len(images),
                    lambda idx: zskd_batch_loss(student, teacher, images[idx], config.tau, config.kd_loss),
                    config, test, "zskd", state_path, {"teacher_hash": th, "transfer_set": len(images)},
                    progress)


def finetune_augmented(student: Network, teacher: Network, tset, augmented, config: DistillConfig,
                       test: Dataset | None = None, allow_mismatch: bool = False, state_path=None,
                       progress=None) -> tuple:
    """Continue the zero-shot objective on original plus augmented impressions.

    ``augmented`` is a TransferSet or anything indexable by an index array
    (such as :class:`zskd.augment.AugmentedView`).
    """
    if augmented is None or len(augmented) == 0:
        raise ParameterError("fine-tuning needs a nonempty augmented set")
    if len(tset) == 0:
        raise ParameterError("transfer set is empty")
    th = _check_provenance(tset, teacher, allow_mismatch)
    n0 = len(tset)
    aug = augmented.images if isinstance(augmented, TransferSet) else augmented

    def gather(idx):
        idx = np.sort(idx)
        head = idx[idx < n0]
        tail = idx[idx >= n0] - n0
        parts = [tset.images[head]] if len(head) else []
        if len(tail):
            parts.append(aug[tail])
        return np.concatenate(parts)

    with teacher.frozen():
        return _fit(student, n0 + len(augmented),
                    lambda idx: zskd_batch_loss(student, teacher, gather(idx), config.tau, config.kd_loss),
                    config, test, "finetune", state_path,
                    {"teacher_hash": th, "transfer_set": n0, "augmented": len(augmented)}, progress)
