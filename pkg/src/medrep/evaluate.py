"""Downstream tasks, a frozen-representation classifier and the evaluation metrics."""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit
from scipy.stats import rankdata

from .augment import AugmentConfig, augment_dataset
from .descriptions import RepresentationMatrix
from .errors import BadVisit, DegenerateLabels, EmptyTrajectory, UndefinedMetric
from .graph.train import AdamW
from .neighbors import NeighborSets
from .trajectory import (
    MAX_LEN,
    ClinicalRecord,
    DecileBins,
    PatientTrajectory,
    Visit,
    build_trajectory,
    dedup_hourly_measurements,
    slice_trajectory,
    truncate_trajectory,
)
from .vocab import NUM_SPECIALS, PAD, ConceptCatalog

log = logging.getLogger(__name__)


class Task(str, enum.Enum):
    MT = "MT"
    LLOS = "LLOS"
    RA = "RA"


LONG_STAY = timedelta(days=7)
READMISSION_DAYS = 30


@dataclass(frozen=True)
class TaskLabel:
    task: Task
    patient_id: str
    label: int
    prediction_time: datetime
    visit_id: str = ""


def _midnight(ts: datetime) -> datetime:
    return ts.replace(hour=0, minute=0, second=0, microsecond=0)


def derive_labels(visits: Iterable[Visit], task: Task | str) -> list[TaskLabel]:
    """One label per hospitalization.

    MT: died during the stay. LLOS: stay strictly longer than 7 x 24 h.
    RA: the next admission starts no more than 30 calendar days after discharge.
    Prediction time is midnight of the admission date (MT, LLOS) or of the
    discharge date (RA).
    """
    task = Task(task)
    by_patient: dict[str, list[Visit]] = {}
    for v in visits:
        if v.discharge < v.admission:
            raise BadVisit(f"visit {v.visit_id} of {v.patient_id} is discharged before admission")
        by_patient.setdefault(v.patient_id, []).append(v)
    out = []
    for pid in sorted(by_patient):
        stays = sorted(by_patient[pid], key=lambda v: (v.admission, v.visit_id))
        for i, v in enumerate(stays):
            if task is Task.MT:
                label, when = int(v.died), _midnight(v.admission)
            elif task is Task.LLOS:
                label, when = int(v.discharge - v.admission > LONG_STAY), _midnight(v.admission)
            else:
                nxt = next((w for w in stays[i + 1:] if w.admission >= v.discharge), None)
                gap = None if nxt is None else (nxt.admission.date() - v.discharge.date()).days
                label = int(not v.died and gap is not None and gap <= READMISSION_DAYS)
                when = _midnight(v.discharge)
            out.append(TaskLabel(task, pid, label, when, v.visit_id))
    return out


def build_task_dataset(
    records: Sequence[ClinicalRecord],
    visits: Sequence[Visit],
    catalog: ConceptCatalog,
    bins: Optional[DecileBins],
    task: Task | str,
    max_len: int = MAX_LEN,
    min_concepts: int = 1,
) -> list[PatientTrajectory]:
    """Labelled trajectories (history before each prediction time) for one task.

    Samples with fewer than ``min_concepts`` real concepts in their history are
    skipped. Over-long histories keep only the slice ending at the prediction time.
    """
    task = Task(task)
    per_patient: dict[str, list[ClinicalRecord]] = {}
    for r in dedup_hourly_measurements(records):
        per_patient.setdefault(r.patient_id, []).append(r)
    for recs in per_patient.values():
        recs.sort(key=lambda r: r.timestamp)
    births = {v.patient_id: v.birth_date for v in visits}
    full: dict[str, tuple] = {}
    out = []
    for lab in derive_labels(visits, task):
        pid = lab.patient_id
        recs = per_patient.get(pid, [])
        if pid not in full:
            vids = [r.visit_id for r in recs]
            blocks = sum(1 for a, b in zip(vids, vids[1:]) if a != b) + bool(vids)
            contiguous = blocks == len(set(vids))
            times = np.array([r.timestamp for r in recs], dtype="datetime64[us]")
            whole = build_trajectory(recs, catalog, bins, birth_date=births.get(pid), patient_id=pid) if contiguous else None
            full[pid] = (whole, times)
        whole, times = full[pid]
        labels = {task.value: lab.label}
        if whole is not None:
            n_before = int(np.searchsorted(times, np.datetime64(lab.prediction_time, "us"), side="left"))
            t = truncate_trajectory(whole, n_before)
            t.labels = labels
        else:
            t = build_trajectory(
                recs, catalog, bins, as_of=lab.prediction_time,
                birth_date=births.get(pid), patient_id=pid, labels=labels,
            )
        if int(np.sum(t.concept >= NUM_SPECIALS)) < min_concepts:
            continue
        out.append(slice_trajectory(t, max_len)[-1])
    return out


def split_patients(patient_ids: Iterable[str], seed: int, fractions=(0.70, 0.15, 0.15)) -> dict[str, str]:
    """Random patient-level train/val/test assignment."""
    ids = sorted(set(patient_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    names = np.array(["test"] * len(ids), dtype=object)
    names[order[:n_train]] = "train"
    names[order[n_train:n_train + n_val]] = "val"
    return dict(zip(ids, names.tolist()))


# -- encoding ----------------------------------------------------------------

def pooling_matrix(trajectories: Sequence[PatientTrajectory], num_concepts: int) -> sp.csr_matrix:
    """Sparse (n x N) operator averaging representation rows over non-[PAD] positions."""
    rows, cols = [], []
    for i, t in enumerate(trajectories):
        c = t.concept[t.concept != PAD]
        if len(c) == 0:
            raise EmptyTrajectory(f"trajectory {i} ({t.patient_id}) has no non-pad positions")
        rows.append(np.full(len(c), i))
        cols.append(c)
    if not rows:
        return sp.csr_matrix((0, num_concepts))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    counts = np.bincount(r, minlength=len(trajectories)).astype(np.float64)
    P = sp.csr_matrix((1.0 / counts[r], (r, c)), shape=(len(trajectories), num_concepts))
    P.sum_duplicates()
    return P


def encode_trajectory(t: PatientTrajectory, R) -> np.ndarray:
    """Mean of the representation rows over the non-[PAD] positions."""
    values = getattr(R, "values", R)
    c = t.concept[t.concept != PAD]
    if len(c) == 0:
        raise EmptyTrajectory("trajectory has only padding")
    return values[c].mean(axis=0)


def labels_of(trajectories: Sequence[PatientTrajectory], task: str) -> np.ndarray:
    return np.array([t.labels[task] for t in trajectories], dtype=np.int64)


# -- metrics -----------------------------------------------------------------

def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise UndefinedMetric("both classes must be present")
    return s, y


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted 1/2."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def youden_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximizing sensitivity + specificity (ties: lowest) and the F1 at ``score >= threshold``."""
    s, y = _check_binary(scores, labels)
    cand = np.unique(s)
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    P, N = len(pos), len(neg)
    tp = P - np.searchsorted(pos, cand, side="left")
    fp = N - np.searchsorted(neg, cand, side="left")
    tn = N - fp
    # J scaled by P*N, exact in integers
    j = tp * N + tn * P
    best = int(np.flatnonzero(j == j.max())[0])
    return float(cand[best]), f1_at(s, y, cand[best])


def f1_at(scores, labels, threshold: float) -> float:
    s = np.asarray(scores)
    y = np.asarray(labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


# -- classifiers -------------------------------------------------------------

@dataclass
class ClassifierConfig:
    batch_size: int = 32
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    max_epochs: int = 50
    min_positives: int = 3
    checks_per_epoch: int = 5
    patience: int = 10
    seed: int = 0


def make_batches(labels: np.ndarray, batch_size: int, min_positives: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of full-size index batches; negatives are swapped for resampled positives
    whenever a batch would hold fewer than ``min_positives`` positives."""
    n = len(labels)
    n_batches = max(1, -(-n // batch_size))
    order = rng.permutation(n)
    if n_batches * batch_size > n:
        order = np.concatenate([order, rng.permutation(n)[: n_batches * batch_size - n]])
    pos_idx = np.flatnonzero(labels == 1)
    need_pos = min(min_positives, len(pos_idx), batch_size)
    pos_stream = rng.permutation(pos_idx)
    cursor = 0
    batches = []
    for b in range(n_batches):
        batch = order[b * batch_size:(b + 1) * batch_size].copy()
        is_pos = labels[batch] == 1
        missing = need_pos - int(is_pos.sum())
        if missing > 0:
            slots = np.flatnonzero(~is_pos)[:missing]
            for slot in slots:
                if cursor >= len(pos_stream):
                    pos_stream = rng.permutation(pos_idx)
                    cursor = 0
                batch[slot] = pos_stream[cursor]
                cursor += 1
        batches.append(batch)
    return batches


@dataclass
class FrozenClassifier:
    """Linear logistic head over mean-pooled rows of a representation matrix.

    With ``trainable`` set, the matrix is a learned embedding table (the
    trainable-index baseline); otherwise it is never modified.
    """

    representations: np.ndarray
    w: np.ndarray
    b: float = 0.0
    trainable: bool = False
    history: list[tuple[int, float]] = field(default_factory=list, repr=False)

    def decision(self, trajectories: Sequence[PatientTrajectory]) -> np.ndarray:
        P = pooling_matrix(trajectories, self.representations.shape[0])
        return np.asarray(P @ self.representations) @ self.w + self.b

    def predict_proba(self, trajectories: Sequence[PatientTrajectory]) -> np.ndarray:
        return expit(self.decision(trajectories))


def _logistic_grad(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    """d(mean log-loss)/d(logit) per sample."""
    return (expit(X @ w + b) - y) / len(y)


_DENSE_POOL_LIMIT = 1 << 24


def train_classifier(
    train: Sequence[PatientTrajectory],
    val: Sequence[PatientTrajectory],
    task: str,
    representations,
    config: ClassifierConfig = ClassifierConfig(),
    trainable: bool = False,
) -> FrozenClassifier:
    """Mini-batch AdamW on the logistic loss with oversampled batches and
    validation-AUROC early stopping; returns the best-validation head.

    ``representations`` is the frozen matrix, or for ``trainable`` the
    initial embedding table.
    """
    task = Task(task).value
    y = labels_of(train, task).astype(np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateLabels(f"training labels for {task} contain a single class")
    y_val = labels_of(val, task)
    E = np.array(getattr(representations, "values", representations), dtype=np.float64, copy=True)
    rng = np.random.default_rng(config.seed)
    h = E.shape[1]
    params = {"w": np.zeros(h), "b": np.zeros(1)}
    if trainable:
        params["E"] = E
    opt = AdamW(params, config.learning_rate, config.weight_decay)
    P_train = pooling_matrix(train, E.shape[0])
    P_val = pooling_matrix(val, E.shape[0])
    if trainable and P_train.shape[0] * P_train.shape[1] <= _DENSE_POOL_LIMIT:
        # row slicing of a small dense operator is much cheaper than of a CSR matrix
        P_train = P_train.toarray()
    X_train = None if trainable else np.asarray(P_train @ E)
    X_val = None if trainable else np.asarray(P_val @ E)
    val_ok = len(np.unique(y_val)) == 2

    def monitor() -> float:
        # validation AUROC; negative training log-loss if the validation set is single-class
        if val_ok:
            Xv = X_val if X_val is not None else np.asarray(P_val @ params["E"])
            return auroc(Xv @ params["w"] + params["b"][0], y_val)
        Xt = X_train if X_train is not None else np.asarray(P_train @ params["E"])
        z = Xt @ params["w"] + params["b"][0]
        return -float(np.mean(np.logaddexp(0.0, -(2 * y - 1) * z)))

    best = {k: v.copy() for k, v in params.items()}
    best_score = -np.inf
    stale = 0
    history = []
    done = False
    for epoch in range(config.max_epochs):
        batches = make_batches(y, config.batch_size, config.min_positives, rng)
        checks = {int(round(len(batches) * k / config.checks_per_epoch)) for k in range(1, config.checks_per_epoch + 1)}
        for bi, idx in enumerate(batches, start=1):
            if trainable:
                Pb = P_train[idx]
                Xb = np.asarray(Pb @ params["E"])
            else:
                Xb = X_train[idx]
            g = _logistic_grad(Xb, y[idx], params["w"], params["b"][0])
            grads = {"w": Xb.T @ g, "b": np.array([g.sum()])}
            if trainable:
                grads["E"] = np.outer(np.asarray(Pb.T @ g).ravel(), params["w"])
            opt.step(grads)
            if bi in checks:
                score = monitor()
                history.append((epoch, score))
                if score > best_score:
                    best_score, stale = score, 0
                    best = {k: v.copy() for k, v in params.items()}
                else:
                    stale += 1
                    if stale >= config.patience:
                        done = True
                        break
        if done:
            break
    table = best["E"] if trainable else np.asarray(getattr(representations, "values", representations))
    return FrozenClassifier(table, best["w"], float(best["b"][0]), trainable, history)


def random_embedding_table(shape: tuple[int, int], scale: float, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, scale, size=shape)


def matched_random_table(R, seed: int) -> np.ndarray:
    """Random table shaped like ``R`` with entries at the RMS scale of its non-zero rows."""
    values = np.asarray(getattr(R, "values", R))
    live = values[np.any(values != 0, axis=1)]
    scale = float(np.sqrt(np.mean(live ** 2))) if live.size else 1.0
    return random_embedding_table(values.shape, scale, seed)


# -- reporting ---------------------------------------------------------------

@dataclass
class EvalRow:
    model: str
    task: str
    dataset: str
    factor: int
    auroc: float
    f1: float
    threshold: float
    n: int
    incidence: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    selection: dict[str, dict[str, float]] = field(default_factory=dict)

    def row(self, task: str, dataset: str, model: Optional[str] = None) -> EvalRow:
        for r in self.rows:
            if r.task == task and r.dataset == dataset and (model is None or r.model == model):
                return r
        raise KeyError((task, dataset, model))

    def to_tsv(self) -> str:
        buf = io.StringIO()
        cols = list(EvalRow.__dataclass_fields__)
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], "selection": self.selection}, sort_keys=True, indent=2)


def evaluate(clf: FrozenClassifier, trajectories: Sequence[PatientTrajectory], task: str):
    y = labels_of(trajectories, task)
    scores = clf.decision(trajectories)
    thr, f1 = youden_threshold(scores, y)
    return auroc(scores, y), f1, thr, len(y), float(y.mean())


@dataclass
class TaskSplits:
    train: list[PatientTrajectory]
    val: list[PatientTrajectory]
    test: list[PatientTrajectory]


def run_benchmark(
    internal: Mapping[str, TaskSplits],
    externals: Mapping[str, Mapping[str, Sequence[PatientTrajectory]]],
    R,
    augment: AugmentConfig = AugmentConfig(),
    factors: Sequence[int] = (1,),
    sets: Optional[NeighborSets] = None,
    domains: Optional[np.ndarray] = None,
    classifier: ClassifierConfig = ClassifierConfig(),
    model: str = "medrep",
    trainable: bool = False,
) -> EvalReport:
    """Per task: train at each augmentation factor, keep the factor with the best
    internal validation AUROC, report internal test and every external set."""
    values = np.asarray(getattr(R, "values", R), dtype=np.float64)
    report = EvalReport()
    for task, splits in internal.items():
        task = Task(task).value
        best = None
        scores = {}
        for factor in factors:
            cfg = AugmentConfig(augment.replace_prob, int(factor), augment.seed)
            train = splits.train
            if factor > 1:
                if sets is None:
                    raise ValueError("augmentation needs neighbor sets")
                train = augment_dataset(train, sets, cfg, domains)
            clf = train_classifier(train, splits.val, task, values, classifier, trainable)
            val_auc = evaluate(clf, splits.val, task)[0]
            scores[str(factor)] = val_auc
            log.info("%s %s factor=%d val AUROC=%.4f", model, task, factor, val_auc)
            if best is None or val_auc > best[0]:
                best = (val_auc, int(factor), clf)
        _, factor, clf = best
        report.selection[f"{model}/{task}"] = scores
        sets_to_eval = [("internal", splits.test)] + [(name, ext[task]) for name, ext in externals.items()]
        for name, data in sets_to_eval:
            auc, f1, thr, n, inc = evaluate(clf, data, task)
            report.rows.append(EvalRow(model, task, name, factor, auc, f1, thr, n, inc))
    return report
