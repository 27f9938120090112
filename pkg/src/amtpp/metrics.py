"""Evaluation metrics, the reverse-last-trip baseline and entropy-rate stratification."""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import UserSequence, pad_batch
from .entropy import lz_entropy_rate
from .model import AMTPP


class UnknownStationError(ValueError):
    pass


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean(y_true == y_pred)) if y_true.size else float("nan")


def f1_score(y_true, y_pred, average: str = "weighted") -> float:
    """Multiclass F1 over the union of true and predicted labels.

    ``weighted`` averages per-class F1 by true-label support; ``macro``
    averages uniformly.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        return float("nan")
    labels = np.union1d(y_true, y_pred)
    f1s, support = [], []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
        support.append(np.sum(y_true == c))
    f1s, support = np.array(f1s), np.array(support, dtype=float)
    if average == "macro":
        return float(f1s.mean())
    if average != "weighted":
        raise ValueError(f"unknown F1 averaging {average!r}")
    return float((f1s * support).sum() / support.sum())


@dataclass
class UserPredictions:
    """Per-trip outcomes for one user (time terms cover trips with a defined gap)."""

    user_id: str
    true_o: np.ndarray
    true_d: np.ndarray
    pred_o: np.ndarray
    pred_d: np.ndarray
    ll_t: np.ndarray | None = None
    ll_o: np.ndarray | None = None
    ll_d: np.ndarray | None = None


@dataclass
class MetricsReport:
    nll_t: float
    nll_o: float
    nll_d: float
    acc_o: float
    acc_d: float
    f1_o: float
    f1_d: float
    n_trips: int
    n_users: int
    groups: dict[str, MetricsReport] = field(default_factory=dict)
    group_entropy: dict[str, tuple[float, float]] = field(default_factory=dict)

    def rows(self, group: str = "all") -> list[tuple[str, str, float, str]]:
        out = [("t", "nll", self.nll_t, group), ("o", "nll", self.nll_o, group), ("d", "nll", self.nll_d, group),
               ("o", "accuracy", self.acc_o, group), ("d", "accuracy", self.acc_d, group),
               ("o", "f1", self.f1_o, group), ("d", "f1", self.f1_d, group),
               ("all", "trips", float(self.n_trips), group), ("all", "users", float(self.n_users), group)]
        for name, sub in self.groups.items():
            out += sub.rows(name)
        return out

    def summary(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"  trips={self.n_trips} users={self.n_users}")
        lines.append(f"  NLL   t={self.nll_t:.4f} o={self.nll_o:.4f} d={self.nll_d:.4f}")
        lines.append(f"  Acc   o={self.acc_o:.4f} d={self.acc_d:.4f}")
        lines.append(f"  F1    o={self.f1_o:.4f} d={self.f1_d:.4f}")
        for name, sub in self.groups.items():
            lo, hi = self.group_entropy.get(name, (float("nan"), float("nan")))
            lines.append(f"  [{name} entropy {lo:.3f}-{hi:.3f}] users={sub.n_users} "
                         f"NLL t={sub.nll_t:.4f} o={sub.nll_o:.4f} d={sub.nll_d:.4f} "
                         f"Acc o={sub.acc_o:.4f} d={sub.acc_d:.4f}")
        return "\n".join(lines)


def summarize(preds: list[UserPredictions], average: str = "weighted") -> MetricsReport:
    def cat(attr):
        parts = [getattr(p, attr) for p in preds if getattr(p, attr) is not None]
        return np.concatenate(parts) if parts else np.array([])

    true_o, true_d, pred_o, pred_d = cat("true_o"), cat("true_d"), cat("pred_o"), cat("pred_d")
    ll_t, ll_o, ll_d = cat("ll_t"), cat("ll_o"), cat("ll_d")

    def nll(a):
        return float(-a.mean()) if a.size else float("nan")

    return MetricsReport(nll(ll_t), nll(ll_o), nll(ll_d), accuracy(true_o, pred_o), accuracy(true_d, pred_d),
                         f1_score(true_o, pred_o, average), f1_score(true_d, pred_d, average),
                         int(true_o.size), len(preds))


def _check_stations(sequences, S: int) -> None:
    for seq in sequences:
        for tr in seq.trips:
            for sid in (tr.o, tr.d):
                if not 0 <= sid < S:
                    raise UnknownStationError(f"user {seq.user_id}: station {sid} unknown to a model with S={S}")


def predict_sequences(model: AMTPP, sequences: list[UserSequence], batch_size: int = 64,
                      score_from: int | None = None) -> list[UserPredictions]:
    """One-step-ahead predictions for every trip, each conditioned on the user's earlier trips.

    With ``score_from`` (epoch seconds) earlier trips serve as history only;
    users with nothing to score are dropped.
    """
    _check_stations(sequences, model.config.num_stations)
    out = []
    S = model.config.num_stations
    for i in range(0, len(sequences), batch_size):
        group = sequences[i:i + batch_size]
        batch = pad_batch(group, S, model.config.max_len)
        steps = model.step_log_likelihoods(batch)
        o_probs = steps.heads.origin_probs.data
        d_probs = steps.heads.dest_probs
        for b, seq in enumerate(group):
            n = int(batch.lengths[b])
            keep = np.ones(n, dtype=bool)
            if score_from is not None:
                keep = seq.times[len(seq) - n:] >= score_from
                if not keep.any():
                    continue
            tm = (batch.time_mask[b, :n] > 0) & keep
            out.append(UserPredictions(
                seq.user_id, batch.origins[b, :n][keep], batch.destinations[b, :n][keep],
                o_probs[b, :n].argmax(-1)[keep], d_probs[b, :n].argmax(-1)[keep],
                steps.time.data[b, :n][tm], steps.origin.data[b, :n][keep], steps.dest.data[b, :n][keep]))
    return out


def evaluate(model: AMTPP, sequences: list[UserSequence], batch_size: int = 64,
             average: str | None = None, score_from: int | None = None) -> MetricsReport:
    return summarize(predict_sequences(model, sequences, batch_size, score_from),
                     average or model.config.f1_average)


def naive_predictions(sequences: list[UserSequence], reference: list[UserSequence] | None = None,
                      score_from: int | None = None) -> list[UserPredictions]:
    """Reverse the previous trip: ``o' = d_prev``, ``d' = o_prev``.

    A user's first trip falls back to the globally most frequent origin and
    destination of ``reference`` (default: ``sequences``).  ``score_from``
    behaves as in :func:`predict_sequences`.
    """
    ref = reference if reference is not None else sequences
    o_counts = Counter(tr.o for s in ref for tr in s.trips)
    d_counts = Counter(tr.d for s in ref for tr in s.trips)
    mode_o = min(o_counts, key=lambda k: (-o_counts[k], k)) if o_counts else 0
    mode_d = min(d_counts, key=lambda k: (-d_counts[k], k)) if d_counts else 0
    out = []
    for seq in sequences:
        o, d = seq.origins, seq.destinations
        if len(seq) == 0:
            continue
        pred_o = np.concatenate([[mode_o], d[:-1]])
        pred_d = np.concatenate([[mode_d], o[:-1]])
        keep = np.ones(len(seq), dtype=bool) if score_from is None else seq.times >= score_from
        if keep.any():
            out.append(UserPredictions(seq.user_id, o[keep], d[keep], pred_o[keep], pred_d[keep]))
    return out


def naive_baseline(sequences, reference=None, average: str = "weighted",
                   score_from: int | None = None) -> MetricsReport:
    return summarize(naive_predictions(sequences, reference, score_from), average)


def entropy_rates(sequences: list[UserSequence]) -> dict[str, float]:
    """Entropy rate of each user's interleaved origin/destination sequence."""
    return {s.user_id: lz_entropy_rate(s.locations()) for s in sequences if len(s) >= 1}


def entropy_report(sequences: list[UserSequence], preds: list[UserPredictions], n_groups: int = 5,
                   average: str = "weighted") -> MetricsReport:
    """Overall metrics plus a breakdown over equal-count entropy-rate groups."""
    rates = entropy_rates(sequences)
    by_user = {p.user_id: p for p in preds}
    users = [s.user_id for s in sequences if s.user_id in by_user and s.user_id in rates]
    report = summarize([by_user[u] for u in users], average)
    if len(users) < n_groups:
        warnings.warn(f"only {len(users)} users; entropy breakdown collapses to a single group")
        n_groups = 1
    values = np.array([rates[u] for u in users])
    order = np.argsort(values, kind="stable")
    for g, idx in enumerate(np.array_split(order, n_groups), start=1):
        name = f"q{g}"
        report.groups[name] = summarize([by_user[users[i]] for i in idx], average)
        report.group_entropy[name] = (float(values[idx].min()), float(values[idx].max()))
    return report


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "metric", "value", "group"])
        for target, metric, value, group in rows:
            w.writerow([target, metric, f"{value:.6f}", group])
