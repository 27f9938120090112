"""Next-origin head and the low-rank, column-stochastic OD transition matrix."""

from __future__ import annotations

import csv

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .time_head import MixtureOutputs


def build_context(h: Tensor, mixture: MixtureOutputs) -> Tensor:
    """``concat(h, w, <mixture shape parameters>)`` along the feature axis."""
    return ad.concatenate([h] + mixture.context_parts(), axis=-1)


def od_mask(num_stations: int, forbidden=()) -> np.ndarray:
    """Boolean ``S x S`` matrix indexed ``[destination, origin]``; True marks excluded pairs.

    The diagonal is always excluded.
    """
    mask = np.eye(num_stations, dtype=bool)
    for o, d in forbidden:
        mask[d, o] = True
    if np.all(mask, axis=0).any():
        bad = int(np.flatnonzero(np.all(mask, axis=0))[0])
        raise ValueError(f"OD mask leaves origin {bad} with no reachable destination")
    return mask


def origin_distribution(context: Tensor, phi_o: Tensor, b_o: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax over stations; returns ``(probabilities, log-probabilities)``."""
    logits = context @ phi_o + b_o
    return ad.softmax(logits), ad.log_softmax(logits)


def build_od_matrix(context: Tensor, phi_m1: Tensor, phi_m2: Tensor, mask: np.ndarray,
                    rank: int, log_space: bool = False) -> Tensor:
    """``softmax_columns(D1 D2^T + M)`` with ``D1, D2`` reshaped to ``S x rank``.

    Entry ``[..., d, o]`` is the probability of destination ``d`` given origin
    ``o`` (its logarithm when ``log_space``).
    """
    S = mask.shape[0]
    lead = context.shape[:-1]
    d1 = ad.reshape(context @ phi_m1, lead + (S, rank))
    d2 = ad.reshape(context @ phi_m2, lead + (S, rank))
    nd = len(lead)
    scores = d1 @ ad.transpose(d2, tuple(range(nd)) + (nd + 1, nd))
    scores = ad.masked_fill(scores, mask, -np.inf)
    return ad.log_softmax(scores, axis=-2) if log_space else ad.softmax(scores, axis=-2)


def destination_distribution(od: Tensor, origin_probs: Tensor) -> Tensor:
    """``OD @ origin``: a convex combination of the matrix columns."""
    od = ad.as_tensor(od)
    origin_probs = ad.as_tensor(origin_probs)
    lead = origin_probs.shape[:-1]
    S = origin_probs.shape[-1]
    out = od @ ad.reshape(origin_probs, lead + (S, 1))
    return ad.reshape(out, lead + (S,))


def destination_log_probs(log_od: Tensor, origin_log_probs: Tensor) -> Tensor:
    """``log(OD @ origin)`` evaluated as a log-sum-exp over origins."""
    lead = origin_log_probs.shape[:-1]
    S = origin_log_probs.shape[-1]
    terms = log_od + ad.reshape(origin_log_probs, lead + (1, S))
    return ad.logsumexp(terms, axis=-1)


def write_od_matrix(od: np.ndarray, path) -> None:
    """CSV with station ids as header row/column (rows destinations, columns origins)."""
    S = od.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d\\o"] + list(range(S)))
        for d in range(S):
            w.writerow([d] + [f"{od[d, o]:.9f}" for o in range(S)])
