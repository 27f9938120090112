"""Joint negative log-likelihood, minibatch Adam training and the ablation harness."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .checkpoint import Checkpoint
from .config import ABLATIONS, TrainConfig
from .data import PaddedBatch, UserSequence, pad_batch
from .model import AMTPP, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class LossTerms:
    """Summed negative log-likelihoods of one batch and the step counts behind them."""

    time: Tensor
    origin: Tensor
    dest: Tensor
    n_time: int
    n_marker: int

    @property
    def total(self) -> Tensor:
        return self.time + self.origin + self.dest

    def mean(self) -> Tensor:
        """Total divided by the number of unmasked trips (zero for an all-padding batch)."""
        return self.total * (1.0 / max(self.n_marker, 1))


def joint_nll(batch: PaddedBatch, model: AMTPP) -> LossTerms:
    """``-sum(log p(tau) + log p(o) + log p(d))`` over unmasked steps."""
    steps = model.step_log_likelihoods(batch)
    for name, term, mask in (("time", steps.time, steps.time_mask), ("origin", steps.origin, steps.marker_mask),
                             ("destination", steps.dest, steps.marker_mask)):
        bad = (mask > 0) & ~np.isfinite(term.data)
        if bad.any():
            b, t = (int(i) for i in np.argwhere(bad)[0])
            raise FloatingPointError(f"non-finite {name} log-likelihood for user "
                                     f"{batch.user_ids[b]!r} at step {t}")
    time = -ad.sum_(steps.time * steps.time_mask)
    origin = -ad.sum_(steps.origin * steps.marker_mask)
    dest = -ad.sum_(steps.dest * steps.marker_mask)
    return LossTerms(time, origin, dest, int(steps.time_mask.sum()), int(steps.marker_mask.sum()))


def batches(sequences, size: int):
    for i in range(0, len(sequences), size):
        yield sequences[i:i + size]


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    val_t: float
    val_o: float
    val_d: float


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)
    model: AMTPP | None = None

    @property
    def initial(self) -> EpochRecord:
        return self.history[0]


def dataset_nll(model: AMTPP, sequences, batch_size: int = 64) -> tuple[float, float, float]:
    """Per-step mean NLL of time, origin and destination over ``sequences``."""
    st = so = sd = 0.0
    nt = nm = 0
    for group in batches(sequences, batch_size):
        terms = joint_nll(pad_batch(group, model.config.num_stations, model.config.max_len), model)
        st += terms.time.item()
        so += terms.origin.item()
        sd += terms.dest.item()
        nt += terms.n_time
        nm += terms.n_marker
    return st / max(nt, 1), so / max(nm, 1), sd / max(nm, 1)


def make_checkpoint(model: AMTPP, state: AdamState, rng: np.random.Generator, epoch: int,
                    best: float) -> Checkpoint:
    return Checkpoint(
        config=copy.deepcopy(model.config),
        params={k: v.data.copy() for k, v in model.params.items()},
        adam=AdamState(state.lr, state.beta1, state.beta2, state.eps, state.step,
                       {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()}),
        rng_state=copy.deepcopy(rng.bit_generator.state),
        epoch=epoch,
        best_val_nll=best,
        features=None if model.features is None else model.features.copy(),
        forbidden_pairs=list(model.forbidden_pairs),
        meta={"ablation": model.config.ablation, "seed": model.config.seed},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> AMTPP:
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}
    return AMTPP(ckpt.config, params, ckpt.features, ckpt.forbidden_pairs)


def train(train_data: list[UserSequence], val_data: list[UserSequence], config: TrainConfig,
          features: np.ndarray | None = None, forbidden_pairs=(), resume: Checkpoint | None = None,
          progress=None) -> TrainResult:
    """Minibatch Adam on the per-trip mean joint NLL with early stopping on validation NLL.

    The same seeded generator drives initialisation and shuffling, so a run
    is reproducible for a fixed seed.  ``progress`` is called with each
    :class:`EpochRecord`.
    """
    if not train_data:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(config.seed)
    if resume is not None:
        model = model_from_checkpoint(resume)
        state = resume.adam
        state.lr = config.lr
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        start_epoch = resume.epoch
        best_val = resume.best_val_nll
    else:
        model = AMTPP(config, init_params(config, rng), features, forbidden_pairs)
        state = AdamState(lr=config.lr)
        start_epoch = 0
        best_val = float("inf")
    val_set = val_data or train_data

    def validate(epoch: int, good: Checkpoint | None) -> tuple[float, tuple[float, float, float]]:
        try:
            parts = dataset_nll(model, val_set, config.batch_size)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch} validation: {exc}", good) from exc
        if not np.all(np.isfinite(parts)):
            raise TrainingDiverged(f"epoch {epoch}: validation NLL is not finite", good)
        return sum(parts), parts

    v0, parts0 = validate(start_epoch, resume)
    history = [EpochRecord(start_epoch, float("nan"), v0, *parts0)]
    best = make_checkpoint(model, state, rng, start_epoch, min(best_val, v0))
    best_val = min(best_val, v0)
    last = best
    bad_epochs = 0
    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = rng.permutation(len(train_data))
        shuffled = [train_data[i] for i in order]
        total, count = 0.0, 0
        for group in batches(shuffled, config.batch_size):
            batch = pad_batch(group, config.num_stations, config.max_len)
            try:
                terms = joint_nll(batch, model)
                loss = terms.mean()
                ad.backward(loss)
                ad.adam_step(model.params, state, frozen=model.frozen)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last) from exc
            total += terms.total.item()
            count += terms.n_marker
        val, parts = validate(epoch, last)
        rec = EpochRecord(epoch, total / max(count, 1), val, *parts)
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f (t %.4f o %.4f d %.4f)", epoch, rec.train_nll, val, *parts)
        if progress is not None:
            progress(rec)
        if val < best_val:
            best_val = val
            best = make_checkpoint(model, state, rng, epoch, best_val)
            bad_epochs = 0
        else:
            bad_epochs += 1
        last = make_checkpoint(model, state, rng, epoch, best_val)
        if bad_epochs >= config.patience:
            log.info("early stop after %d epochs without improvement", bad_epochs)
            break
    return TrainResult(best, last, history, model_from_checkpoint(best))


ABLATION_ROWS = (
    ("LogNormMix t", "lognorm_time_head"),
    ("No OD matrix", "no_od_matrix"),
    ("No time embedding", "no_time_embedding"),
    ("Fixed embedding", "fixed_embedding"),
    ("AMTPP", None),
)


@dataclass
class AblationRow:
    name: str
    nll_t: float
    nll_o: float
    nll_d: float
    result: TrainResult


def run_ablation(train_data, val_data, test_data, base_config: TrainConfig,
                 features=None, forbidden_pairs=(), configs=ABLATION_ROWS,
                 progress=None) -> list[AblationRow]:
    """Train every configuration with identical seed and budget; report test NLLs."""
    rows = []
    for name, flag in configs:
        if flag is not None and flag not in ABLATIONS:
            raise ValueError(f"unknown ablation {flag!r}")
        cfg = base_config.with_ablation(flag)
        result = train(train_data, val_data, cfg, features, forbidden_pairs)
        t, o, d = dataset_nll(result.model, test_data, cfg.batch_size)
        rows.append(AblationRow(name, t, o, d, result))
        if progress is not None:
            progress(rows[-1])
    return rows


def format_ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'Configuration':<20}{'NLL t':>10}{'NLL o':>10}{'NLL d':>10}"]
    for r in rows:
        lines.append(f"{r.name:<20}{r.nll_t:>10.3f}{r.nll_o:>10.3f}{r.nll_d:>10.3f}")
    return "\n".join(lines)
