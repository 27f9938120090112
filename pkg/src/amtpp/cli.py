"""Command-line entry point: generate, train, eval, predict, sample and ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import ABLATIONS, ConfigError, RunConfig, load_config
from .data import (SYNTHETIC_EPOCH, SyntheticPopulationSpec, TripDataError, TripRecord, UserSequence,
                   ensure_parent, generate_synthetic, load_csv, load_od_mask, load_station_features,
                   split_users, write_archetypes, write_csv)
from .metrics import UnknownStationError, entropy_report, naive_predictions, predict_sequences, write_metrics_csv
from .model import AMTPP
from .od_head import write_od_matrix
from .training import (ABLATION_ROWS, EpochRecord, TrainingDiverged, format_ablation_table,
                       model_from_checkpoint, run_ablation, train)

log = logging.getLogger("amtpp")

LOG_HEADER = ["epoch", "train_nll", "val_nll", "val_nll_t", "val_nll_o", "val_nll_d"]


class CLIError(Exception):
    """A user-facing failure; the message is printed on one line."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_model(path) -> AMTPP:
    return model_from_checkpoint(Checkpoint.load(path))


def _history(path, model: AMTPP, user: str | None, tz_offset: int) -> UserSequence:
    """The named user's trips from ``path``; an empty sequence for cold start."""
    uid = user or "new"
    if path is None:
        return UserSequence(uid, [], tz_offset=tz_offset)
    seqs = load_csv(path, model.config.num_stations, tz_offset)
    for s in seqs:
        if user is None or s.user_id == user:
            return s
    return UserSequence(uid, [], tz_offset=tz_offset)


def _run_data(cfg: RunConfig):
    S = cfg.train.num_stations
    seqs = load_csv(cfg.train_path, S, cfg.tz_offset)
    if cfg.val_path:
        train_seqs, val_seqs = seqs, load_csv(cfg.val_path, S, cfg.tz_offset)
    else:
        train_seqs, val_seqs = split_users(seqs, cfg.train_fraction, cfg.train.seed)
    features = load_station_features(cfg.feature_path, S) if cfg.feature_path else None
    if features is not None and cfg.train.n_features != features.shape[0]:
        raise CLIError(f"n_features = {cfg.train.n_features} but {cfg.feature_path} has {features.shape[0]}")
    forbidden = load_od_mask(cfg.mask_path, S) if cfg.mask_path else []
    return train_seqs, val_seqs, features, forbidden


def _fmt_probs(probs: np.ndarray, top: int = 5) -> str:
    order = np.argsort(-probs, kind="stable")[:top]
    return "  ".join(f"{int(i)}:{probs[i]:.4f}" for i in order)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = SyntheticPopulationSpec(n_users=args.users, num_stations=args.stations, days=args.days,
                                   proportions=tuple(args.proportions), spread=args.spread, seed=args.seed)
    seqs, labels = generate_synthetic(spec)
    out = ensure_parent(args.out)
    write_csv(seqs, out)
    side = Path(args.archetypes) if args.archetypes else out.with_name(out.stem + "_archetypes.csv")
    write_archetypes(labels, ensure_parent(side))
    print(f"wrote {sum(len(s) for s in seqs)} trips for {len(seqs)} users to {out} (seed {args.seed})")
    print(f"wrote archetypes to {side}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.ablation:
        cfg.train = cfg.train.with_ablation(args.ablation)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out_dir = Path(args.out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_seqs, val_seqs, features, forbidden = _run_data(cfg)
    resume = Checkpoint.load(args.resume) if args.resume else None
    log_path = out_dir / "train_log.csv"
    append = resume is not None and log_path.exists()
    with open(log_path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(LOG_HEADER)

        def progress(rec: EpochRecord) -> None:
            writer.writerow([rec.epoch, f"{rec.train_nll:.6f}", f"{rec.val_nll:.6f}",
                             f"{rec.val_t:.6f}", f"{rec.val_o:.6f}", f"{rec.val_d:.6f}"])
            fh.flush()
            if not args.quiet:
                print(f"epoch {rec.epoch:3d}  train {rec.train_nll:.4f}  val {rec.val_nll:.4f} "
                      f"(t {rec.val_t:.4f} o {rec.val_o:.4f} d {rec.val_d:.4f})", flush=True)

        try:
            result = train(train_seqs, val_seqs, cfg.train, features, forbidden, resume, progress)
        except TrainingDiverged as exc:
            if exc.checkpoint is not None:
                exc.checkpoint.save(out_dir / "last_good.ckpt")
            raise CLIError(f"training diverged: {exc}") from None
    result.best.save(out_dir / "model.ckpt")
    result.last.save(out_dir / "last.ckpt")
    (out_dir / "config.txt").write_text("\n".join(cfg.to_lines()) + "\n", encoding="utf-8")
    print(f"best validation NLL {result.best.best_val_nll:.4f} at epoch {result.best.epoch} "
          f"(ablation {cfg.train.ablation}, seed {cfg.train.seed}); checkpoint {out_dir / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    ckpt_path = args.checkpoint or (str(Path(cfg.output_dir) / "model.ckpt") if args.config else None)
    data_path = args.data or cfg.test_path or (cfg.train_path if args.config else None)
    if data_path is None:
        raise CLIError("eval needs --data or a config with test_path")
    tz = args.tz_offset if args.tz_offset is not None else cfg.tz_offset
    score_from = args.score_from if args.score_from is not None else (cfg.score_from or None)
    rows = []
    if args.baseline_only:
        S = args.stations or cfg.train.num_stations
        seqs = load_csv(data_path, S, tz)
        seed = None
    else:
        if ckpt_path is None:
            raise CLIError("eval needs --checkpoint (or --baseline-only)")
        model = _load_model(ckpt_path)
        S = model.config.num_stations
        seed = model.config.seed
        seqs = load_csv(data_path, S, tz)
        preds = predict_sequences(model, seqs, model.config.batch_size, score_from)
        scored = [s for s in seqs if any(p.user_id == s.user_id for p in preds)]
        report = entropy_report(scored, preds, average=model.config.f1_average)
        print(report.summary(f"AMTPP ({model.config.ablation})"))
        rows += report.rows("all")
    reference = load_csv(args.reference, S, tz) if args.reference else None
    naive = naive_predictions(seqs, reference, score_from)
    scored = [s for s in seqs if any(p.user_id == s.user_id for p in naive)]
    naive_report = entropy_report(scored, naive, average=args.average or "weighted")
    print(naive_report.summary("Naive (reverse previous trip)"))
    rows += [(t, m, v, f"naive:{g}") for t, m, v, g in naive_report.rows("all") if m != "nll"]
    if seed is not None:
        rows.append(("all", "seed", float(seed), "meta"))
    if args.out:
        write_metrics_csv(rows, ensure_parent(args.out))
        print(f"wrote metrics to {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    hist = _history(args.history, model, args.user, args.tz_offset)
    scale = args.scale_beta if args.what_if else 1.0
    heads = model.next_trip([hist], beta_scale=scale)
    mixture = heads.mixture.at(0)
    o_probs = heads.origin_probs.data[0]
    d_probs = heads.dest_probs[0]
    quantiles = {q: mixture.quantile(q) for q in (0.1, 0.5, 0.9)}
    if args.json:
        print(json.dumps({"user": hist.user_id, "history_trips": len(hist), "beta_scale": scale,
                          "origin": o_probs.tolist(), "destination": d_probs.tolist(),
                          "mixture": {"kind": heads.mixture.kind, **mixture.as_dict()},
                          "tau_quantiles": {str(q): v for q, v in quantiles.items()}}))
    else:
        print(f"user {hist.user_id}: {len(hist)} trips of history"
              + ("" if len(hist) else " (cold start from the learned start state)"))
        if args.what_if:
            print(f"what-if: peak locations scaled by {scale}")
        print(f"origin       {_fmt_probs(o_probs)}")
        print(f"destination  {_fmt_probs(d_probs)}")
        print("tau quantiles (hours)  " + "  ".join(f"q{int(q * 100)}={v:.3f}" for q, v in quantiles.items()))
        print(f"{heads.mixture.kind} mixture parameters:")
        names = list(mixture.as_dict())
        print("  k  " + "  ".join(f"{n:>10}" for n in names))
        cols = [np.asarray(v) for v in mixture.as_dict().values()]
        for k in range(mixture.K):
            print(f"{k:3d}  " + "  ".join(f"{c[k]:10.4f}" for c in cols))
    if args.od_out:
        if heads.od is None:
            raise CLIError("this checkpoint has no OD matrix (no_od_matrix ablation)")
        write_od_matrix(heads.od[0], ensure_parent(args.od_out))
        print(f"wrote OD matrix to {args.od_out}", file=sys.stderr if args.json else sys.stdout)
    return 0


# heavy right tails of a poorly fit mixture can produce absurd gaps; clip before
# converting to integer seconds
MAX_SAMPLED_GAP_HOURS = 24.0 * 366


def sample_trips(model: AMTPP, history: UserSequence, n: int, rng: np.random.Generator,
                 start: int = SYNTHETIC_EPOCH) -> list[TripRecord]:
    """Draw ``n`` trips one at a time, each conditioned on the history plus earlier draws.

    Gaps are clipped to ``MAX_SAMPLED_GAP_HOURS``.
    """
    trips = list(history.trips)
    S = model.config.num_stations
    out = []
    for _ in range(n):
        seq = UserSequence(history.user_id, trips, tz_offset=history.tz_offset)
        heads = model.next_trip([seq])
        if trips:
            tau = min(float(heads.mixture.at(0).sample(rng)), MAX_SAMPLED_GAP_HOURS)
            t = trips[-1].t + max(int(round(tau * 3600)), 1)
        else:
            t = start
        o_probs = heads.origin_probs.data[0]
        o = int(rng.choice(S, p=o_probs / o_probs.sum()))
        if heads.od is not None:
            d_probs = heads.od[0][:, o].copy()
        else:
            d_probs = heads.dest_probs[0].copy()
        d_probs[o] = 0.0
        d_probs[model.mask[:, o]] = 0.0
        d = int(rng.choice(S, p=d_probs / d_probs.sum()))
        rec = TripRecord(history.user_id, t, o, d)
        trips.append(rec)
        out.append(rec)
    return out


def cmd_sample(args) -> int:
    model = _load_model(args.checkpoint)
    hist = _history(args.history, model, args.user, args.tz_offset)
    rng = np.random.default_rng(args.seed)
    start = args.start if args.start is not None else SYNTHETIC_EPOCH
    trips = sample_trips(model, hist, args.n, rng, start)
    seq = UserSequence(hist.user_id, trips)
    if args.out:
        write_csv([seq], ensure_parent(args.out))
        print(f"wrote {len(trips)} sampled trips to {args.out} (seed {args.seed})")
    else:
        sys.stdout.write("user_id,t,o,d\n")
        for tr in trips:
            sys.stdout.write(f"{tr.user_id},{tr.t},{tr.o},{tr.d}\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    train_seqs, val_seqs, features, forbidden = _run_data(cfg)
    test_path = args.test or cfg.test_path
    test_seqs = load_csv(test_path, cfg.train.num_stations, cfg.tz_offset) if test_path else val_seqs
    configs = ABLATION_ROWS
    if args.only:
        wanted = set(args.only)
        configs = tuple(r for r in ABLATION_ROWS if (r[1] or "full") in wanted)

    def progress(row) -> None:
        print(f"{row.name}: NLL t={row.nll_t:.4f} o={row.nll_o:.4f} d={row.nll_d:.4f}", flush=True)

    rows = run_ablation(train_seqs, val_seqs, test_seqs, cfg.train, features, forbidden, configs, progress)
    table = format_ablation_table(rows)
    print(table)
    out_dir = Path(args.out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["configuration", "nll_t", "nll_o", "nll_d", "seed"])
        for r in rows:
            w.writerow([r.name, f"{r.nll_t:.6f}", f"{r.nll_o:.6f}", f"{r.nll_d:.6f}", cfg.train.seed])
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amtpp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic trip CSV and its archetype sidecar")
    g.add_argument("--users", type=int, default=200)
    g.add_argument("--stations", type=int, default=10)
    g.add_argument("--days", type=int, default=30)
    g.add_argument("--proportions", type=float, nargs=3, default=(0.6, 0.2, 0.2),
                   metavar=("ROUND_TRIP", "MORNING_ONLY", "RANDOM"))
    g.add_argument("--spread", type=float, default=0.25, help="Laplace scale of commuter times (hours)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--archetypes", help="sidecar path (default: <out>_archetypes.csv)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--ablation", choices=("full",) + ABLATIONS)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="override the configured epoch budget")
    t.add_argument("--out-dir")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics CSV for a checkpoint next to the naive baseline")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="trip CSV to evaluate")
    e.add_argument("--config", help="take checkpoint and test data from a run config")
    e.add_argument("--reference", help="trip CSV giving the naive cold-start fallback")
    e.add_argument("--baseline-only", action="store_true")
    e.add_argument("--stations", type=int, help="S for --baseline-only without a config")
    e.add_argument("--average", choices=("weighted", "macro"))
    e.add_argument("--score-from", type=int, help="epoch seconds; earlier trips are history only")
    e.add_argument("--tz-offset", type=int)
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="next-trip report for one user")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--history", help="trip CSV holding the user's history (omit for cold start)")
    pr.add_argument("--user")
    pr.add_argument("--tz-offset", type=int, default=0)
    pr.add_argument("--what-if", action="store_true", help="rescale the peak locations before the OD head")
    pr.add_argument("--scale-beta", type=float, default=0.5)
    pr.add_argument("--od-out", help="write the OD matrix to this CSV")
    pr.add_argument("--json", action="store_true")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("sample", help="autoregressively sample future trips")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--history")
    s.add_argument("--user")
    s.add_argument("--tz-offset", type=int, default=0)
    s.add_argument("-n", "--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=int, help="epoch seconds of the first trip on cold start")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("ablate", help="train and compare the five configurations")
    a.add_argument("--config", required=True)
    a.add_argument("--test", help="trip CSV for the reported NLLs (default: validation users)")
    a.add_argument("--epochs", type=int)
    a.add_argument("--only", nargs="+", choices=("full",) + ABLATIONS)
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, TripDataError, CheckpointError, UnknownStationError,
            OSError, ValueError, FloatingPointError) as exc:
        reason = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
