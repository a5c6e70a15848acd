"""Command-line entry point: ``uwaloc <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adaptation, harness, nn, ranging, signals, uncertainty, waveguide

log = logging.getLogger("uwaloc")


def parse_ranges(text: str) -> np.ndarray:
    """``start:step:stop`` (inclusive) or a comma-separated list, in metres."""
    if ":" in text:
        a, step, b = (float(t) for t in text.split(":"))
        return signals.training_ranges(a, b, step)
    return np.array([float(t) for t in text.split(",") if t.strip()])


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _environment(args) -> waveguide.Environment:
    env = waveguide.load_environment(args.env) if args.env else waveguide.swellex_environment()
    return harness.make_test_environment(env, args.delta_c, args.delta_d, args.sediment)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    env = _environment(args)
    array = waveguide.swellex_array()
    if args.n_random:
        grid = ranging.RangeGrid()
        ranges = harness.draw_test_ranges(args.n_random, args.seed, grid)
    else:
        ranges = parse_ranges(args.ranges)
    ds = signals.generate_dataset(env, args.source_depth, ranges, array, args.frequency,
                                  snapshot_count=args.snapshots, snr_db=args.snr, seed=args.seed,
                                  exact_power=args.exact_power)
    if args.unlabeled:
        ds.samples = [signals.ScmSample(s.features, s.received_power, float("nan"),
                                        s.snapshot_count, s.sample_id) for s in ds.samples]
    signals.write_dataset(ds, args.out, label_bins=ranging.RangeGrid().class_count)
    print(f"wrote {len(ds)} samples to {args.out}")


def _load_dataset(path):
    return signals.read_dataset(path)[0]


def cmd_train(args):
    ds = _load_dataset(args.dataset)
    cfg = ranging.TrainConfig.from_file(args.config) if args.config else ranging.TrainConfig()
    if args.task == "classifier":
        params = ranging.train_classifier(ds, args.val_fraction, cfg)
    else:
        if not args.config:
            cfg = ranging.TrainConfig(dropout=0.2)
        params = ranging.train_regressor(ds, args.val_fraction, cfg)
    log_path = Path(args.out).with_suffix(".log.csv")
    _write_csv(log_path, ["phase", "epoch", "lr", "train_loss", "val_loss"],
               [[e["phase"], e["epoch"], e["lr"], e["train_loss"], e["val_loss"]]
                for e in params.meta.get("train_log", [])])
    params.meta.pop("train_log", None)
    nn.save_checkpoint(params, args.out)
    print(f"wrote {args.out} and {log_path}")


def cmd_predict(args):
    params = nn.load_checkpoint(args.model)
    ds = _load_dataset(args.dataset)
    grid = ranging.model_grid(params)
    if params.spec.task == "regressor":
        d_hat = ranging.predict_regression(params, ds)
        _write_csv(args.out, ["id", "d_true", "d_hat"],
                   [[s.sample_id, s.true_range_m, d] for s, d in zip(ds.samples, d_hat)])
    else:
        pmf = ranging.predict_pmf(params, ds)
        d_hat = ranging.predict_range(pmf, grid)
        head = ["id", "d_true", "d_hat"] + [f"p{k}" for k in range(grid.class_count)]
        _write_csv(args.out, head, [[s.sample_id, s.true_range_m, d, *p]
                                    for s, d, p in zip(ds.samples, d_hat, pmf)])
    print(f"wrote {len(ds)} predictions to {args.out}")


def cmd_mfp(args):
    replicas = ranging.ReplicaSet.from_dataset(_load_dataset(args.replicas))
    test = _load_dataset(args.test)
    d_hat = ranging.bartlett_mfp(test, replicas)
    _write_csv(args.out, ["id", "d_true", "d_hat"],
               [[s.sample_id, s.true_range_m, d] for s, d in zip(test.samples, d_hat)])
    print(f"wrote {len(test)} estimates to {args.out}")


def cmd_uncertainty(args):
    params = nn.load_checkpoint(args.model)
    ds = _load_dataset(args.dataset)
    grid = ranging.model_grid(params)
    mumi = None
    if params.spec.task == "regressor":
        pmf = ranging.mc_dropout_pmf(params, ds, args.passes, grid, seed=args.seed)
        mumi = nn.entropy(pmf)
    else:
        pmf = ranging.predict_pmf(params, ds)
        if params.spec.dropout > 0:
            mumi = uncertainty.mumi(params, ds, args.passes, grid, seed=args.seed)
    rep = uncertainty.analyze(pmf, args.Q, args.window, mumi_nats=mumi)
    rows = []
    for i, (s, pk) in enumerate(zip(ds.samples, rep.peaks)):
        ranges_txt = " ".join(_fmt(r) for r in pk.peak_ranges(grid))
        rows.append([s.sample_id, pk.pu, pk.n_peaks, ranges_txt, "" if mumi is None else mumi[i]])
    _write_csv(args.out, ["id", "pu", "n_peaks", "peak_ranges", "mumi"], rows)
    summary = {"apu": rep.apu_percent, "mean_mumi": None if mumi is None else rep.mean_mumi,
               "n": len(ds), "certain": int(rep.certain_ids.size)}
    print(json.dumps(summary))


def cmd_adapt(args):
    params = nn.load_checkpoint(args.model)
    ds = _load_dataset(args.dataset)
    cfg = adaptation.AdaptConfig.from_file(args.config) if args.config else adaptation.AdaptConfig()
    if args.iterations is not None:
        cfg.n_iterations = args.iterations
    if args.method == "shot":
        res = adaptation.shot_adapt(params, ds, cfg, seed=args.seed)
    else:
        res = adaptation.jsea(params, ds, cfg, finetune=args.method == "jsea+finetune", seed=args.seed)
    rows = [[s.sample_id, s.true_range_m, d, pu, o, int(f)]
            for s, d, pu, o, f in zip(ds.samples, res.d_hat_m, res.pu, res.origin, res.flagged)]
    _write_csv(args.out, ["id", "d_true", "d_hat", "pu", "origin", "flagged"], rows)
    if res.params is not None and args.out_model:
        res.params.unfreeze("head")
        nn.save_checkpoint(res.params, args.out_model, include_optimizer=False)
    print(f"wrote {len(ds)} estimates to {args.out}; certain {len(res.certain)}/{len(ds)}")


def cmd_sweep(args):
    spec = harness.SweepSpec.from_file(args.spec)
    clf = nn.load_checkpoint(args.train_model) if args.train_model else None
    reg = nn.load_checkpoint(args.regressor_model) if args.regressor_model else None
    res = harness.run_sweep(spec, clf, reg, timing=args.timing)
    harness.write_results(res.rows, args.out)
    if args.per_realization:
        harness.write_results(res.realizations, args.per_realization)
    print(f"wrote {len(res.rows)} rows to {args.out}")


def cmd_complexity(args):
    rows = harness.complexity_report(args.L, args.nphi, args.M, args.ntr, args.ntest, args.nitr,
                                     args.W, args.npeaks, args.ncertain)
    if args.out:
        _write_csv(args.out, ["item", "compute", "memory"], [[r.item, r.compute, r.memory] for r in rows])
    for r in rows:
        print(f"{r.item:16s} {r.compute:>16,d} {r.memory:>14,d}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwaloc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a dataset")
    g.add_argument("--env", help="environment config file (default: built-in shallow-water case)")
    g.add_argument("--ranges", default="850:10:9050", help="start:step:stop or comma list (m)")
    g.add_argument("--n-random", type=int, default=0, help="draw this many uniform test ranges instead")
    g.add_argument("--snr", type=float, default=float("inf"))
    g.add_argument("--snapshots", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--source-depth", type=float, default=9.0)
    g.add_argument("--frequency", type=float, default=109.0)
    g.add_argument("--delta-d", type=float, default=0.0)
    g.add_argument("--delta-c", type=float, default=0.0)
    g.add_argument("--sediment", default="training", choices=sorted(harness.SEDIMENTS))
    g.add_argument("--exact-power", action="store_true")
    g.add_argument("--unlabeled", action="store_true", help="drop the range labels")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a classifier or regressor")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", help="INI file with a [train] section")
    t.add_argument("--task", choices=("classifier", "regressor"), default="classifier")
    t.add_argument("--val-fraction", type=float, default=0.18)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="range PMFs and point estimates")
    pr.add_argument("--model", required=True)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    m = sub.add_parser("mfp", help="Bartlett matched-field estimates")
    m.add_argument("--replicas", required=True, help="labeled noiseless dataset")
    m.add_argument("--test", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mfp)

    u = sub.add_parser("uncertainty", help="PU/APU and MUMI per sample")
    u.add_argument("--model", required=True)
    u.add_argument("--dataset", required=True)
    u.add_argument("--Q", type=float, default=uncertainty.DEFAULT_Q)
    u.add_argument("--window", type=int, default=1)
    u.add_argument("--passes", type=int, default=50, help="MC-dropout passes")
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_uncertainty)

    a = sub.add_parser("adapt", help="test-time adaptation")
    a.add_argument("--model", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--method", choices=("shot", "jsea", "jsea+finetune"), default="jsea")
    a.add_argument("--config", help="INI file with an [adapt] section")
    a.add_argument("--iterations", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--out-model")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("sweep", help="mismatch sweep to CSV")
    s.add_argument("--spec", required=True)
    s.add_argument("--train-model", help="classifier checkpoint")
    s.add_argument("--regressor-model", help="regressor checkpoint (CNN-r, JSEA-r)")
    s.add_argument("--out", required=True)
    s.add_argument("--per-realization", help="also write one row per noise realization here")
    s.add_argument("--timing", action="store_true", help="record wall-clock runtimes (not reproducible)")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("complexity", help="analytic operation and memory counts")
    c.add_argument("--L", type=int, default=21)
    c.add_argument("--nphi", type=int, default=256)
    c.add_argument("--M", type=int, default=82)
    c.add_argument("--ntr", type=int, default=821)
    c.add_argument("--ntest", type=int, default=500)
    c.add_argument("--nitr", type=int, default=100)
    c.add_argument("--W", type=int, default=1)
    c.add_argument("--npeaks", type=int, default=2)
    c.add_argument("--ncertain", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_complexity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, waveguide.NoModesError) as exc:
        print(f"uwaloc: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
