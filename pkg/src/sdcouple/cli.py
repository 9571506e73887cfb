"""Command-line front end: simulate data, run experiments, compute diagnostics.

Exit codes: 0 success, 1 user error (configuration, missing files),
2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import chains as ch
from . import diagnostics as dg
from . import sdmodel as sd
from .config import ConfigError, ExperimentConfig, load_config
from .rng import RandomStream
from .treespace import random_tree, serialize_newick


def _write_csv(path: Path, fieldnames, rows, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config={config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> int:
    sim = cfg.simulation
    if sim is None:
        raise ConfigError(f"{cfg.path}: simulate needs a [simulation] block")
    if sim.lam <= 0:
        raise ConfigError(f"{cfg.path} [simulation]: lambda must be positive, an empty data set is useless")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = RandomStream(cfg.run.master_seed, 101)
    taxa = tuple(f"t{i}" for i in range(1, sim.n_leaves + 1))
    tree = random_tree(taxa, sim.root_age, rng)

    cats = np.zeros(2 * sim.n_leaves, dtype=np.int64)
    placed: list[int] = []
    if sim.n_catastrophes > 0:
        # catastrophes go on branches leading into leaves, chosen by seed
        leaves = list(tree.leaf_labels())
        picks = rng.choice(len(leaves), size=min(sim.n_catastrophes, len(leaves)), replace=False)
        for p in np.atleast_1d(picks):
            cats[leaves[int(p)]] += 1
            placed.append(leaves[int(p)])

    if sim.xi_mode == "one":
        xi = sd.uniform_xi(sim.n_leaves)
    elif sim.xi_mode == "beta":
        xi = sd.simulate_missingness(sim.n_leaves, rng, *sim.xi_beta)
    else:
        try:
            xi = sd.uniform_xi(sim.n_leaves, float(sim.xi_mode))
        except ValueError:
            raise ConfigError(f"{cfg.path} [simulation]: xi must be 'one', 'beta' or a number") from None

    data = sd.simulate(tree, sim.lam, sim.mu, sim.kappa, cats, xi, rng)
    if data.n_traits == 0:
        raise ConfigError("simulation produced no observable traits; increase lambda or the tree age")
    sd.save_pattern_data(data, out / "data.tsv")
    (out / "truth.nwk").write_text(serialize_newick(tree) + "\n")
    provenance = {
        "config": cfg.config_hash,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "taxa": list(taxa),
        "lambda": sim.lam,
        "mu": sim.mu,
        "kappa": sim.kappa,
        "catastrophe_branches": placed,
        "xi": [float(v) for v in xi[1:]],
        "master_seed": cfg.run.master_seed,
        "n_traits": data.n_traits,
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")
    print(f"wrote {data.n_traits} traits over {sim.n_leaves} taxa to {out / 'data.tsv'}")
    return 0


# ---------------------------------------------------------------------
# run
# ---------------------------------------------------------------------


def _setup_from_config(cfg: ExperimentConfig, taxa) -> ch.ChainSetup:
    params = cfg.params.copy()
    params.leaf_age_ranges = cfg.resolve_leaf_ranges(taxa)
    return ch.ChainSetup(
        taxa=tuple(taxa),
        params=params,
        kernel=cfg.kernel,
        constraints=cfg.resolve_constraints(taxa),
        thin=cfg.run.thin,
        k_init=cfg.run.k_init,
        init_root_age=cfg.run.init_root_age,
    )


def _sample_fields(n_leaves: int) -> list[str]:
    return ["iteration", "log_posterior", "root_age", "mu", "kappa", "n_total", "newick"] + [
        f"xi_{i}" for i in range(1, n_leaves + 1)
    ]


def cmd_run(cfg: ExperimentConfig, marginal_only: bool = False) -> int:
    if cfg.data_path is None:
        raise ConfigError(f"{cfg.path}: run needs a [data] path (simulate first)")
    data = sd.load_pattern_data(cfg.data_path)
    taxa = data.taxa
    setup = _setup_from_config(cfg, taxa)
    out = Path(cfg.out_dir)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    fields = _sample_fields(len(taxa))

    if marginal_only:
        for k in range(cfg.run.n_chains):
            rng = RandomStream(cfg.run.master_seed, 999, k)
            state = ch.init_state(data, setup, rng)
            lp = sd.log_posterior(state, data)
            rows = [ch.sample_row(0, state, lp)]

            def hook(it, st, lp_val):
                if it % cfg.run.thin == 0:
                    rows.append(ch.sample_row(it, st, lp_val))

            ch.advance_marginal(state, cfg.kernel, rng, cfg.run.marginal_iterations, data, lp, hook=hook)
            _write_csv(samples_dir / f"marginal_{k}.csv", fields, rows, cfg.config_hash)
        print(f"wrote {cfg.run.n_chains} marginal chains to {samples_dir}")
        return 0

    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    rec_fields = ["pair", "lag", "tau", "censored", "wall_seconds"]
    jobs = [(lag, k) for lag in cfg.run.lags for k in range(cfg.run.n_pairs)]
    pending = [(lag, k) for lag, k in jobs if not (records_dir / f"pair_{lag}_{k}.csv").exists()]

    def finish_pair(record, sx, sy):
        _write_csv(samples_dir / f"pair_{record.lag}_{record.pair_index}_x.csv", fields, sx, cfg.config_hash)
        _write_csv(samples_dir / f"pair_{record.lag}_{record.pair_index}_y.csv", fields, sy, cfg.config_hash)
        _write_csv(
            records_dir / f"pair_{record.lag}_{record.pair_index}.csv",
            rec_fields,
            [_record_row(record)],
            cfg.config_hash,
        )

    if pending:
        by_lag: dict[int, list[int]] = {}
        for lag, k in pending:
            by_lag.setdefault(lag, []).append(k)
        for lag, ks in sorted(by_lag.items()):
            todo = [(data, setup, lag, cfg.run.max_iter, cfg.run.master_seed, k) for k in ks]
            if cfg.run.threads > 1:
                import multiprocessing
                from concurrent.futures import ProcessPoolExecutor

                ctx = multiprocessing.get_context("spawn")
                with ProcessPoolExecutor(max_workers=cfg.run.threads, mp_context=ctx) as pool:
                    for record, sx, sy in pool.map(ch._run_one, todo):
                        finish_pair(record, sx, sy)
            else:
                for job in todo:
                    record, sx, sy = ch._run_one(job)
                    finish_pair(record, sx, sy)

    rows = []
    for lag, k in jobs:
        rows.extend(_read_csv(records_dir / f"pair_{lag}_{k}.csv"))
    rows.sort(key=lambda r: (int(r["lag"]), int(r["pair"])))
    _write_csv(out / "meetings.csv", rec_fields, rows, cfg.config_hash)
    n_censored = sum(1 for r in rows if r["censored"] == "True")
    print(f"wrote {len(rows)} meeting records to {out / 'meetings.csv'} ({n_censored} censored)")
    return 0


def _record_row(record: ch.MeetingRecord) -> dict:
    return {
        "pair": record.pair_index,
        "lag": record.lag,
        "tau": record.tau,
        "censored": record.censored,
        "wall_seconds": f"{record.wall_seconds:.3f}",
    }


# ---------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------


def load_meeting_records(path: Path) -> list[ch.MeetingRecord]:
    rows = _read_csv(path)
    if not rows:
        raise ConfigError(f"{path}: no meeting records")
    return [
        ch.MeetingRecord(
            pair_index=int(r["pair"]),
            lag=int(r["lag"]),
            tau=int(r["tau"]),
            censored=r["censored"] == "True",
            wall_seconds=float(r["wall_seconds"]),
        )
        for r in rows
    ]


def cmd_diagnose(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    meetings = out / "meetings.csv"
    if not meetings.exists():
        raise ConfigError(f"{meetings} does not exist; run the experiment first")
    records = load_meeting_records(meetings)
    thin = cfg.run.thin

    by_lag: dict[int, list[ch.MeetingRecord]] = {}
    for r in records:
        by_lag.setdefault(r.lag, []).append(r)

    curves = {}
    tv_rows, ecdf_rows = [], []
    for lag, recs in sorted(by_lag.items()):
        taus = [r.tau for r in recs]
        curve = dg.tv_curve(taus, lag, censored=[r.censored for r in recs], stride=thin)
        curves[lag] = curve
        tv_rows.extend({"lag": lag, "s": int(s), "bound": f"{b:.6g}"} for s, b in zip(curve.s, curve.bound))
        ecdf_rows.extend(
            {"lag": lag, "s": int(s), "survival": f"{p:.6g}"} for s, p in dg.ecdf_survival(taus, lag)
        )
    _write_csv(out / "tv_curves.csv", ["lag", "s", "bound"], tv_rows, cfg.config_hash)
    _write_csv(out / "ecdf.csv", ["lag", "s", "survival"], ecdf_rows, cfg.config_hash)

    # comparator chains: dedicated marginal runs when present, otherwise the
    # pre-lag stretches of the x chains at the largest lag
    samples_dir = out / "samples"
    asdsf_series = None
    chains_newick = []
    marginals = sorted(samples_dir.glob("marginal_*.csv"))
    if marginals:
        chains_newick = [[row["newick"] for row in _read_csv(p)] for p in marginals]
    elif by_lag:
        top = max(by_lag)
        for rec in by_lag[top]:
            path = samples_dir / f"pair_{top}_{rec.pair_index}_x.csv"
            if not path.exists():
                continue
            pre_lag = [row["newick"] for row in _read_csv(path) if int(row["iteration"]) <= top]
            if len(pre_lag) > 1:
                chains_newick.append(pre_lag)
    if len(chains_newick) >= 2:
        chain_splits = [dg.split_series(c) for c in chains_newick]
        series = dg.asdsf(chain_splits)
        asdsf_series = series
        _write_csv(
            out / "asdsf.csv",
            ["window_end", "asdsf", "n_splits"],
            [{"window_end": w, "asdsf": f"{v:.6g}", "n_splits": n} for w, v, n in series],
            cfg.config_hash,
        )
        # pooled split frequencies over all comparator samples
        pooled: dict[int, int] = {}
        total = 0
        for cs in chain_splits:
            for ss in cs:
                total += 1
                for k in ss:
                    pooled[k] = pooled.get(k, 0) + 1
        _write_csv(
            out / "splits.csv",
            ["split_hex", "frequency"],
            [
                {"split_hex": format(k, "x"), "frequency": f"{pooled[k] / total:.6g}"}
                for k in sorted(pooled)
            ],
            cfg.config_hash,
        )

    report = dg.convergence_report(records, curves, asdsf_series)
    report["config"] = cfg.config_hash
    dg.write_report(report, out / "report.json")
    print(f"wrote diagnostics for {len(records)} pairs at lags {sorted(by_lag)} to {out}")
    return 0


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdcouple", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "draw a synthetic trait matrix and its generating tree"),
        ("run", "run coupled (or marginal) chains and record meeting times"),
        ("diagnose", "turn meeting records and samples into convergence diagnostics"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="experiment configuration file")
        if name == "run":
            p.add_argument("--marginal-only", action="store_true", help="plain chains for comparator baselines")
            p.add_argument("--threads", type=int, default=None, help="cap the pair pool")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if getattr(args, "threads", None):
            cfg.run.threads = args.threads
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "run":
            return cmd_run(cfg, marginal_only=args.marginal_only)
        return cmd_diagnose(cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - internal failure path
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
