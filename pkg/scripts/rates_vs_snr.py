"""Optimal per-modality rates, error probabilities and delay across an SNR grid.

Solves the allocation for one sample's importances at every SNR and writes a
CSV with one row per (SNR, modality). The fixed-rate baseline at the same
delay is included for comparison.

    python scripts/rates_vs_snr.py --out rates.csv
"""
import argparse
import csv
import sys

import numpy as np

from semrate import channel, pipeline
from semrate.ratesolver import fixed_rate_baseline


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="experiment config JSON (defaults to the built-in reference)")
    ap.add_argument("--snr-db", default="0,2,4,6,8,10,12,14,16,18")
    ap.add_argument("--trial", type=int, default=0, help="which sample's importances to use")
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    cfg = pipeline.load_config(args.config) if args.config else pipeline.ExperimentConfig()
    task = pipeline.build_task(cfg)
    sample = pipeline.draw_sample(task, cfg, args.trial)
    kappa = pipeline.importance(task.model, sample.features, cfg)

    rows = []
    for snr_db in (float(s) for s in args.snr_db.split(",")):
        states = channel.draw_states(cfg.fading, snr_db, cfg.blocklength, cfg.master_seed, args.trial, cfg.M)
        links, sol = pipeline.plan_rates(task.model, sample, states, cfg, kappa)
        r_fixed = fixed_rate_baseline([l.D for l in links], sol.rates)
        for m, (l, r, e) in enumerate(zip(links, sol.rates, sol.eps)):
            rows.append({
                "snr_db": snr_db, "modality": m, "D": l.D, "kappa": l.kappa, "capacity": l.link.capacity,
                "b": l.b, "rate": r, "eps": e, "rate_fixed": r_fixed,
                "eps_fixed": channel.link_error_prob(states[m], r_fixed), "delay": sol.delay,
                "budget_active": sol.constraint_active,
            })

    out = sys.stdout if args.out == "-" else open(args.out, "w", newline="", encoding="utf-8")
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows({k: repr(v) if isinstance(v, (float, np.floating)) else v for k, v in r.items()} for r in rows)
    if out is not sys.stdout:
        out.close()


if __name__ == "__main__":
    main()
