"""Attention synops and accuracy of PSA against SA over a grid of rho.

Usage: python3 scripts/psa_vs_sa.py [--seed 42] [--timesteps 64] [--gain auto]
"""

import argparse

from est.converter import convert
from est.metrics import accuracy, reduction, synops
from est.snn import PsaSchedule, snn_forward

from _toy import toy_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--timesteps", type=int, default=64)
    ap.add_argument("--gain", choices=("auto", "fixed"), default="auto")
    args = ap.parse_args()

    p, _, test, th = toy_model(args.seed)
    T = args.timesteps
    sa = convert(p, th, PsaSchedule(T), "sa")
    sa_logits, sa_rec = snn_forward(sa, test.inputs)
    base = synops(sa_rec, sa).subtotal()
    print("rho,T_qk,gain,attention_synops,attention_reduction,accuracy,accuracy_delta")
    sa_acc = accuracy(sa_logits, test.labels)
    print(f"1.0,{T},1,{base},0.0000,{sa_acc:.4f},0.0000")
    for rho in (0.75, 0.5, 0.25, 0.125):
        sched = PsaSchedule(T, rho, args.gain)
        m = convert(p, th, sched, "psa")
        logits, rec = snn_forward(m, test.inputs)
        ops = synops(rec, m).subtotal()
        acc = accuracy(logits, test.labels)
        print(f"{rho},{sched.T_qk},{sched.gain:.4g},{ops},{reduction(base, ops):.4f},"
              f"{acc:.4f},{acc - sa_acc:+.4f}")


if __name__ == "__main__":
    main()
