"""Logit error and accuracy of the converted SNN versus timestep budget.

Usage: python3 scripts/t_sweep.py [--seed 42] [--rho 1.0]
"""

import argparse

import numpy as np

from est.ann import predict
from est.converter import convert
from est.metrics import accuracy
from est.snn import PsaSchedule, snn_forward

from _toy import toy_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--rho", type=float, default=1.0)
    args = ap.parse_args()

    p, _, test, th = toy_model(args.seed)
    ann = predict(p, test.inputs)
    mode = "sa" if args.rho == 1 else "psa"
    print("T,mode,rho,mean_abs_logit_error,argmax_agreement,accuracy")
    print(f"inf,ann,,0,1,{accuracy(ann, test.labels):.4f}")
    for T in (2, 4, 8, 16, 32, 64, 128, 256):
        m = convert(p, th, PsaSchedule(T, args.rho), mode)
        logits, _ = snn_forward(m, test.inputs)
        err = np.abs(logits - ann).mean()
        agree = (logits.argmax(1) == ann.argmax(1)).mean()
        print(f"{T},{mode},{args.rho},{err:.4f},{agree:.4f},{accuracy(logits, test.labels):.4f}")


if __name__ == "__main__":
    main()
