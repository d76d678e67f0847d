"""Spike and synaptic-operation accounting, accuracy, and CSV export.

Definitions used in every report:

* mean spike count of a layer = total spikes / (T * samples)
* synops of a layer = spikes * fan-out, one accumulate per spike per outgoing
  connection. Fan-outs: a Q or K spike enters the N score dot products of its
  row/column; a V spike enters N rows of A.V; a score spike gates the d_head
  entries of one value row; context, mlp1 and mlp2 spikes feed the width of
  the next weight matrix (W_mlp1, W_mlp2, then the next block's Q/K/V/MLP
  inputs or the classifier).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from est.errors import ConsistencyError, InputError
from est.snn import POPULATIONS, SnnModel, SpikeRecord

METRICS_COLUMNS = ("run_id", "mode", "T", "rho", "gain", "layer",
                   "mean_spike_count", "synops", "accuracy")
ATTENTION_LAYERS = ("q", "k", "score")
MEAN_SPIKE_DEFINITION = "mean_spike_count = spikes / (T * samples), per layer"
SYNOPS_DEFINITION = "synops = spikes * fan-out, per layer"


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def mean_spike_count(rec: SpikeRecord) -> dict[str, float]:
    if rec.n_samples < 1:
        raise InputError("spike record has no samples")
    denom = rec.T * rec.n_samples
    return {name: float(rec.counts[i].sum()) / denom for i, name in enumerate(rec.layers)}


def fan_out(m: SnnModel) -> dict[str, tuple[int, str]]:
    """Fan-out and a human-readable formula for every recorded layer."""
    p = m.params
    out = {}
    for b in range(p.n_blocks):
        last = b == p.n_blocks - 1
        mlp2 = (p.n_classes, "n_classes") if last else (3 * p.d_head + p.d_ff, "3*d_head+d_ff")
        per = {
            "q": (p.n_tokens, "N"),
            "k": (p.n_tokens, "N"),
            "v": (p.n_tokens, "N"),
            "score": (p.d_head, "d_head"),
            "context": (p.d_ff, "d_ff"),
            "mlp1": (p.d_model, "d_model"),
            "mlp2": mlp2,
        }
        for pop in POPULATIONS:
            n, formula = per[pop]
            out[f"b{b}.{pop}"] = (n, f"spikes*{formula}={n}")
    return out


@dataclass
class OpsReport:
    per_layer: dict[str, int]
    formulas: dict[str, str]

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())

    def subtotal(self, pops=ATTENTION_LAYERS) -> int:
        return sum(v for k, v in self.per_layer.items() if k.split(".", 1)[1] in pops)


def synops(rec: SpikeRecord, m: SnnModel) -> OpsReport:
    fo = fan_out(m)
    if list(rec.layers) != list(fo):
        raise ConsistencyError(f"record layers {rec.layers} do not match model layers {list(fo)}")
    per_layer = {name: int(rec.counts[i].sum()) * fo[name][0] for i, name in enumerate(rec.layers)}
    return OpsReport(per_layer, {k: v[1] for k, v in fo.items()})


def reduction(base: float, other: float) -> float:
    """Fractional saving of ``other`` relative to ``base``; 0 when both are 0."""
    if base == 0:
        return 0.0
    return 1.0 - other / base


def accuracy(logits, labels) -> float:
    """Argmax accuracy. Ties go to the lowest class index."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InputError("accuracy of an empty set")
    if len(labels) != logits.shape[0]:
        raise InputError(f"{logits.shape[0]} predictions for {len(labels)} labels")
    return float((logits.argmax(axis=1) == labels).mean())


def attention_heatmap(rec: SpikeRecord, block: int = 0) -> np.ndarray:
    """Score firing rate per (query, key) pair, averaged over samples."""
    return rec.pair_counts[block] / (rec.T * rec.n_samples)


def heatmap_csv(rates: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_rows, n_cols = rates.shape
    w.writerow(["query\\key", *(f"k{j}" for j in range(n_cols))])
    for i in range(n_rows):
        w.writerow([f"q{i}", *(fmt(r) for r in rates[i])])
    return buf.getvalue()


def metrics_rows(run_id: str, m: SnnModel, rec: SpikeRecord, acc: float | None,
                 per_layer: bool = True) -> list[dict]:
    """Metrics rows for one run: per layer (optional) then an ``all`` summary."""
    msc = mean_spike_count(rec)
    ops = synops(rec, m)
    common = {
        "run_id": run_id,
        "mode": m.effective_mode,
        "T": rec.T,
        "rho": m.schedule.rho,
        "gain": m.schedule.gain,
        "accuracy": "" if acc is None else acc,
    }
    rows = []
    if per_layer:
        for name in rec.layers:
            rows.append({**common, "layer": name, "mean_spike_count": msc[name],
                         "synops": ops.per_layer[name]})
    rows.append({**common, "layer": "all", "mean_spike_count": sum(msc.values()),
                 "synops": ops.total})
    return rows


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in (row[c] for c in METRICS_COLUMNS)])
    return buf.getvalue()
