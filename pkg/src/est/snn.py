"""Spiking forward pass: spiking Q/K/V, spike-train attention score, the
partial-information schedule, and a rate-decoded readout.

Per step ``t`` and block, with thresholds taken from the converted ANN:

    q_t, k_t, v_t = IF(in_t W_q), IF(in_t W_k), IF(in_t W_v)
    a_t           = IF(gain * q_t k_t^T / d_head)
    c_t           = IF((a_t v_t) W_o)
    h1_t          = in_t + th_context * c_t
    m1_t, m2_t    = IF(h1_t W_mlp1), IF(m1_t W_mlp2)
    out_t         = h1_t + th_mlp2 * m2_t

In PSA mode the Q and K populations are only stepped for ``t <= T_qk``; after
that the score population keeps integrating with zero input so residual
charge can still fire. V always runs for all ``T`` steps.

IF populations fed by binary spikes see currents in "spike units", so their
firing threshold is the calibrated activation threshold divided by the
thresholds of the upstream populations (the IF dynamics are scale invariant,
so this is the same as scaling the spikes by their thresholds).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from est.ann import AnnParams, dumps, params_from_dict, params_to_dict
from est.errors import ConfigError, DimensionError, SequencingError
from est.neuron import IfState, if_init, if_step, rate_decode
from est.tensor import matmul, t as tr

POPULATIONS = ("q", "k", "v", "score", "context", "mlp1", "mlp2")
MODES = ("sa", "psa")
GAIN_MODES = ("auto", "fixed")


@dataclass(frozen=True)
class PsaSchedule:
    """Time budget ``T``, partial fraction ``rho`` and score compensation.

    ``gain_mode="auto"`` multiplies the score input by ``T / T_qk`` during the
    active window; ``"fixed"`` leaves it at 1. ``rho == 1`` always means gain 1.
    """

    T: int
    rho: float = 1.0
    gain_mode: str = "auto"

    def __post_init__(self):
        if int(self.T) < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 0 < self.rho <= 1:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if self.gain_mode not in GAIN_MODES:
            raise ConfigError(f"gain mode must be one of {GAIN_MODES}, got {self.gain_mode!r}")

    @property
    def T_qk(self) -> int:
        # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
        return min(self.T, max(1, math.ceil(self.rho * self.T - 1e-9)))

    @property
    def gain(self) -> float:
        if self.rho == 1 or self.gain_mode == "fixed":
            return 1.0
        return self.T / self.T_qk

    def with_T(self, T: int) -> "PsaSchedule":
        return replace(self, T=T)

    def to_dict(self) -> dict:
        return {"T": self.T, "rho": self.rho, "gain": self.gain_mode}


@dataclass
class ThresholdSet:
    """Calibrated activation threshold per population, one value per block."""

    values: dict[str, list[float]]

    def __post_init__(self):
        missing = [p for p in POPULATIONS if p not in self.values]
        if missing:
            raise ConfigError(f"threshold set is missing populations: {', '.join(missing)}")
        lengths = {len(self.values[p]) for p in POPULATIONS}
        if len(lengths) != 1:
            raise ConfigError("threshold lists must have one entry per block for every population")
        for p in POPULATIONS:
            for v in self.values[p]:
                if not (np.isfinite(v) and v > 0):
                    raise ConfigError(f"threshold for {p!r} must be > 0, got {v}")
        self.values = {p: [float(v) for v in self.values[p]] for p in POPULATIONS}

    @property
    def n_blocks(self) -> int:
        return len(self.values["q"])

    def get(self, pop: str, block: int = 0) -> float:
        return self.values[pop][block]

    def to_dict(self) -> dict:
        return {p: list(self.values[p]) for p in POPULATIONS}


@dataclass
class SnnModel:
    params: AnnParams
    thresholds: ThresholdSet | None
    schedule: PsaSchedule
    mode: str = "sa"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "sa" and self.schedule.rho != 1:
            self.schedule = replace(self.schedule, rho=1.0)
        if self.thresholds is not None and self.thresholds.n_blocks != self.params.n_blocks:
            raise ConfigError(
                f"{self.thresholds.n_blocks} threshold blocks for {self.params.n_blocks} model blocks"
            )

    @property
    def effective_mode(self) -> str:
        """PSA with ``rho == 1`` is SA."""
        return "sa" if self.schedule.rho == 1 else self.mode

    def require_calibrated(self) -> ThresholdSet:
        if self.thresholds is None:
            raise ConfigError("model has no calibrated thresholds")
        return self.thresholds

    def firing_threshold(self, pop: str, block: int = 0) -> float:
        """Threshold in the units of the population's input current."""
        th = self.require_calibrated()
        v = th.get(pop, block)
        if pop == "score":
            return v / (th.get("q", block) * th.get("k", block))
        if pop == "context":
            return v / (th.get("score", block) * th.get("v", block))
        if pop == "mlp2":
            return v / th.get("mlp1", block)
        return v

    def layer_names(self) -> list[str]:
        return [f"b{b}.{p}" for b in range(self.params.n_blocks) for p in POPULATIONS]

    def to_dict(self) -> dict:
        doc = params_to_dict(self.params)
        doc["thresholds"] = None if self.thresholds is None else self.thresholds.to_dict()
        doc["schedule"] = self.schedule.to_dict()
        doc["mode"] = self.mode
        return doc


def model_from_dict(doc: dict) -> SnnModel:
    try:
        sched = doc["schedule"]
        schedule = PsaSchedule(int(sched["T"]), float(sched["rho"]), str(sched["gain"]))
        th = doc.get("thresholds")
        return SnnModel(
            params=params_from_dict(doc),
            thresholds=None if th is None else ThresholdSet(th),
            schedule=schedule,
            mode=doc["mode"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed model document: {exc!r}") from exc


def save_model(m: SnnModel, path) -> None:
    Path(path).write_text(dumps(m.to_dict()))


def load_model(path) -> SnnModel:
    return model_from_dict(json.loads(Path(path).read_text()))


# -- spike record ----------------------------------------------------------

@dataclass
class SpikeRecord:
    """Per-layer, per-step spike counts summed over samples.

    ``pair_counts[b]`` holds the per-(query, key) score spike totals of block
    ``b``; ``emitted`` is the IF populations' own running total, kept as an
    independent cross-check of ``counts``.
    """

    layers: list[str]
    counts: np.ndarray  # (L, T) int64
    n_samples: int
    pair_counts: list[np.ndarray] = field(default_factory=list)
    layer_sizes: list[int] = field(default_factory=list)
    emitted: int = 0

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    def layer(self, name: str) -> np.ndarray:
        return self.counts[self.layers.index(name)]

    def merge(self, other: "SpikeRecord") -> "SpikeRecord":
        if self.layers != other.layers or self.counts.shape != other.counts.shape:
            raise DimensionError("cannot merge spike records of different layouts")
        return SpikeRecord(
            list(self.layers),
            self.counts + other.counts,
            self.n_samples + other.n_samples,
            [a + b for a, b in zip(self.pair_counts, other.pair_counts)],
            list(self.layer_sizes),
            self.emitted + other.emitted,
        )


# -- per-step operations ---------------------------------------------------

def init_states(m: SnnModel, n_samples: int) -> list[dict[str, IfState]]:
    """Fresh membranes for every population of every block."""
    p = m.params
    n, dm, dh, dff = p.n_tokens, p.d_model, p.d_head, p.d_ff
    shapes = {
        "q": (n, dh), "k": (n, dh), "v": (n, dh), "score": (n, n),
        "context": (n, dm), "mlp1": (n, dff), "mlp2": (n, dm),
    }
    return [
        {pop: if_init((n_samples, *shapes[pop]), m.firing_threshold(pop, b)) for pop in POPULATIONS}
        for b in range(p.n_blocks)
    ]


def _check_t(m: SnnModel, t: int) -> None:
    if not 1 <= t <= m.schedule.T:
        raise SequencingError(f"step {t} outside 1..{m.schedule.T}")


def qk_active(m: SnnModel, t: int) -> bool:
    return m.effective_mode == "sa" or t <= m.schedule.T_qk


def qkv_step(x_t: np.ndarray, m: SnnModel, states: dict[str, IfState], t: int, block: int = 0):
    """Advance the Q, K, V populations of one block by step ``t`` (1-based).

    Returns ``(q_t, k_t, v_t, states)``. Outside the PSA window Q and K are not
    stepped at all and report no spikes.
    """
    _check_t(m, t)
    blk = m.params.blocks[block]
    states = dict(states)
    if qk_active(m, t):
        q_t, states["q"] = if_step(states["q"], matmul(x_t, blk.W_q))
        k_t, states["k"] = if_step(states["k"], matmul(x_t, blk.W_k))
    else:
        q_t = np.zeros(states["q"].shape, dtype=np.uint8)
        k_t = np.zeros(states["k"].shape, dtype=np.uint8)
    v_t, states["v"] = if_step(states["v"], matmul(x_t, blk.W_v))
    return q_t, k_t, v_t, states


def score_current(q_t, k_t, d_head: int, gain: float = 1.0) -> np.ndarray:
    return gain * matmul(q_t, tr(k_t)) / d_head


def score_step(q_t, k_t, m: SnnModel, state: IfState, t: int, block: int = 0):
    """Attention-score IF population; zero input once the PSA window closes."""
    _check_t(m, t)
    if qk_active(m, t):
        cur = score_current(q_t, k_t, m.params.d_head, m.schedule.gain)
    else:
        cur = np.zeros(state.shape)
    return if_step(state, cur)


def context_current(a_t, v_t, W_o) -> np.ndarray:
    return matmul(matmul(a_t, v_t), W_o)


def context_step(a_t, v_t, m: SnnModel, state: IfState, t: int, block: int = 0):
    _check_t(m, t)
    return if_step(state, context_current(a_t, v_t, m.params.blocks[block].W_o))


def mlp_step(h1_t, m: SnnModel, states: dict[str, IfState], t: int, block: int = 0):
    _check_t(m, t)
    blk = m.params.blocks[block]
    states = dict(states)
    m1_t, states["mlp1"] = if_step(states["mlp1"], matmul(h1_t, blk.W_mlp1))
    m2_t, states["mlp2"] = if_step(states["mlp2"], matmul(m1_t, blk.W_mlp2))
    return m1_t, m2_t, states


# -- full inference --------------------------------------------------------

def snn_forward(m: SnnModel, x: np.ndarray, T: int | None = None):
    """Run ``T`` steps on one sample ``(N, d_model)`` or a batch ``(S, N, d_model)``.

    Returns ``(logits, record)``. The classifier is not spiking: the residual
    stream is rate-decoded once and passed through ``W_cls``.
    """
    th = m.require_calibrated()
    if T is not None:
        m = replace(m, schedule=m.schedule.with_T(T))
    T = m.schedule.T
    p = m.params
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or x.shape[-2:] != (p.n_tokens, p.d_model):
        raise DimensionError(
            f"snn_forward: input shape {x.shape} does not match ({p.n_tokens}, {p.d_model})"
        )
    xb = x if batched else x[None]
    S = xb.shape[0]

    states = init_states(m, S)
    layers = m.layer_names()
    counts = np.zeros((len(layers), T), dtype=np.int64)
    pair_counts = [np.zeros((p.n_tokens, p.n_tokens), dtype=np.int64) for _ in range(p.n_blocks)]
    ctx_counts = [np.zeros((S, p.n_tokens, p.d_model), dtype=np.int64) for _ in range(p.n_blocks)]
    m2_counts = [np.zeros((S, p.n_tokens, p.d_model), dtype=np.int64) for _ in range(p.n_blocks)]
    npop = len(POPULATIONS)

    for t in range(1, T + 1):
        h = xb
        for b in range(p.n_blocks):
            st = states[b]
            q_t, k_t, v_t, st = qkv_step(h, m, st, t, b)
            a_t, st["score"] = score_step(q_t, k_t, m, st["score"], t, b)
            c_t, st["context"] = context_step(a_t, v_t, m, st["context"], t, b)
            h1 = h + th.get("context", b) * c_t
            m1_t, m2_t, st = mlp_step(h1, m, st, t, b)
            h = h1 + th.get("mlp2", b) * m2_t
            states[b] = st

            for i, spk in enumerate((q_t, k_t, v_t, a_t, c_t, m1_t, m2_t)):
                counts[b * npop + i, t - 1] = int(spk.sum())
            pair_counts[b] += a_t.sum(axis=0, dtype=np.int64)
            ctx_counts[b] += c_t
            m2_counts[b] += m2_t

    # residual stream, rate decoded: x + sum over blocks of context and mlp2 rates
    h_bar = xb.copy()
    for b in range(p.n_blocks):
        h_bar = h_bar + rate_decode(ctx_counts[b], T, th.get("context", b))
        h_bar = h_bar + rate_decode(m2_counts[b], T, th.get("mlp2", b))
    pooled = h_bar.mean(axis=1)
    logits = matmul(pooled[:, None, :], p.W_cls)[:, 0, :]

    sizes = {"q": p.d_head, "k": p.d_head, "v": p.d_head, "score": p.n_tokens,
             "context": p.d_model, "mlp1": p.d_ff, "mlp2": p.d_model}
    record = SpikeRecord(
        layers,
        counts,
        S,
        pair_counts,
        [p.n_tokens * sizes[pop] for _ in range(p.n_blocks) for pop in POPULATIONS],
        sum(s.n_spikes for st in states for s in st.values()),
    )
    return (logits if batched else logits[0]), record


def _forward_chunk(args):
    m, x, T = args
    return snn_forward(m, x, T)


def infer(m: SnnModel, inputs: np.ndarray, T: int | None = None, workers: int = 1):
    """Batched inference split over ``workers`` processes.

    Samples never interact, and ``matmul`` sums in a fixed order, so the
    outputs do not depend on the number of workers.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(inputs) < 2:
        return snn_forward(m, inputs, T)
    chunks = [c for c in np.array_split(inputs, min(workers, len(inputs))) if len(c)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_forward_chunk, [(m, c, T) for c in chunks]))
    logits = np.concatenate([r[0] for r in results])
    record = results[0][1]
    for _, rec in results[1:]:
        record = record.merge(rec)
    return logits, record
