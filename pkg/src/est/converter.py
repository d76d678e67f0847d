"""ReLU -> IF conversion by post-hoc threshold calibration.

Each spiking population gets one threshold: a percentile of the ANN's
post-ReLU activations of that population over a calibration set. Weights are
carried over untouched; the thresholds carry the scale.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from est.ann import AnnParams, ann_forward
from est.errors import ConfigError, InputError
from est.snn import POPULATIONS, PsaSchedule, SnnModel, ThresholdSet

log = logging.getLogger(__name__)

DEFAULT_PERCENTILE = 99.9
METHOD = "percentile threshold calibration of post-ReLU ANN activations (post hoc stand-in)"

# population name -> attribute of BlockCache holding its post-ReLU activation
_CACHE_FIELD = {
    "q": "q", "k": "k", "v": "v", "score": "a",
    "context": "ctx", "mlp1": "m1", "mlp2": "m2",
}


@dataclass
class PopulationStats:
    block: int
    population: str
    max_activation: float
    percentile_value: float
    threshold: float
    n_samples: int
    dead: bool


@dataclass
class CalibrationReport:
    percentile: float
    n_samples: int
    populations: list[PopulationStats]
    method: str = METHOD

    @property
    def warnings(self) -> list[str]:
        return [f"b{s.block}.{s.population}: all activations zero, threshold set to 1"
                for s in self.populations if s.dead]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["warnings"] = self.warnings
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def activations(ann: AnnParams, inputs: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Post-ReLU activations of every population, per block, flattened."""
    _, cache = ann_forward(ann, inputs)
    return [{pop: getattr(c, _CACHE_FIELD[pop]).ravel() for pop in POPULATIONS}
            for c in cache.blocks]


def calibrate_thresholds(ann: AnnParams, calib, percentile: float = DEFAULT_PERCENTILE):
    """Returns ``(ThresholdSet, CalibrationReport)``."""
    if not 0 < percentile <= 100:
        raise ConfigError(f"percentile must be in (0, 100], got {percentile}")
    inputs = np.asarray(getattr(calib, "inputs", calib), dtype=np.float64)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.shape[0] < 1:
        raise InputError("calibration set is empty")

    acts = activations(ann, inputs)
    values: dict[str, list[float]] = {pop: [] for pop in POPULATIONS}
    stats = []
    for b, block_acts in enumerate(acts):
        for pop in POPULATIONS:
            a = np.sort(block_acts[pop])
            pv = float(np.percentile(a, percentile))
            dead = not pv > 0
            v = 1.0 if dead else pv
            if dead:
                log.warning("b%d.%s: dead population, threshold set to 1", b, pop)
            values[pop].append(v)
            stats.append(PopulationStats(b, pop, float(a[-1]), pv, v, int(inputs.shape[0]), dead))
    return ThresholdSet(values), CalibrationReport(percentile, int(inputs.shape[0]), stats)


def thresholds_from_report(doc: dict) -> ThresholdSet:
    values: dict[str, list[float]] = {}
    try:
        for s in sorted(doc["populations"], key=lambda s: s["block"]):
            values.setdefault(s["population"], []).append(float(s["threshold"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed calibration report: {exc!r}") from exc
    return ThresholdSet(values)


def convert(ann: AnnParams, th: ThresholdSet | None, schedule: PsaSchedule,
            mode: str = "sa") -> SnnModel:
    """Bind ANN weights (shared, not copied) and thresholds into an ``SnnModel``."""
    if th is None:
        raise ConfigError("conversion needs a complete threshold set")
    if not isinstance(th, ThresholdSet):
        th = ThresholdSet(dict(th))
    return SnnModel(params=ann, thresholds=th, schedule=schedule, mode=mode)
