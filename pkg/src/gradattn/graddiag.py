"""Per-layer gradient norms and the Gradient Health Score.

A "layer" is one named parameterized module (a conv, a norm, a linear, an
attention projection, the PE table). Its norm is the L2 norm of all its
parameter gradients concatenated. Healthy means the norm lies in the closed
interval [1e-6, 10]; below is vanishing, above (or non-finite) is exploding.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError
from .models import ModelGraph, layer_of

VANISH_BELOW = 1e-6
EXPLODE_ABOVE = 10.0
CSV_COLUMNS = ("step", "layer", "grad_l2_norm")


@dataclass(frozen=True)
class LayerGradRecord:
    layer: str
    grad_l2_norm: float
    step: int = 0

    @property
    def finite(self) -> bool:
        return math.isfinite(self.grad_l2_norm)


@dataclass
class GradReport:
    records: list
    ghs: float
    n_healthy: int
    n_total: int
    vanishing_layers: list = field(default_factory=list)
    exploding_layers: list = field(default_factory=list)
    nonfinite_layers: list = field(default_factory=list)
    avg_norm: float = 0.0
    min_norm: float = 0.0
    max_norm: float = 0.0
    std_norm: float = 0.0

    def summary(self) -> dict:
        """Table-style row: GHS, flagged layers, avg norm, range, std."""
        flagged = []
        if self.vanishing_layers:
            flagged.append(f"Vanishing ({len(self.vanishing_layers)} layers)")
        if self.exploding_layers:
            flagged.append(f"Exploding ({len(self.exploding_layers)} layers)")
        return {
            "ghs": round(self.ghs, 3),
            "flagged": ", ".join(flagged) or "None",
            "avg_norm": self.avg_norm,
            "range": [self.min_norm, self.max_norm],
            "std": self.std_norm,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["records"] = [asdict(r) for r in self.records]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def collect_layer_grad_norms(model: ModelGraph, step: int = 0) -> list[LayerGradRecord]:
    """One record per parameterized layer, in parameter registration order.

    Parameters never reached by backward must hold zero gradients (call
    ``model.zero_grad()`` before the forward pass); a ``None`` grad means no
    backward ran and is an error.
    """
    sq: "OrderedDict[str, float]" = OrderedDict()
    for name, p in model.named_parameters():
        layer = layer_of(name)
        if p.grad is None:
            raise ContractError(f"layer {layer} has no gradient for {name}; run backward first")
        g = p.grad.astype(np.float64, copy=False)
        sq[layer] = sq.get(layer, 0.0) + float(np.dot(g.ravel(), g.ravel()))
    return [LayerGradRecord(layer, math.sqrt(s), step) for layer, s in sq.items()]


def classify(norm: float, lo: float = VANISH_BELOW, hi: float = EXPLODE_ABOVE) -> str:
    if not math.isfinite(norm) or norm > hi:
        return "exploding"
    if norm < lo:
        return "vanishing"
    return "healthy"


def gradient_health_score(records, lo: float = VANISH_BELOW, hi: float = EXPLODE_ABOVE) -> GradReport:
    records = list(records)
    if not records:
        raise ContractError("gradient_health_score needs at least one record")
    vanishing, exploding, nonfinite = [], [], []
    for r in records:
        c = classify(r.grad_l2_norm, lo, hi)
        if c == "vanishing":
            vanishing.append(r.layer)
        elif c == "exploding":
            exploding.append(r.layer)
            if not r.finite:
                nonfinite.append(r.layer)
    n = len(records)
    healthy = n - len(vanishing) - len(exploding)
    norms = np.array([r.grad_l2_norm for r in records], dtype=np.float64)
    with np.errstate(invalid="ignore"):
        stats = dict(avg_norm=float(norms.mean()), min_norm=float(norms.min()),
                     max_norm=float(norms.max()), std_norm=float(norms.std()))
    return GradReport(records, healthy / n, healthy, n, vanishing, exploding, nonfinite, **stats)


# -- time series ------------------------------------------------------------------

def records_to_csv(records, stream=None) -> str:
    """Write ``step,layer,grad_l2_norm`` rows; floats use repr so parsing is exact."""
    out = stream if stream is not None else io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if stream is None or out.tell() == 0:
        w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow((r.step, r.layer, repr(float(r.grad_l2_norm))))
    return out.getvalue() if stream is None else ""


def parse_grad_flow_csv(text: str) -> list[LayerGradRecord]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if tuple(header or ()) != CSV_COLUMNS:
        raise ContractError(f"unexpected gradient-flow CSV header {header}")
    return [LayerGradRecord(layer, float(norm), int(step)) for step, layer, norm in rows]


def group_by_step(records) -> "OrderedDict[int, list[LayerGradRecord]]":
    steps: "OrderedDict[int, list]" = OrderedDict()
    for r in records:
        steps.setdefault(r.step, []).append(r)
    return steps


def aggregate_over_steps(records) -> list[LayerGradRecord]:
    """Mean norm per layer across steps (layer order of first appearance)."""
    acc: "OrderedDict[str, list]" = OrderedDict()
    for r in records:
        acc.setdefault(r.layer, []).append(r.grad_l2_norm)
    last = max(r.step for r in records)
    return [LayerGradRecord(layer, float(np.mean(v)), last) for layer, v in acc.items()]


def grad_flow_report(history, lo: float = VANISH_BELOW, hi: float = EXPLODE_ABOVE) -> dict:
    """Serialize a gradient history (flat records or a list of per-step lists).

    Returns ``{"csv": ..., "json": ...}``: the per-layer time series and a JSON
    document with per-step GHS plus the report on step-averaged norms.
    """
    flat = [r for step in history for r in step] if history and isinstance(history[0], list) else list(history)
    if not flat:
        raise ContractError("gradient history is empty")
    per_step = [
        {"step": s, "ghs": gradient_health_score(rs, lo, hi).ghs}
        for s, rs in group_by_step(flat).items()
    ]
    agg = gradient_health_score(aggregate_over_steps(flat), lo, hi)
    doc = {"per_step": per_step, "aggregate": agg.to_dict(), "summary": agg.summary()}
    return {"csv": records_to_csv(flat), "json": json.dumps(doc, indent=2)}
