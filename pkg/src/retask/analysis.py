"""Centered kernel alignment between layer representations of two models.

Linear kernel only: with column-centered X and Y,
CKA = ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F). The measure is symmetric
and invariant to isotropic scaling and orthogonal transformation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateInputError, DimensionError
from .heads import TaskModel


@dataclass
class CkaCurve:
    layers: list[int]
    values: list[float]
    policy: str = "full"

    def to_rows(self) -> list[dict]:
        return [{"layer": l, "similarity": v} for l, v in zip(self.layers, self.values)]

    def to_csv(self) -> str:
        lines = ["layer,similarity"]
        lines += [f"{l},{v:.10f}" for l, v in zip(self.layers, self.values)]
        return "\n".join(lines) + "\n"


def linear_cka(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionError("linear_cka expects 2-D matrices")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateInputError("need at least 2 rows")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        raise DegenerateInputError("matrix is all-zero after centering; similarity undefined")
    xy = np.linalg.norm(yc.T @ xc) ** 2
    return float(xy / (xx * yy))


def _probe_forward(model, probe):
    bb = model.backbone if isinstance(model, TaskModel) else model
    tokens, page = probe if isinstance(probe, tuple) else (probe, None)
    hidden, _ = bb.forward(list(tokens), page=page)
    return [h[-1].numpy() for h in hidden.per_layer]


def _paired_activations(model_a, model_b, probes):
    """Per model, per layer: (n_probes, d) final-token matrices.

    A probe failing on either model is dropped from both so rows stay aligned.
    """
    rows_a: list[list[np.ndarray]] = []
    rows_b: list[list[np.ndarray]] = []
    skipped = 0
    for probe in probes:
        try:
            a = _probe_forward(model_a, probe)
            b = _probe_forward(model_b, probe)
        except Exception:
            skipped += 1
            continue
        rows_a.append(a)
        rows_b.append(b)
    if not rows_a:
        raise DegenerateInputError("every probe failed")
    acts_a = [np.stack([r[i] for r in rows_a]) for i in range(len(rows_a[0]))]
    acts_b = [np.stack([r[i] for r in rows_b]) for i in range(len(rows_b[0]))]
    return acts_a, acts_b, skipped


def layer_curve(model_a, model_b, probes, policy: str = "full") -> CkaCurve:
    """CKA per aligned layer pair over the probes' final-token activations.

    The full policy requires equal depths; last-k aligns the deepest k layers
    of each model (k = the shallower model's layer count).
    """
    if not probes:
        raise DegenerateInputError("probe set must be non-empty")
    acts_a, acts_b, _ = _paired_activations(model_a, model_b, probes)
    if policy == "full":
        if len(acts_a) != len(acts_b):
            raise DimensionError(
                f"layer counts differ ({len(acts_a)} vs {len(acts_b)}); use the last-k policy"
            )
        pairs = list(zip(range(len(acts_a)), range(len(acts_b))))
    elif policy == "last-k":
        k = min(len(acts_a), len(acts_b))
        pairs = list(zip(range(len(acts_a) - k, len(acts_a)), range(len(acts_b) - k, len(acts_b))))
    else:
        raise ValueError(f"unknown policy {policy!r}")
    layers = []
    values = []
    for ia, ib in pairs:
        xa, xb = acts_a[ia], acts_b[ib]
        try:
            v = linear_cka(xa, xb)
        except DegenerateInputError:
            # a constant activation (e.g. layer 0 of a fixed final instruction
            # token) centers to zero; equal constants count as fully similar
            v = 1.0 if np.allclose(xa, xb) else 0.0
        layers.append(ia)
        values.append(min(max(v, 0.0), 1.0))
    return CkaCurve(layers=layers, values=values, policy=policy)


def quarter_means(curve: CkaCurve) -> tuple[float, float]:
    """(mean over shallowest quarter, mean over deepest quarter) of the curve."""
    n = len(curve.values)
    q = max(1, n // 4)
    return float(np.mean(curve.values[:q])), float(np.mean(curve.values[-q:]))
