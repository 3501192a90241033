"""Importance scoring and selective three-way parameter fusion.

A component's relevance to the current edit is the first-order estimate
|<theta_c, dL/dtheta_c>| (Frobenius inner product), accumulated as a running
mean over the edit's optimizer steps. The top-k% components by mean score
are merged convexly across the original, previous, and freshly trained
checkpoints; everything else, including embeddings, positions, and norm
gains, is taken from the trained checkpoint unchanged.

The exact zeroing definition |L(theta) - L(theta | theta_c = 0)| is kept as
a slow reference (importance_by_zeroing) for verification; the inner-product
form is the production path and the two are not claimed to agree numerically
away from small components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .model import COMPONENT_KINDS, ComponentId, ModelParams

COEFF_SUM_TOL = 1e-12

_KIND_ORDER = {kind: i for i, kind in enumerate(COMPONENT_KINDS)}


@dataclass(frozen=True)
class FusionCoefficients:
    """Convex weights over (original, previous, current) plus the top-k%."""

    beta: float = 0.2
    gamma: float = 0.3
    eta: float = 0.5
    k_percent: float = 20.0

    def __post_init__(self):
        for name in ("beta", "gamma", "eta"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"fusion coefficient {name}={v} outside [0, 1]")
        total = self.beta + self.gamma + self.eta
        if abs(total - 1.0) > COEFF_SUM_TOL:
            raise ConfigError(f"fusion coefficients must sum to 1, got {total!r}")
        if not (0.0 <= self.k_percent <= 100.0):
            raise ConfigError(f"k_percent={self.k_percent} outside [0, 100]")


def component_importance(theta_c: np.ndarray, grad_c: np.ndarray) -> float:
    """|sum(theta_c * grad_c)|: magnitude of the loss change from zeroing
    the component, to first order."""
    theta_c = np.asarray(theta_c, dtype=np.float64)
    grad_c = np.asarray(grad_c, dtype=np.float64)
    if theta_c.shape != grad_c.shape:
        raise ShapeError(f"importance shape mismatch: {theta_c.shape} vs {grad_c.shape}")
    return abs(float(np.sum(theta_c * grad_c)))


def importance_by_zeroing(
    params: ModelParams, loss_fn: Callable[[ModelParams], float], cid: ComponentId
) -> float:
    """Exact (and slow) importance: |L(theta) - L(theta with theta_c = 0)|.

    Reference implementation for tests; it re-evaluates the full loss on a
    cloned parameter set with one component zeroed.
    """
    base = float(loss_fn(params))
    ablated = params.deep_clone()
    ablated.component(cid).data[:] = 0.0
    return abs(base - float(loss_fn(ablated)))


class ImportanceLedger:
    """Per-component accumulated scores for the current edit instance."""

    def __init__(self, cids: Iterable[ComponentId]):
        self._totals: dict[ComponentId, float] = {cid: 0.0 for cid in cids}
        if not self._totals:
            raise ConfigError("importance ledger needs at least one component")
        self.step_count = 0

    def components(self) -> list[ComponentId]:
        return sorted(self._totals, key=_component_order)

    def mean_scores(self) -> dict[ComponentId, float]:
        """Running mean per component; zeros before any accumulation."""
        if self.step_count == 0:
            return dict(self._totals)
        return {cid: total / self.step_count for cid, total in self._totals.items()}

    def accumulate(self, params: ModelParams, grads: Mapping[ComponentId, np.ndarray]) -> None:
        missing = [cid.name for cid in self._totals if grads.get(cid) is None]
        if missing:
            raise ConfigError(f"missing gradients for components: {missing}")
        for cid in self._totals:
            self._totals[cid] += component_importance(params.component(cid).data, grads[cid])
        self.step_count += 1

    def rows(self) -> list[tuple[str, int, str, float]]:
        """(component, layer, kind, mean score) rows for the CSV dump."""
        scores = self.mean_scores()
        return [(cid.name, cid.layer, cid.kind, scores[cid]) for cid in self.components()]


def accumulate_importance(
    ledger: ImportanceLedger, params: ModelParams, grads: Mapping[ComponentId, np.ndarray]
) -> ImportanceLedger:
    ledger.accumulate(params, grads)
    return ledger


def _component_order(cid: ComponentId) -> tuple[int, int]:
    return (cid.layer, _KIND_ORDER[cid.kind])


def selection_size(k_percent: float, n_components: int) -> int:
    """ceil(k/100 * n), computed exactly for integer percentages."""
    if not (0.0 <= k_percent <= 100.0):
        raise ConfigError(f"k_percent={k_percent} outside [0, 100]")
    if float(k_percent).is_integer():
        k_int = int(k_percent)
        return -((-k_int * n_components) // 100)
    return max(0, math.ceil(k_percent * n_components / 100.0 - 1e-12))


def select_top_k(ledger: ImportanceLedger, k_percent: float) -> set[ComponentId]:
    """The ceil(k% * n) components with the highest mean scores.

    Ties break toward the lower (layer, kind) address, so selections nest
    monotonically as k grows.
    """
    scores = ledger.mean_scores()
    ordered = sorted(scores, key=lambda cid: (-scores[cid],) + _component_order(cid))
    return set(ordered[: selection_size(k_percent, len(ordered))])


def fuse_parameters(
    theta0: ModelParams,
    theta_prev: ModelParams,
    theta_cur: ModelParams,
    selected: Iterable[ComponentId],
    coeffs: FusionCoefficients,
) -> ModelParams:
    """beta*theta0 + gamma*theta_prev + eta*theta_cur on selected components.

    Unselected components and every non-component parameter are copied
    bit-for-bit from theta_cur. Simplex vertices short-circuit to an exact
    copy of their source, and the blend is evaluated as
    cur + beta*(orig - cur) + gamma*(prev - cur) so identical inputs pass
    through unchanged.
    """
    if not (theta0.config.architecture() == theta_prev.config.architecture()
            == theta_cur.config.architecture()):
        raise ShapeError("fusion inputs must share one architecture")
    out = theta_cur.deep_clone()
    selected = set(selected)
    known = set(theta_cur.component_ids())
    unknown = selected - known
    if unknown:
        raise ConfigError(f"selected components outside the model: {sorted(c.name for c in unknown)}")
    beta, gamma, eta = coeffs.beta, coeffs.gamma, coeffs.eta
    for cid in selected:
        cur = theta_cur.component(cid).data
        if beta == 1.0 and gamma == 0.0 and eta == 0.0:
            fused = theta0.component(cid).data.copy()
        elif gamma == 1.0 and beta == 0.0 and eta == 0.0:
            fused = theta_prev.component(cid).data.copy()
        elif eta == 1.0 and beta == 0.0 and gamma == 0.0:
            fused = cur.copy()
        else:
            fused = cur + beta * (theta0.component(cid).data - cur) + gamma * (
                theta_prev.component(cid).data - cur
            )
        out.component(cid).data = fused
    return out
