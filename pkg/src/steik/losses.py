"""Training loss functionals for implicit shape fields.

Every integral is realized as a batch mean so the weights transfer across
batch sizes. All terms are pure functions of precomputed jet batches (value,
gradient, upper-triangle Hessian); nothing here evaluates the network, which
keeps each term cheap to test against analytic fields.

Term conventions:

- eikonal: mean over ALL samples (surface + off-surface) of ||grad u| - 1|^p,
  with the 1/2 factor applied for p=2 only.
- manifold: mean |u| over surface samples.
- nonmanifold: mean exp(-alpha |u|) over off-surface samples.
- divergence: mean |trace Hess u|^p over off-surface samples only.
- directional second-order: mean |grad u^T Hess u grad u| over ALL samples,
  divided by max(|grad u|^2, EPS_GRAD) in the normalized variant. The
  normalized and plain variants coincide wherever |grad u| = 1.
- normal: mean |grad u - N|^p over surface samples (euclidean norm raised to
  the p-th power); only meaningful when ground-truth normals are supplied.

The total loss is

    alpha_e * eikonal + alpha_m * manifold + alpha_n * nonmanifold
    + anneal * alpha_l * directional + anneal * alpha_d * divergence
    + alpha_norm * normal

where anneal follows AnnealSchedule (1 until start_iter, linear to 0 at
end_iter, 0 after). Second-order terms with zero effective weight are
skipped entirely, so first-order-only jet batches are fine once annealing
has finished.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fieldnet import Array, FieldJet, JetBatch, sym_pairs, sym_weights

EPS_GRAD = 1e-12  # guards divisions by |grad u|^2

LOSS_TERMS = ("eikonal", "manifold", "nonmanifold", "directional",
              "divergence", "normal")


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    """Weights and shape parameters of the combined training loss.

    alpha_l weights the directional second-order term, alpha_d the full
    divergence term; both are annealed. At most one of the two is nonzero in
    a regularizer comparison run (presets enforce this, the type does not).
    alpha is the sharpness of the nonmanifold exponential. The normal term
    reuses p_reg as its exponent.
    """

    alpha_e: float = 50.0
    alpha_m: float = 2000.0
    alpha_n: float = 100.0
    alpha_l: float = 100.0
    alpha_d: float = 0.0
    alpha_norm: float = 0.0
    alpha: float = 100.0
    p_eik: int = 1
    p_reg: int = 1
    normalize_directional: bool = True

    def __post_init__(self):
        for name in ("alpha_e", "alpha_m", "alpha_n", "alpha_l", "alpha_d",
                     "alpha_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        _check_p(self.p_eik)
        _check_p(self.p_reg)


@dataclass
class AnnealSchedule:
    """Ramp-down window for the second-order loss weights."""

    start_iter: int = 2000
    end_iter: int = 4000
    mode: str = "linear_to_zero"  # or "constant" (factor 1 forever)

    def __post_init__(self):
        if self.mode not in ("linear_to_zero", "constant"):
            raise ValueError(f"unknown anneal mode {self.mode!r}")
        if self.start_iter > self.end_iter:
            raise ValueError("start_iter must not exceed end_iter")


@dataclass
class SampleBatch:
    """One training batch: surface and off-surface points with their jets.

    Surface points lie on the target shape; off-surface points are drawn
    from the bounding domain (everything not on the surface counts as
    off-surface). surface_normals, when present, holds one unit vector per
    surface point.
    """

    surface_points: Array            # [Ns, n]
    surface_jets: Optional[JetBatch] = None
    offsurface_points: Array = None  # [No, n]
    offsurface_jets: Optional[JetBatch] = None
    surface_normals: Optional[Array] = None

    def __post_init__(self):
        sp = np.asarray(self.surface_points, dtype=np.float64)
        op = np.asarray(self.offsurface_points, dtype=np.float64)
        if sp.ndim != 2 or op.ndim != 2:
            raise ValueError("point arrays must be 2-D")
        if sp.shape[0] + op.shape[0] == 0:
            raise ValueError("batch is empty")
        if sp.shape[0] and op.shape[0] and sp.shape[1] != op.shape[1]:
            raise ValueError("surface and offsurface dimensions differ")
        # jets are optional so that point-only batches can be handed to the
        # gradient engine, which evaluates them itself
        if self.surface_jets is not None and \
                len(self.surface_jets.value) != sp.shape[0]:
            raise ValueError("surface jet count does not match points")
        if self.offsurface_jets is not None and \
                len(self.offsurface_jets.value) != op.shape[0]:
            raise ValueError("offsurface jet count does not match points")
        if self.surface_normals is not None:
            nrm = np.asarray(self.surface_normals, dtype=np.float64)
            if nrm.shape != sp.shape:
                raise ValueError("normals shape does not match surface points")
            self.surface_normals = nrm
        self.surface_points = sp
        self.offsurface_points = op

    @property
    def n_surface(self) -> int:
        return self.surface_points.shape[0]

    @property
    def n_offsurface(self) -> int:
        return self.offsurface_points.shape[0]

    @property
    def dim(self) -> int:
        if self.n_surface:
            return self.surface_points.shape[1]
        return self.offsurface_points.shape[1]


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------

def _check_p(p: int):
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")


def _values(jets: Optional[JetBatch], side: str) -> Array:
    if jets is None:
        raise ValueError(f"{side} jets are missing from the batch")
    return jets.value


def _grads(jets: Optional[JetBatch], side: str) -> Array:
    if jets is None:
        raise ValueError(f"{side} jets are missing from the batch")
    if jets.grad is None:
        raise ValueError(f"{side} jets were built without gradients")
    return jets.grad


def _hess(jets: Optional[JetBatch], side: str) -> Array:
    if jets is None:
        raise ValueError(f"{side} jets are missing from the batch")
    if jets.hess_sym is None:
        raise ValueError(f"{side} jets were built without Hessians")
    return jets.hess_sym


def _all_grads(batch: SampleBatch) -> Array:
    parts = []
    if batch.n_surface:
        parts.append(_grads(batch.surface_jets, "surface"))
    if batch.n_offsurface:
        parts.append(_grads(batch.offsurface_jets, "offsurface"))
    return np.concatenate(parts)


def trace_from_sym(hs: Array, n: int) -> Array:
    """Batched trace directly from upper-triangle Hessian storage."""
    diag = [k for k, (i, j) in enumerate(sym_pairs(n)) if i == j]
    return hs[:, diag].sum(axis=1)


def quad_form_from_sym(hs: Array, g: Array) -> Array:
    """Batched g^T H g from upper-triangle storage, H never expanded."""
    n = g.shape[1]
    w = sym_weights(n)
    q = np.zeros(hs.shape[0])
    for k, (i, j) in enumerate(sym_pairs(n)):
        q += w[k] * hs[:, k] * g[:, i] * g[:, j]
    return q


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------

def eikonal_loss(batch: SampleBatch, p: int = 1) -> float:
    """mean ||grad u| - 1|^p over all samples; 1/2 factor for p=2 only."""
    _check_p(p)
    g = np.linalg.norm(_all_grads(batch), axis=1)
    r = np.abs(g - 1.0)
    if p == 2:
        return 0.5 * float(np.mean(r * r))
    return float(np.mean(r))


def manifold_loss(batch: SampleBatch) -> float:
    """mean |u| over surface samples."""
    if batch.n_surface == 0:
        raise ValueError("no surface samples in batch")
    return float(np.mean(np.abs(_values(batch.surface_jets, "surface"))))


def nonmanifold_loss(batch: SampleBatch, alpha: float = 100.0) -> float:
    """mean exp(-alpha |u|) over off-surface samples; always in (0, 1]."""
    if batch.n_offsurface == 0:
        raise ValueError("no offsurface samples in batch")
    u = _values(batch.offsurface_jets, "offsurface")
    return float(np.mean(np.exp(-alpha * np.abs(u))))


def divergence_loss(batch: SampleBatch, p: int = 1) -> float:
    """mean |trace Hess u|^p over off-surface samples only."""
    _check_p(p)
    if batch.n_offsurface == 0:
        raise ValueError("no offsurface samples in batch")
    hs = _hess(batch.offsurface_jets, "offsurface")
    tr = np.abs(trace_from_sym(hs, batch.dim))
    if p == 2:
        return float(np.mean(tr * tr))
    return float(np.mean(tr))


def directional_div_loss(batch: SampleBatch, normalized: bool = True) -> float:
    """mean |grad^T Hess grad| over all samples.

    The normalized variant divides per-sample by max(|grad|^2, EPS_GRAD),
    which makes the term the second derivative of u along its own gradient
    direction once |grad u| = 1.
    """
    parts = []
    for jets, side, count in ((batch.surface_jets, "surface", batch.n_surface),
                              (batch.offsurface_jets, "offsurface",
                               batch.n_offsurface)):
        if count == 0:
            continue
        g = _grads(jets, side)
        hs = _hess(jets, side)
        q = np.abs(quad_form_from_sym(hs, g))
        if normalized:
            q = q / np.maximum(np.sum(g * g, axis=1), EPS_GRAD)
        parts.append(q)
    return float(np.mean(np.concatenate(parts)))


def normal_loss(batch: SampleBatch, p: int = 2) -> float:
    """mean |grad u - N_gt|^p over surface samples (euclidean norm^p)."""
    _check_p(p)
    if batch.n_surface == 0:
        raise ValueError("no surface samples in batch")
    if batch.surface_normals is None:
        raise ValueError("surface normals are required for the normal loss")
    d = _grads(batch.surface_jets, "surface") - batch.surface_normals
    nrm2 = np.sum(d * d, axis=1)
    if p == 2:
        return float(np.mean(nrm2))
    return float(np.mean(np.sqrt(nrm2)))


# ---------------------------------------------------------------------------
# schedule and assembly
# ---------------------------------------------------------------------------

def anneal_factor(schedule: AnnealSchedule, it: int) -> float:
    """1 before start_iter, linear to 0 at end_iter, 0 after."""
    if schedule.mode == "constant":
        return 1.0
    if it <= schedule.start_iter:
        return 1.0
    if it >= schedule.end_iter:
        return 0.0
    span = schedule.end_iter - schedule.start_iter
    return float(schedule.end_iter - it) / span


def total_loss(batch: SampleBatch, weights: LossWeights, it: int = 0,
               schedule: Optional[AnnealSchedule] = None):
    """Weighted sum of all active terms plus an unweighted breakdown.

    Terms whose effective weight is zero (including annealed-away
    second-order terms) are not computed and report 0.0 in the breakdown.
    """
    fac = 1.0 if schedule is None else anneal_factor(schedule, it)
    breakdown = {name: 0.0 for name in LOSS_TERMS}
    total = 0.0
    if weights.alpha_e > 0:
        breakdown["eikonal"] = eikonal_loss(batch, weights.p_eik)
        total += weights.alpha_e * breakdown["eikonal"]
    if weights.alpha_m > 0:
        breakdown["manifold"] = manifold_loss(batch)
        total += weights.alpha_m * breakdown["manifold"]
    if weights.alpha_n > 0:
        breakdown["nonmanifold"] = nonmanifold_loss(batch, weights.alpha)
        total += weights.alpha_n * breakdown["nonmanifold"]
    if fac * weights.alpha_l > 0:
        breakdown["directional"] = directional_div_loss(
            batch, weights.normalize_directional)
        total += fac * weights.alpha_l * breakdown["directional"]
    if fac * weights.alpha_d > 0:
        breakdown["divergence"] = divergence_loss(batch, weights.p_reg)
        total += fac * weights.alpha_d * breakdown["divergence"]
    if weights.alpha_norm > 0:
        breakdown["normal"] = normal_loss(batch, weights.p_reg)
        total += weights.alpha_norm * breakdown["normal"]
    return float(total), breakdown


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def decompose_second_order(jet: FieldJet):
    """Split trace(Hess) into the part along grad u and the tangent rest.

    Returns (u_nn, u_tt_sum) with u_nn = g^T H g / max(|g|^2, EPS_GRAD) and
    u_tt_sum = trace(H) - u_nn, so the two always sum to the Laplacian.
    """
    g = np.asarray(jet.grad, dtype=np.float64)
    h = np.asarray(jet.hess, dtype=np.float64)
    u_nn = float(g @ h @ g) / max(float(g @ g), EPS_GRAD)
    u_tt_sum = float(np.trace(h)) - u_nn
    return u_nn, u_tt_sum
