"""Reverse-mode parameter gradients for losses built from jets.

The forward pass (fieldnet.forward_jet_batch) propagates value, gradient and
upper-triangle Hessian through every layer and records each intermediate on a
per-layer tape. grad_loss then seeds the cotangents of the network output
jet from the analytic derivatives of the loss terms and runs one reverse
sweep over the tape, visiting every node exactly once. Spatial derivatives
travel forward, parameter derivatives travel backward; no nested tapes, and
the third-order mixed derivatives (parameter derivatives of the spatial
Hessian) fall out of the sweep for free.

All batch reductions are means, so gradients are batch-size invariant, and
the sweep is plain deterministic numpy: identical inputs give bitwise
identical gradients.
"""

import copy
from dataclasses import dataclass

import numpy as np

from .fieldnet import (Array, JetBatch, LayerParams, NetworkParams, sym_pairs,
                       sym_to_full, sym_weights)
from .losses import (EPS_GRAD, AnnealSchedule, LossWeights, SampleBatch,
                     anneal_factor, quad_form_from_sym, total_loss,
                     trace_from_sym)

FD_DENOM_FLOOR = 1e-8  # relative-error denominator floor in check_grad


class NonFiniteLossError(ArithmeticError):
    """A loss term produced a non-finite value; names term and sample."""

    def __init__(self, term: str, sample: int, side: str = ""):
        where = f"{side} sample {sample}" if side else f"sample {sample}"
        super().__init__(f"non-finite {term} term at {where}")
        self.term = term
        self.sample = sample


# ---------------------------------------------------------------------------
# parameter flattening
# ---------------------------------------------------------------------------

@dataclass
class ParamGradient:
    """d(loss)/d(parameters); one dict per layer keyed by trainable name."""

    layers: list

    def flat(self) -> Array:
        chunks = []
        for d in self.layers:
            for name in d:
                chunks.append(np.asarray(d[name]).ravel())
        return np.concatenate(chunks)

    @classmethod
    def zeros(cls, params: NetworkParams) -> "ParamGradient":
        out = []
        for layer in params.layers:
            out.append({name: np.zeros_like(getattr(layer, name))
                        for name in layer.trainable_names()})
        return cls(out)


def flatten_params(params: NetworkParams) -> Array:
    """All trainable tensors as one vector (layer order, name order)."""
    return np.concatenate([getattr(layer, name).ravel()
                           for layer in params.layers
                           for name in layer.trainable_names()])


def assign_params(params: NetworkParams, vec: Array):
    """Write a flat vector back into the trainable tensors, in place."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != n_trainable(params):
        raise ValueError("flat vector length does not match parameters")
    pos = 0
    for layer in params.layers:
        for name in layer.trainable_names():
            arr = getattr(layer, name)
            np.copyto(arr, vec[pos:pos + arr.size].reshape(arr.shape))
            pos += arr.size


def n_trainable(params: NetworkParams) -> int:
    return sum(getattr(layer, name).size for layer in params.layers
               for name in layer.trainable_names())


# ---------------------------------------------------------------------------
# jet evaluation over a sample batch
# ---------------------------------------------------------------------------

def _eval_batch(params, batch, order, want_caches):
    from . import fieldnet
    pts = np.concatenate([batch.surface_points, batch.offsurface_points])
    out = fieldnet.forward_jet_batch(params, pts, order=order,
                                     want_caches=want_caches)
    jets, caches = out if want_caches else (out, None)
    ns = batch.n_surface

    def split(a, lo, hi):
        return None if a is None else a[lo:hi]

    sjets = JetBatch(jets.value[:ns], split(jets.grad, 0, ns),
                     split(jets.hess_sym, 0, ns))
    ojets = JetBatch(jets.value[ns:], split(jets.grad, ns, None),
                     split(jets.hess_sym, ns, None))
    eval_batch = SampleBatch(batch.surface_points, sjets,
                             batch.offsurface_points, ojets,
                             batch.surface_normals)
    return eval_batch, jets, caches


def make_sample_batch(params, surface_points, offsurface_points,
                      normals=None, order: int = 2) -> SampleBatch:
    """Evaluate jets at the given points and bundle them into a batch."""
    shell = SampleBatch(np.asarray(surface_points, dtype=np.float64),
                        None,
                        np.asarray(offsurface_points, dtype=np.float64),
                        None, normals)
    eval_batch, _, _ = _eval_batch(params, shell, order, False)
    return eval_batch


def _needed_order(weights: LossWeights, fac: float) -> int:
    if fac * weights.alpha_l > 0 or fac * weights.alpha_d > 0:
        return 2
    return 1


def loss_value(params, batch, weights, it: int = 0, schedule=None):
    """total_loss at the batch's points with jets computed from params."""
    fac = 1.0 if schedule is None else anneal_factor(schedule, it)
    eval_batch, _, _ = _eval_batch(params, batch, _needed_order(weights, fac),
                                   False)
    return total_loss(eval_batch, weights, it, schedule)


# ---------------------------------------------------------------------------
# loss seeds: cotangents of the output jet
# ---------------------------------------------------------------------------

def _check_term(term, per_sample, ns, side=None):
    """Raise with the offending sample if a per-sample term went non-finite.

    side=None means per_sample spans the whole batch (surface first) and the
    side is recovered from the index; otherwise per_sample is side-local.
    """
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        i = int(bad[0])
        if side is None:
            side = "surface" if i < ns else "offsurface"
            i = i if i < ns else i - ns
        raise NonFiniteLossError(term, i, side)


def _loss_seeds(batch: SampleBatch, weights: LossWeights, fac: float,
                order: int):
    """Analytic d(total)/d(value, grad, hess components), per sample.

    Surface samples come first. Absolute values use the zero subgradient at
    their kinks; every |grad| in a denominator is floored at EPS_GRAD.
    """
    ns, no = batch.n_surface, batch.n_offsurface
    ntot = ns + no
    u = np.concatenate([batch.surface_jets.value, batch.offsurface_jets.value])
    G = np.concatenate([batch.surface_jets.grad, batch.offsurface_jets.grad])
    n = G.shape[1]
    pairs = sym_pairs(n)
    Hs = None
    if order >= 2:
        Hs = np.concatenate([batch.surface_jets.hess_sym,
                             batch.offsurface_jets.hess_sym])

    vbar = np.zeros(ntot)
    Gbar = np.zeros((ntot, n))
    Hbar = np.zeros((ntot, len(pairs))) if order >= 2 else None

    if weights.alpha_e > 0:
        gn = np.linalg.norm(G, axis=1)
        r = gn - 1.0
        per = 0.5 * r * r if weights.p_eik == 2 else np.abs(r)
        _check_term("eikonal", per, ns)
        coef = r if weights.p_eik == 2 else np.sign(r)
        Gbar += (weights.alpha_e / ntot) * \
            (coef / np.maximum(gn, EPS_GRAD))[:, None] * G

    if weights.alpha_m > 0 and ns:
        per = np.abs(u[:ns])
        _check_term("manifold", per, ns, side="surface")
        vbar[:ns] += (weights.alpha_m / ns) * np.sign(u[:ns])

    if weights.alpha_n > 0 and no:
        e = np.exp(-weights.alpha * np.abs(u[ns:]))
        _check_term("nonmanifold", e, ns, side="offsurface")
        vbar[ns:] += (weights.alpha_n / no) * \
            (-weights.alpha) * np.sign(u[ns:]) * e

    wl = fac * weights.alpha_l
    if wl > 0:
        wk = sym_weights(n)
        q = quad_form_from_sym(Hs, G)
        if weights.normalize_directional:
            g2 = np.sum(G * G, axis=1)
            D = np.maximum(g2, EPS_GRAD)
        else:
            g2 = None
            D = np.ones(ntot)
        _check_term("directional", np.abs(q) / D, ns)
        sgn = np.sign(q)
        scale = wl / ntot
        for k, (i, j) in enumerate(pairs):
            Hbar[:, k] += scale * wk[k] * sgn * G[:, i] * G[:, j] / D
        HG = np.einsum("bij,bj->bi", sym_to_full(Hs, n), G)
        Gbar += scale * (sgn / D)[:, None] * 2.0 * HG
        if weights.normalize_directional:
            live = g2 > EPS_GRAD  # below the floor the denominator is constant
            Gbar -= scale * (np.abs(q) / (D * D) * live)[:, None] * 2.0 * G

    wd = fac * weights.alpha_d
    if wd > 0 and no:
        tr = trace_from_sym(Hs[ns:], n)
        per = tr * tr if weights.p_reg == 2 else np.abs(tr)
        _check_term("divergence", per, ns, side="offsurface")
        coef = 2.0 * tr if weights.p_reg == 2 else np.sign(tr)
        for k, (i, j) in enumerate(pairs):
            if i == j:
                Hbar[ns:, k] += (wd / no) * coef

    if weights.alpha_norm > 0 and ns:
        if batch.surface_normals is None:
            raise ValueError("surface normals are required for the normal loss")
        d = G[:ns] - batch.surface_normals
        d2 = np.sum(d * d, axis=1)
        _check_term("normal", d2, ns, side="surface")
        if weights.p_reg == 2:
            Gbar[:ns] += (weights.alpha_norm / ns) * 2.0 * d
        else:
            dn = np.maximum(np.sqrt(d2), EPS_GRAD)
            Gbar[:ns] += (weights.alpha_norm / ns) * d / dn[:, None]

    return vbar, Gbar, Hbar


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def _pair_accumulate(out, C, A, pairs):
    """out_i += C_k A_j, out_j += C_k A_i over stored pairs k=(i,j).

    Adjoint of Q_k = A_i * A_j; the i == j case lands twice, which is the
    correct derivative of A_i^2.
    """
    for k, (i, j) in enumerate(pairs):
        out[:, i, :] += C[:, k, :] * A[:, j, :]
        out[:, j, :] += C[:, k, :] * A[:, i, :]


def _mat(x):
    return x.reshape(-1, x.shape[-1])


def _layer_backward(layer: LayerParams, cache, vbar, Gvbar, Hvbar, pairs):
    """One layer of the reverse sweep.

    Takes cotangents of the layer OUTPUT jet, returns cotangents of the
    layer input jet plus this layer's parameter gradients. Mirrors
    fieldnet._layer_forward term by term.
    """
    W1, W2, W3 = layer.W1, layer.W2, layer.W3
    z, G, Hs = cache["z"], cache["G"], cache["Hs"]
    order1 = Gvbar is not None
    order2 = Hvbar is not None

    # --- activation ---
    if layer.activation == "sine":
        w = layer.omega0
        s, c = cache["s"], cache["c"]
        Ga, Ha, Qa = cache["Ga"], cache["Ha"], cache["Qa"]
        abar = w * c * vbar
        Gabar = Habar = None
        if order1:
            abar = abar - (w * w) * s * np.sum(Gvbar * Ga, axis=1)
            Gabar = w * c[:, None, :] * Gvbar
        if order2:
            abar = abar - (w * w) * s * np.sum(Hvbar * Ha, axis=1) \
                        - (w ** 3) * c * np.sum(Hvbar * Qa, axis=1)
            Habar = w * c[:, None, :] * Hvbar
            _pair_accumulate(Gabar, -(w * w) * s[:, None, :] * Hvbar, Ga, pairs)
    else:
        abar, Gabar, Habar = vbar, Gvbar, Hvbar

    B = abar.shape[0]
    grads = {}

    # --- combine ---
    if layer.kind == "linear":
        gW2 = abar.T @ z
        gb2 = abar.sum(axis=0)
        zbar = abar @ W2
        Gbar = Hsbar = None
        if order1:
            gW2 += _mat(Gabar).T @ _mat(G)
            Gbar = (_mat(Gabar) @ W2).reshape(G.shape)
        if order2:
            gW2 += _mat(Habar).T @ _mat(Hs)
            Hsbar = (_mat(Habar) @ W2).reshape(Hs.shape)
        grads["W2"], grads["b2"] = gW2, gb2
        return zbar, Gbar, Hsbar, grads

    l1, l2, z2 = cache["l1"], cache["l2"], cache["z2"]
    P1, P2, U = cache["P1"], cache["P2"], cache["U"]
    H1, H2, T3 = cache["H1"], cache["H2"], cache["T3"]

    l1bar = abar * l2
    l2bar = abar * l1
    l3bar = abar
    P1bar = P2bar = P3bar = None
    H1bar = H2bar = H3bar = T3bar = None
    if order1:
        l1bar = l1bar + np.sum(Gabar * P2, axis=1)
        l2bar = l2bar + np.sum(Gabar * P1, axis=1)
        P1bar = Gabar * l2[:, None, :]
        P2bar = Gabar * l1[:, None, :]
        P3bar = Gabar
    if order2:
        l1bar += np.sum(Habar * H2, axis=1)
        l2bar += np.sum(Habar * H1, axis=1)
        H1bar = Habar * l2[:, None, :]
        H2bar = Habar * l1[:, None, :]
        H3bar = Habar
        _pair_accumulate(P1bar, Habar, P2, pairs)
        _pair_accumulate(P2bar, Habar, P1, pairs)
        T3bar = (_mat(H3bar) @ W3).reshape(Hs.shape)

    gW1 = l1bar.T @ z
    gW2 = l2bar.T @ z
    gW3 = l3bar.T @ z2
    if order1:
        gW1 += _mat(P1bar).T @ _mat(G)
        gW2 += _mat(P2bar).T @ _mat(G)
        gW3 += 2.0 * (_mat(P3bar).T @ _mat(U))
    if order2:
        gW1 += _mat(H1bar).T @ _mat(Hs)
        gW2 += _mat(H2bar).T @ _mat(Hs)
        gW3 += _mat(H3bar).T @ _mat(cache["T3"])
    grads.update(W1=gW1, b1=l1bar.sum(axis=0), W2=gW2, b2=l2bar.sum(axis=0),
                 W3=gW3, b3=l3bar.sum(axis=0))

    zbar = l1bar @ W1 + l2bar @ W2 + 2.0 * z * (l3bar @ W3)
    Gbar = Hsbar = None
    if order1:
        Ubar = 2.0 * (_mat(P3bar) @ W3).reshape(G.shape)
        Gbar = (_mat(P1bar) @ W1 + _mat(P2bar) @ W2).reshape(G.shape) \
            + Ubar * z[:, None, :]
        zbar += np.sum(Ubar * G, axis=1)
    if order2:
        Hsbar = (_mat(H1bar) @ W1 + _mat(H2bar) @ W2).reshape(Hs.shape) \
            + 2.0 * T3bar * z[:, None, :]
        zbar += 2.0 * np.sum(T3bar * Hs, axis=1)
        _pair_accumulate(Gbar, 2.0 * T3bar, G, pairs)
    return zbar, Gbar, Hsbar, grads


def _reverse_sweep(params, caches, vbar, Gbar, Hbar):
    pairs = sym_pairs(params.config.input_dim)
    vb = vbar[:, None]
    gb = Gbar[:, :, None] if Gbar is not None else None
    hb = Hbar[:, :, None] if Hbar is not None else None
    grads = []
    for layer, cache in zip(reversed(params.layers), reversed(caches)):
        vb, gb, hb, g = _layer_backward(layer, cache, vb, gb, hb, pairs)
        grads.append({name: g[name] for name in layer.trainable_names()})
    grads.reverse()
    return ParamGradient(grads)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def grad_loss(params: NetworkParams, batch: SampleBatch,
              weights: LossWeights, it: int = 0,
              schedule: AnnealSchedule = None, return_breakdown: bool = False):
    """Loss and its exact parameter gradient at the batch's points.

    Jets are recomputed from params (second order only while a second-order
    term has nonzero effective weight), so any jets already stored on the
    batch are ignored. The returned loss equals losses.total_loss on the
    same jets.
    """
    fac = 1.0 if schedule is None else anneal_factor(schedule, it)
    order = _needed_order(weights, fac)
    eval_batch, _, caches = _eval_batch(params, batch, order, True)
    loss, breakdown = total_loss(eval_batch, weights, it, schedule)
    vbar, Gbar, Hbar = _loss_seeds(eval_batch, weights, fac, order)
    grad = _reverse_sweep(params, caches, vbar, Gbar, Hbar)
    for li, d in enumerate(grad.layers):
        for name, arr in d.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteLossError(f"reverse sweep ({name}, layer {li})",
                                         -1)
    if return_breakdown:
        return loss, grad, breakdown
    return loss, grad


def check_grad(params: NetworkParams, batch: SampleBatch,
               weights: LossWeights, step: float = 1e-5,
               n_coords: int = 100, seed: int = 0, it: int = 0,
               schedule: AnnealSchedule = None) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Perturbs n_coords randomly chosen trainable coordinates by +-step and
    compares against the reverse-sweep gradient; the relative-error
    denominator is floored at FD_DENOM_FLOOR.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grad = grad_loss(params, batch, weights, it, schedule)
    analytic = grad.flat()
    work = copy.deepcopy(params)
    theta = flatten_params(work)
    rng = np.random.default_rng(seed)
    count = min(n_coords, theta.size)
    coords = rng.choice(theta.size, size=count, replace=False)
    worst = 0.0
    for cidx in coords:
        saved = theta[cidx]
        theta[cidx] = saved + step
        assign_params(work, theta)
        lp, _ = loss_value(work, batch, weights, it, schedule)
        theta[cidx] = saved - step
        assign_params(work, theta)
        lm, _ = loss_value(work, batch, weights, it, schedule)
        theta[cidx] = saved
        fd = (lp - lm) / (2.0 * step)
        err = abs(analytic[cidx] - fd) / max(abs(fd), FD_DENOM_FLOOR)
        worst = max(worst, err)
    assign_params(work, theta)
    return worst
