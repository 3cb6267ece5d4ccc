"""Scalar-field networks built from linear or quadratic sine layers.

A quadratic layer computes

    a(x) = (W1 x + b1) o (W2 x + b2) + W3 x^2 + b3

where o is the elementwise product and x^2 the elementwise square. With
W1 = W3 = 0, b3 = 0, b1 = 1 this degenerates to the affine map W2 x + b2,
which is how the "linear" kind is represented (those four tensors are then
frozen, not trainable).

Besides plain evaluation, the module propagates exact first and second
spatial derivatives (a "jet": value, gradient, Hessian) through every layer
in closed form. All arithmetic is float64; second-derivative chains amplify
rounding error too much for float32.

Hessians are stored internally by their upper triangle. For input dimension
n the component order is (i, j) for i <= j, e.g. n = 3 gives
(00, 01, 02, 11, 12, 22) with symmetry multiplicities (1, 2, 2, 1, 2, 1).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

LAYER_KINDS = ("linear", "quadratic")
ACTIVATIONS = ("sine", "identity")
INIT_SCHEMES = ("siren_uniform", "geometric_sine", "multifreq_geometric")

# Uniform half-width for the small quadratic-part tensors at init. Small
# enough that the layer is linear-dominated, large enough to break symmetry.
INIT_EPS = 1e-4

CHECKPOINT_MAGIC = b"STEIK1"

# Radius of the sphere SDF the geometric init schemes regress onto.
_GEOM_SPHERE_RADIUS = 0.5
_GEOM_FIT_POINTS = 4096


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or wrong-version checkpoint files."""


def sym_pairs(n: int) -> list[tuple[int, int]]:
    """Upper-triangle index pairs for an n x n symmetric matrix."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def sym_weights(n: int) -> Array:
    """Multiplicity of each stored component in the full matrix (1 or 2)."""
    return np.array([1.0 if i == j else 2.0 for i, j in sym_pairs(n)])


def sym_to_full(hs: Array, n: int) -> Array:
    """Expand [..., m] upper-triangle storage to full [..., n, n] matrices."""
    out = np.zeros(hs.shape[:-1] + (n, n))
    for k, (i, j) in enumerate(sym_pairs(n)):
        out[..., i, j] = hs[..., k]
        out[..., j, i] = hs[..., k]
    return out


def full_to_sym(h: Array) -> Array:
    n = h.shape[-1]
    return np.stack([h[..., i, j] for i, j in sym_pairs(n)], axis=-1)


@dataclass
class LayerParams:
    """One layer. All six tensors always present; see module docstring."""

    W1: Array
    b1: Array
    W2: Array
    b2: Array
    W3: Array
    b3: Array
    kind: str = "quadratic"
    activation: str = "sine"
    omega0: float = 30.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "sine" and not self.omega0 > 0:
            raise ValueError("omega0 must be positive for sine activation")
        shape = self.W2.shape
        for name in ("W1", "W3"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != W2 shape {shape}")
        for name in ("b1", "b2", "b3"):
            if getattr(self, name).shape != (shape[0],):
                raise ValueError(f"{name} length != layer output width {shape[0]}")
        if self.kind == "linear":
            if np.any(self.W1) or np.any(self.W3) or np.any(self.b3) or np.any(self.b1 != 1.0):
                raise ValueError("linear kind requires W1=W3=b3=0 and b1=1")

    @property
    def m_out(self) -> int:
        return self.W2.shape[0]

    @property
    def m_in(self) -> int:
        return self.W2.shape[1]

    def trainable_names(self) -> tuple[str, ...]:
        return ("W1", "b1", "W2", "b2", "W3", "b3") if self.kind == "quadratic" else ("W2", "b2")


@dataclass
class NetworkConfig:
    input_dim: int
    hidden_layers: int = 5
    hidden_width: int = 128
    layer_kind: str = "quadratic"
    omega0_first: float = 30.0
    omega0_hidden: float = 30.0
    init_scheme: str = "siren_uniform"

    def __post_init__(self):
        if self.input_dim not in (1, 2, 3):
            # 1 is only used by polynomial fixtures; shapes live in 2 or 3.
            raise ValueError("input_dim must be 1, 2 or 3")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("hidden_layers and hidden_width must be >= 1")
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        if not (self.omega0_first > 0 and self.omega0_hidden > 0):
            raise ValueError("omega0 must be positive")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(m_in, m_out) per layer; scalar output, sine on all but the last."""
        dims = [(self.input_dim, self.hidden_width)]
        dims += [(self.hidden_width, self.hidden_width)] * (self.hidden_layers - 1)
        dims += [(self.hidden_width, 1)]
        return dims


@dataclass
class NetworkParams:
    layers: list[LayerParams]
    config: NetworkConfig

    def __post_init__(self):
        dims = self.config.layer_dims()
        if len(self.layers) != len(dims):
            raise ValueError("layer count does not match config")
        for layer, (m_in, m_out) in zip(self.layers, dims):
            if (layer.m_in, layer.m_out) != (m_in, m_out):
                raise ValueError("layer dimensions do not chain from input_dim to 1")


@dataclass
class FieldJet:
    """Value, spatial gradient and (symmetrized) spatial Hessian at a point."""

    value: float
    grad: Array
    hess: Array


@dataclass
class JetBatch:
    """Batched jets. hess_sym is upper-triangle storage, None below order 2."""

    value: Array                      # [B]
    grad: Optional[Array] = None      # [B, n]
    hess_sym: Optional[Array] = None  # [B, m]


# ---------------------------------------------------------------------------
# forward jet propagation
# ---------------------------------------------------------------------------

def _layer_forward(layer: LayerParams, z, G, Hs, pairs, order: int, cache: Optional[dict]):
    """Push a jet through one layer.

    z: [B, in] values; G: [B, n, in] gradients; Hs: [B, m, in] Hessian
    components. Returns (v, Gv, Hv) at the layer output. When `cache` is a
    dict, every intermediate the reverse sweep needs is stored in it.
    """
    lin = layer.kind == "linear"
    W1, b1, W2, b2, W3, b3 = layer.W1, layer.b1, layer.W2, layer.b2, layer.W3, layer.b3
    B = z.shape[0]
    out = layer.m_out

    l2 = z @ W2.T + b2
    if lin:
        l1 = np.ones((B, out))
        l3 = np.zeros((B, out))
        z2 = None
        a = l2.copy()
    else:
        z2 = z * z
        l1 = z @ W1.T + b1
        l3 = z2 @ W3.T + b3
        a = l1 * l2 + l3

    P1 = P2 = P3 = U = Ga = None
    if order >= 1:
        n = G.shape[1]
        P2 = (G.reshape(B * n, -1) @ W2.T).reshape(B, n, out)
        if lin:
            Ga = P2
        else:
            P1 = (G.reshape(B * n, -1) @ W1.T).reshape(B, n, out)
            U = G * z[:, None, :]
            P3 = 2.0 * (U.reshape(B * n, -1) @ W3.T).reshape(B, n, out)
            Ga = P1 * l2[:, None, :] + P2 * l1[:, None, :] + P3

    H1 = H2 = T3 = Qz = Ha = None
    if order >= 2:
        m = Hs.shape[1]
        H2 = (Hs.reshape(B * m, -1) @ W2.T).reshape(B, m, out)
        if lin:
            Ha = H2
        else:
            H1 = (Hs.reshape(B * m, -1) @ W1.T).reshape(B, m, out)
            Qz = np.stack([G[:, i, :] * G[:, j, :] for i, j in pairs], axis=1)
            T3 = 2.0 * (Hs * z[:, None, :] + Qz)
            H3 = (T3.reshape(B * m, -1) @ W3.T).reshape(B, m, out)
            PP = np.empty_like(H1)
            for k, (i, j) in enumerate(pairs):
                PP[:, k, :] = P1[:, i, :] * P2[:, j, :] + P1[:, j, :] * P2[:, i, :]
            Ha = H1 * l2[:, None, :] + H2 * l1[:, None, :] + PP + H3

    if layer.activation == "sine":
        w = layer.omega0
        s = np.sin(w * a)
        c = np.cos(w * a)
        v = s
        Gv = w * c[:, None, :] * Ga if order >= 1 else None
        Qa = None
        if order >= 2:
            Qa = np.stack([Ga[:, i, :] * Ga[:, j, :] for i, j in pairs], axis=1)
            Hv = w * c[:, None, :] * Ha - (w * w) * s[:, None, :] * Qa
        else:
            Hv = None
    else:
        s = c = Qa = None
        v, Gv, Hv = a, Ga, Ha

    if cache is not None:
        cache.update(z=z, z2=z2, G=G, Hs=Hs, l1=l1, l2=l2, P1=P1, P2=P2, U=U,
                     H1=H1, H2=H2, T3=T3, Qz=Qz, Ga=Ga, Ha=Ha, s=s, c=c, Qa=Qa)
    return v, Gv, Hv


def forward_jet_batch(params: NetworkParams, X: Array, order: int = 2,
                      want_caches: bool = False):
    """Evaluate the network and its spatial derivatives on a batch.

    order 0: values only; 1: + gradients; 2: + Hessians. Returns a JetBatch,
    or (JetBatch, caches) with per-layer reverse-sweep caches when asked.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.config.input_dim:
        raise ValueError(f"expected points of shape [B, {params.config.input_dim}]")
    B, n = X.shape
    pairs = sym_pairs(n)
    m = len(pairs)

    z = X
    G = np.broadcast_to(np.eye(n), (B, n, n)).copy() if order >= 1 else None
    Hs = np.zeros((B, m, n)) if order >= 2 else None

    caches = [] if want_caches else None
    for layer in params.layers:
        cache = {} if want_caches else None
        z, G, Hs = _layer_forward(layer, z, G, Hs, pairs, order, cache)
        if want_caches:
            caches.append(cache)

    jets = JetBatch(
        value=z[:, 0],
        grad=G[:, :, 0] if order >= 1 else None,
        hess_sym=Hs[:, :, 0] if order >= 2 else None,
    )
    return (jets, caches) if want_caches else jets


def forward(params: NetworkParams, x: Array) -> float:
    """u_theta(x) for a single point."""
    jets = forward_jet_batch(params, np.asarray(x, dtype=np.float64)[None, :], order=0)
    return float(jets.value[0])


def forward_batch(params: NetworkParams, X: Array) -> Array:
    return forward_jet_batch(params, X, order=0).value


def forward_jet(params: NetworkParams, x: Array) -> FieldJet:
    """Exact (value, gradient, Hessian) at a single point.

    The Hessian is assembled from upper-triangle storage, hence exactly
    symmetric.
    """
    x = np.asarray(x, dtype=np.float64)
    jets = forward_jet_batch(params, x[None, :], order=2)
    n = x.shape[0]
    hess = sym_to_full(jets.hess_sym[0], n)
    return FieldJet(value=float(jets.value[0]), grad=jets.grad[0].copy(), hess=hess)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def param_count(config: NetworkConfig) -> int:
    """Exact number of trainable scalars."""
    per = 3 if config.layer_kind == "quadratic" else 1
    return sum(per * (m_in * m_out + m_out) for m_in, m_out in config.layer_dims())


def _siren_w2_bound(m_in: int, omega0: float, first: bool) -> float:
    # First layer U(-1/fan_in, 1/fan_in); deeper layers U(+-sqrt(6/fan_in)/w0).
    return 1.0 / m_in if first else np.sqrt(6.0 / m_in) / omega0


def _raw_layers(config: NetworkConfig, rng: np.random.Generator) -> list[LayerParams]:
    dims = config.layer_dims()
    last = len(dims) - 1
    layers = []
    for idx, (m_in, m_out) in enumerate(dims):
        first = idx == 0
        omega0 = config.omega0_first if first else config.omega0_hidden
        bound = _siren_w2_bound(m_in, omega0, first)
        W2 = rng.uniform(-bound, bound, (m_out, m_in))
        b2 = np.zeros(m_out)
        if config.layer_kind == "quadratic":
            W1 = rng.uniform(-INIT_EPS, INIT_EPS, (m_out, m_in))
            W3 = rng.uniform(-INIT_EPS, INIT_EPS, (m_out, m_in))
            b3 = rng.uniform(-INIT_EPS, INIT_EPS, m_out)
            b1 = np.ones(m_out)
        else:
            W1 = np.zeros((m_out, m_in))
            W3 = np.zeros((m_out, m_in))
            b3 = np.zeros(m_out)
            b1 = np.ones(m_out)
        layers.append(LayerParams(W1, b1, W2, b2, W3, b3, kind=config.layer_kind,
                                  activation="identity" if idx == last else "sine",
                                  omega0=omega0))
    return layers


def _compress_first_layer_frequencies(layer: LayerParams) -> None:
    # Rescale each first-layer row so the pre-activation omega0 * w . x stays
    # within a quarter period over the 1.1-box: the sine features are then
    # monotone and smooth, which is what lets the final-layer regression
    # reach a radial target.
    W2 = layer.W2
    worst = layer.omega0 * 1.1 * np.abs(W2).sum(axis=1)
    factor = (np.pi / 2.0) / np.maximum(worst, 1e-12)
    W2 *= factor[:, None]


def _randomize_first_layer_phases(layer: LayerParams, rng: np.random.Generator) -> None:
    # sin(omega0 * (W2 x + b2)): without a phase every feature is odd in x
    # and no combination of them can represent the even target |x| - r.
    layer.b2[:] = rng.uniform(-np.pi, np.pi, layer.m_out) / layer.omega0


def _spread_first_layer_frequencies(layer: LayerParams) -> None:
    # Split the first layer's rows into four blocks: the first stays
    # low-frequency, the rest are scaled by 2, 4, 8.
    W2 = layer.W2
    rows = W2.shape[0]
    q = max(rows // 4, 1)
    for blk, factor in enumerate((2.0, 4.0, 8.0), start=1):
        lo = blk * q
        hi = rows if blk == 3 else min((blk + 1) * q, rows)
        W2[lo:hi] *= factor


def _regress_final_layer(layers: list[LayerParams], config: NetworkConfig,
                         rng: np.random.Generator) -> None:
    """Least-squares fit of the last layer onto the sphere SDF |x| - r.

    Makes the initial field an approximate sphere SDF (negative inside),
    which fixes the overall sign of the field; the training losses alone are
    even in u when no normals are supplied.
    """
    n = config.input_dim
    pts = rng.uniform(-1.1, 1.1, (_GEOM_FIT_POINTS, n))
    target = np.linalg.norm(pts, axis=1) - _GEOM_SPHERE_RADIUS

    # Features of the penultimate layer, running all but the final layer.
    z = pts
    pairs = sym_pairs(n)
    for layer in layers[:-1]:
        z, _, _ = _layer_forward(layer, z, None, None, pairs, order=0, cache=None)
    feats = np.concatenate([z, np.ones((len(pts), 1))], axis=1)
    # Truncated solve: near-degenerate feature directions would otherwise be
    # balanced with huge cancelling coefficients, a fragile starting point.
    sol, *_ = np.linalg.lstsq(feats, target, rcond=1e-3)
    layers[-1].W2[0, :] = sol[:-1]
    layers[-1].b2[0] = sol[-1]


def init(config: NetworkConfig, seed: int) -> NetworkParams:
    """Deterministic initialization.

    Quadratic kind: W1, W3, b3 ~ U(-1e-4, 1e-4), b1 = 1, so each neuron
    starts as an approximately linear neuron; the chosen scheme then shapes
    W2/b2. geometric_sine regresses the final layer onto a sphere SDF;
    multifreq_geometric additionally spreads first-layer frequencies over
    power-of-two bands.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    layers = _raw_layers(config, rng)
    if config.init_scheme in ("geometric_sine", "multifreq_geometric"):
        _compress_first_layer_frequencies(layers[0])
        _randomize_first_layer_phases(layers[0], rng)
        if config.init_scheme == "multifreq_geometric":
            _spread_first_layer_frequencies(layers[0])
        _regress_final_layer(layers, config, rng)
    return NetworkParams(layers, config)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_KIND_CODE = {"linear": 0, "quadratic": 1}
_ACT_CODE = {"sine": 0, "identity": 1}
_SCHEME_CODE = {s: i for i, s in enumerate(INIT_SCHEMES)}


def _write_array(fh, arr: Array) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh, shape) -> Array:
    count = int(np.prod(shape))
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise CheckpointError("truncated checkpoint file")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_params(params: NetworkParams, path_or_fh) -> None:
    """Write the documented binary layout.

    Header: magic "STEIK1", config fields; then per layer the row-major
    float64 little-endian arrays in the order W1, b1, W2, b2, W3, b3.
    """
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "wb") if own else path_or_fh
    try:
        cfg = params.config
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BBBII dd I",
                             cfg.input_dim,
                             _KIND_CODE[cfg.layer_kind],
                             _SCHEME_CODE[cfg.init_scheme],
                             cfg.hidden_layers,
                             cfg.hidden_width,
                             cfg.omega0_first,
                             cfg.omega0_hidden,
                             len(params.layers)))
        for layer in params.layers:
            fh.write(struct.pack("<IIBBd", layer.m_out, layer.m_in,
                                 _KIND_CODE[layer.kind], _ACT_CODE[layer.activation],
                                 layer.omega0))
            for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
                _write_array(fh, getattr(layer, name))
    finally:
        if own:
            fh.close()


def load_params(path_or_fh) -> NetworkParams:
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "rb") if own else path_or_fh
    try:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            if magic[:5] == CHECKPOINT_MAGIC[:5]:
                raise CheckpointError(f"unsupported checkpoint version {magic!r}")
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        header = fh.read(struct.calcsize("<BBBII dd I"))
        (input_dim, kind_code, scheme_code, hidden_layers, hidden_width,
         w0_first, w0_hidden, n_layers) = struct.unpack("<BBBII dd I", header)
        kind = LAYER_KINDS[kind_code] if kind_code < len(LAYER_KINDS) else None
        scheme = INIT_SCHEMES[scheme_code] if scheme_code < len(INIT_SCHEMES) else None
        if kind is None or scheme is None:
            raise CheckpointError("corrupt checkpoint header")
        config = NetworkConfig(input_dim=input_dim, hidden_layers=hidden_layers,
                               hidden_width=hidden_width, layer_kind=kind,
                               omega0_first=w0_first, omega0_hidden=w0_hidden,
                               init_scheme=scheme)
        layers = []
        for _ in range(n_layers):
            m_out, m_in, kc, ac, omega0 = struct.unpack("<IIBBd", fh.read(struct.calcsize("<IIBBd")))
            arrs = {}
            for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
                shape = (m_out, m_in) if name.startswith("W") else (m_out,)
                arrs[name] = _read_array(fh, shape)
            layers.append(LayerParams(kind=LAYER_KINDS[kc], activation=ACTIVATIONS[ac],
                                      omega0=omega0, **arrs))
        return NetworkParams(layers, config)
    finally:
        if own:
            fh.close()


def params_to_bytes(params: NetworkParams) -> bytes:
    buf = io.BytesIO()
    save_params(params, buf)
    return buf.getvalue()


def params_from_bytes(blob: bytes) -> NetworkParams:
    return load_params(io.BytesIO(blob))
