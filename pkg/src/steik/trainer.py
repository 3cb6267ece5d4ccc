"""Fitting loop: Adam on the combined loss over freshly sampled batches.

Reproducibility contract: the batch RNG for iteration i is an independent
stream spawned as SeedSequence(entropy=seed, spawn_key=(i,)), so a run that
resumes from a checkpoint at iteration k replays exactly the batches a
straight-through run would have seen. Combined with the deterministic
reverse sweep this makes resume bitwise equivalent, which the tests assert.

Checkpoints are the network parameter block (fieldnet layout) followed by an
optimizer block: magic "STEIKOP1", the iteration to resume at, the Adam step
counter, and the first/second moment vectors in flat trainable order.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fieldnet
from .fieldnet import Array, CheckpointError, NetworkConfig, NetworkParams
from .jetdiff import NonFiniteLossError, assign_params, flatten_params, grad_loss
from .losses import AnnealSchedule, LossWeights, SampleBatch
from .sampler import PointCloud, normalize, sample_surface, sample_uniform

OPT_MAGIC = b"STEIKOP1"

HISTORY_COLUMNS = ("iter", "total", "eik", "manifold", "nonmanifold",
                   "directional", "divergence")
_TERM_KEYS = ("eikonal", "manifold", "nonmanifold", "directional",
              "divergence")


class TrainDiverged(RuntimeError):
    """Loss went non-finite; carries the iteration and offending term."""

    def __init__(self, iteration: int, term: str):
        super().__init__(f"non-finite loss at iteration {iteration} ({term})")
        self.iteration = iteration
        self.term = term


@dataclass
class TrainConfig:
    iterations: int = 10_000
    lr: float = 1e-4
    surface_batch: int = 15_000
    offsurface_batch: int = 15_000
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    seed: int = 0
    checkpoint_every: int = 0          # 0 disables periodic checkpoints
    checkpoint_path: Optional[str] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.surface_batch <= 0 or self.offsurface_batch <= 0:
            raise ValueError("batch sizes must be positive")


@dataclass
class TrainHistory:
    """Per-iteration loss records plus the normalization used for the run."""

    iters: list = field(default_factory=list)
    total: list = field(default_factory=list)
    terms: dict = field(default_factory=lambda: {k: [] for k in _TERM_KEYS})
    transform: object = None

    def append(self, it: int, total: float, breakdown: dict):
        self.iters.append(int(it))
        self.total.append(float(total))
        for k in _TERM_KEYS:
            self.terms[k].append(float(breakdown[k]))

    def __len__(self):
        return len(self.iters)

    def save_csv(self, path: str):
        with open(path, "w") as fh:
            fh.write(",".join(HISTORY_COLUMNS) + "\n")
            for i in range(len(self.iters)):
                row = [str(self.iters[i]), f"{self.total[i]:.10g}"]
                row += [f"{self.terms[k][i]:.10g}" for k in _TERM_KEYS]
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Array
    v: Array
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: Array, grad: Array, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update on a flat parameter vector.

    Functional: returns (new theta, new state) and leaves the inputs alone.
    """
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_theta, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: NetworkParams, state: AdamState, iteration: int,
                    path: str):
    """Parameter block plus optimizer block; bitwise round-trippable."""
    with open(path, "wb") as fh:
        fieldnet.save_params(params, fh)
        fh.write(OPT_MAGIC)
        fh.write(struct.pack("<QQQ", iteration, state.t, state.m.size))
        fh.write(np.ascontiguousarray(state.m, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.v, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Returns (params, adam state, iteration to resume at)."""
    with open(path, "rb") as fh:
        params = fieldnet.load_params(fh)
        magic = fh.read(len(OPT_MAGIC))
        if magic != OPT_MAGIC:
            if magic[:7] == OPT_MAGIC[:7]:
                raise CheckpointError(f"unsupported optimizer block version {magic!r}")
            raise CheckpointError(f"bad optimizer block magic {magic!r}")
        head = fh.read(struct.calcsize("<QQQ"))
        if len(head) != struct.calcsize("<QQQ"):
            raise CheckpointError("truncated checkpoint file")
        iteration, t, n = struct.unpack("<QQQ", head)
        raw = fh.read(2 * n * 8)
        if len(raw) != 2 * n * 8:
            raise CheckpointError("truncated checkpoint file")
        m = np.frombuffer(raw[:n * 8], dtype="<f8").astype(np.float64)
        v = np.frombuffer(raw[n * 8:], dtype="<f8").astype(np.float64)
    return params, AdamState(m, v, int(t)), int(iteration)


# ---------------------------------------------------------------------------
# fitting loop
# ---------------------------------------------------------------------------

def _iteration_rng(seed: int, it: int) -> np.random.Generator:
    # one independent stream per iteration, so resume replays exactly
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(it,)))


def fit(pc: PointCloud, net_config: NetworkConfig, cfg: TrainConfig,
        resume_from: Optional[str] = None):
    """Normalize the cloud, then run Adam on the combined loss.

    Returns (final parameters, history). The cloud is normalized internally
    (centroid zero, max norm one) and the transform is recorded on the
    history. With resume_from, parameters and optimizer state are restored
    and the loop continues at the stored iteration; histories then cover
    only the iterations actually run.
    """
    pc_norm, tf, domain = normalize(pc)
    use_normals = pc_norm.normals is not None and cfg.weights.alpha_norm > 0

    if resume_from is not None:
        params, state, start = load_checkpoint(resume_from)
        theta = flatten_params(params)
        if state.m.size != theta.size:
            raise CheckpointError("optimizer state length does not match network")
    else:
        params = fieldnet.init(net_config, cfg.seed)
        theta = flatten_params(params)
        state = AdamState.zeros(theta.size)
        start = 0

    history = TrainHistory(transform=tf)
    betas = (cfg.adam_beta1, cfg.adam_beta2)

    for it in range(start, cfg.iterations):
        rng = _iteration_rng(cfg.seed, it)
        if use_normals:
            surf, nrm = sample_surface(pc_norm, cfg.surface_batch, rng,
                                       return_normals=True)
        else:
            surf, nrm = sample_surface(pc_norm, cfg.surface_batch, rng), None
        off = sample_uniform(domain, cfg.offsurface_batch, rng)
        batch = SampleBatch(surf, None, off, None, nrm)
        try:
            loss, grad, parts = grad_loss(params, batch, cfg.weights, it,
                                          cfg.schedule, return_breakdown=True)
        except NonFiniteLossError as err:
            raise TrainDiverged(it, err.term) from err
        if not np.isfinite(loss):
            raise TrainDiverged(it, "total")
        theta, state = adam_step(theta, grad.flat(), state, cfg.lr, betas,
                                 cfg.adam_eps)
        assign_params(params, theta)
        history.append(it, loss, parts)
        if cfg.checkpoint_path and cfg.checkpoint_every > 0 \
                and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(params, state, it + 1, cfg.checkpoint_path)

    if cfg.checkpoint_path and cfg.iterations > start:
        save_checkpoint(params, state, cfg.iterations, cfg.checkpoint_path)
    return params, history


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset(name: str):
    """(NetworkConfig, TrainConfig) for a named benchmark protocol.

    srb: surface reconstruction benchmark protocol; shapenet: same loop with
    a heavier manifold weight and slower learning rate; scene: large linear
    network, long schedule, for room-scale scans. Returned objects are fresh
    and safe to mutate.
    """
    if name == "srb":
        net = NetworkConfig(input_dim=3, hidden_layers=5, hidden_width=128,
                            layer_kind="quadratic",
                            init_scheme="multifreq_geometric")
        cfg = TrainConfig(iterations=10_000, lr=1e-4,
                          surface_batch=15_000, offsurface_batch=15_000,
                          weights=LossWeights(alpha_e=50, alpha_m=2000,
                                              alpha_n=100, alpha_l=100),
                          schedule=AnnealSchedule(2_000, 4_000))
    elif name == "shapenet":
        net = NetworkConfig(input_dim=3, hidden_layers=5, hidden_width=128,
                            layer_kind="quadratic",
                            init_scheme="multifreq_geometric")
        cfg = TrainConfig(iterations=10_000, lr=5e-5,
                          surface_batch=15_000, offsurface_batch=15_000,
                          weights=LossWeights(alpha_e=50, alpha_m=5000,
                                              alpha_n=100, alpha_l=100),
                          schedule=AnnealSchedule(2_000, 4_000))
    elif name == "scene":
        net = NetworkConfig(input_dim=3, hidden_layers=8, hidden_width=256,
                            layer_kind="linear", init_scheme="siren_uniform")
        cfg = TrainConfig(iterations=100_000, lr=8e-6,
                          surface_batch=15_000, offsurface_batch=15_000,
                          weights=LossWeights(alpha_e=50, alpha_m=5000,
                                              alpha_n=100, alpha_l=10),
                          schedule=AnnealSchedule(10_000, 30_000))
    else:
        raise ValueError(f"unknown preset {name!r}")
    return net, cfg


PRESET_NAMES = ("srb", "shapenet", "scene")
