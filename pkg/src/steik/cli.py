"""Subcommand front-end: fit, evolve, extract, eval, gradcheck, ablate.

Only the standard library is imported at module level so that BLAS thread
counts can be pinned from --threads (or STEIK_THREADS) before NumPy loads.
Every artifact-producing run also writes a manifest with the fully resolved
configuration, the seed, and the package version, which is enough to replay
the run bit for bit.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure.
"""

import argparse
import dataclasses
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

GRADCHECK_TOL = 1e-3
# reported benchmark reference for the regularizer ablation, kept as CSV
# context (never asserted): symmetric Chamfer and Hausdorff on SRB scans
ABLATE_REFERENCE = ("# reference (reported SRB benchmark, L1/L1): "
                    "d_C=0.180 d_H=2.800")


def _pin_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _resolve_threads(flag) -> int:
    if flag is not None:
        n = int(flag)
    else:
        env = os.environ.get("STEIK_THREADS", "").strip()
        n = int(env) if env else (os.cpu_count() or 1)
    if n < 1:
        raise ValueError("thread count must be at least 1")
    return n


# ---------------------------------------------------------------------------
# config files and manifests
# ---------------------------------------------------------------------------

def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _apply_config_file(args, argv) -> None:
    """Fill args from a flat key=value file; explicit flags keep priority."""
    if getattr(args, "config", None) is None:
        return
    if not os.path.exists(args.config):
        raise FileNotFoundError(f"config file not found: {args.config}")
    with open(args.config) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{args.config}:{ln}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            dest = key.replace("-", "_")
            if not hasattr(args, dest) or dest in ("command", "config"):
                raise ValueError(f"{args.config}:{ln}: unknown key {key!r}")
            flag = "--" + dest.replace("_", "-")
            given = any(tok == flag or tok.startswith(flag + "=")
                        for tok in argv)
            if not given:
                setattr(args, dest, _coerce(val))


def _write_manifest(path: str, command: str, seed, config: dict) -> None:
    from . import __version__

    payload = {"command": command, "version": __version__,
               "seed": seed, "config": config}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _run_fit(args) -> int:
    from . import sampler, trainer
    from .fieldnet import NetworkConfig
    from .losses import LossWeights
    from .jetdiff import flatten_params
    from .trainer import AdamState

    if not os.path.exists(args.input):
        raise FileNotFoundError(f"input not found: {args.input}")
    pc = sampler.load_pointcloud(args.input)

    if args.preset == "custom":
        missing = [n for n in ("alpha_e", "alpha_m", "alpha_n")
                   if getattr(args, n) is None]
        if missing:
            flags = " ".join("--" + n.replace("_", "-") for n in missing)
            raise ValueError(f"custom preset requires explicit weights: {flags}")
        net = NetworkConfig(input_dim=pc.dim)
        cfg = trainer.TrainConfig(weights=LossWeights())
    else:
        net, cfg = trainer.preset(args.preset)
    if net.input_dim != pc.dim:
        net = dataclasses.replace(net, input_dim=pc.dim)

    # flag overrides on top of the expanded preset
    if args.net is not None:
        net = dataclasses.replace(net, layer_kind=args.net)
    if args.layers is not None:
        net = dataclasses.replace(net, hidden_layers=args.layers)
    if args.width is not None:
        net = dataclasses.replace(net, hidden_width=args.width)
    if args.init_scheme is not None:
        net = dataclasses.replace(net, init_scheme=args.init_scheme)
    if args.omega0 is not None:
        net = dataclasses.replace(net, omega0_first=args.omega0,
                                  omega0_hidden=args.omega0)

    w = cfg.weights
    for name in ("alpha_e", "alpha_m", "alpha_n", "alpha_l", "alpha_d",
                 "alpha_norm", "p_eik", "p_reg"):
        if getattr(args, name) is not None:
            setattr(w, name, getattr(args, name))
    if args.reg == "directional":
        w.alpha_d = 0.0
        if w.alpha_l == 0.0:
            w.alpha_l = 100.0
    elif args.reg == "divergence":
        w.alpha_l = 0.0
        if w.alpha_d == 0.0:
            w.alpha_d = 100.0
    elif args.reg == "none":
        w.alpha_l = w.alpha_d = 0.0

    for name in ("iterations", "lr", "seed", "surface_batch",
                 "offsurface_batch", "checkpoint_every"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.anneal_start is not None:
        cfg.schedule.start_iter = args.anneal_start
    if args.anneal_end is not None:
        cfg.schedule.end_iter = args.anneal_end

    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.bin")
    cfg.checkpoint_path = ckpt

    params, history = trainer.fit(pc, net, cfg)
    if not os.path.exists(ckpt):               # --iterations 0: init only
        n = flatten_params(params).size
        trainer.save_checkpoint(params, AdamState.zeros(n), 0, ckpt)
    history.save_csv(os.path.join(args.out_dir, "history.csv"))

    tf = history.transform
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"), "fit", cfg.seed,
        {"input": args.input, "preset": args.preset, "reg": args.reg,
         "net": dataclasses.asdict(net), "train": dataclasses.asdict(cfg),
         "transform": {"center": [float(c) for c in tf.center],
                       "scale": float(tf.scale)}})
    final = history.total[-1] if len(history) else float("nan")
    print(f"fit: {cfg.iterations} iterations, final loss {final:.6g}, "
          f"checkpoint {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evolve
# ---------------------------------------------------------------------------

def _build_shape(args):
    from . import pdeflow

    if args.shape == "circle":
        return pdeflow.Circle(args.radius)
    if args.shape == "square":
        return pdeflow.Square(args.half_width)
    if args.shape == "snowflake":
        return pdeflow.Snowflake(order=args.order, radius=args.radius)
    if args.shape == "polygon":
        if not args.vertices:
            raise ValueError("polygon shape requires --vertices x,y;x,y;...")
        verts = tuple(tuple(float(c) for c in pair.split(","))
                      for pair in args.vertices.split(";"))
        return pdeflow.Polygon(verts)
    raise ValueError(f"unknown shape {args.shape!r}")


def _run_evolve(args) -> int:
    from . import pdeflow

    shape = _build_shape(args)
    h = args.extent / args.n
    perturb = None
    if args.perturb_amplitude is not None:
        perturb = pdeflow.GridPerturb(args.perturb_amplitude,
                                      args.perturb_wavenumber,
                                      args.perturb_seed)
    grid = pdeflow.init_grid_sdf(shape, args.n, h, perturb=perturb,
                                 boundary=args.boundary)
    if args.scale != 1.0:
        grid = grid.with_values(args.scale * grid.values)

    kw = dict(alpha_e=args.alpha_e, alpha_d=args.alpha_d, alpha_l=args.alpha_l,
              p_eik=args.p, p_reg=args.p_reg, sgn_slope=args.sgn_slope,
              on_cfl=args.on_cfl)
    dt = args.dt
    if dt is None:
        gate = pdeflow.combined_cfl(grid, pdeflow.FlowConfig(dt=1.0, **kw))
        if not (0.0 < gate < float("inf")):
            raise ValueError("stability gate is degenerate; pass --dt")
        dt = 0.9 * gate
    cfg = pdeflow.FlowConfig(dt=dt, **kw)

    result = pdeflow.evolve(grid, cfg, args.steps,
                            snapshot_every=args.snapshot_every)

    os.makedirs(args.out_dir, exist_ok=True)
    for step, g, _ in result.snapshots:
        pdeflow.save_pgm(g, os.path.join(args.out_dir, f"step_{step:06d}.pgm"))
    pdeflow.save_diagnostics_csv(
        result, os.path.join(args.out_dir, "diagnostics.csv"))
    pdeflow.save_grid_csv(result.snapshots[-1][1],
                          os.path.join(args.out_dir, "grid_final.csv"))
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"), "evolve",
        args.perturb_seed,
        {"shape": args.shape, "n": args.n, "extent": args.extent,
         "scale": args.scale, "steps": args.steps,
         "snapshot_every": args.snapshot_every, "boundary": args.boundary,
         "perturb_amplitude": args.perturb_amplitude,
         "perturb_wavenumber": args.perturb_wavenumber,
         "flow": dataclasses.asdict(cfg)})
    print(f"evolve: {args.steps} steps, {len(result.snapshots)} snapshots, "
          f"diverged_at={result.diverged_at}")
    return EXIT_OK if result.diverged_at is None else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def _run_extract(args) -> int:
    from . import extract as ex

    if (args.checkpoint is None) == (args.grid is None):
        raise ValueError("pass exactly one of --checkpoint or --grid")

    if args.grid is not None:
        import numpy as np

        if not os.path.exists(args.grid):
            raise FileNotFoundError(f"grid not found: {args.grid}")
        vals = np.loadtxt(args.grid, delimiter=",", ndmin=2)
        h = args.h if args.h is not None else 2.0 / max(vals.shape)
        dom = [(-(n - 1) / 2.0 * h, (n - 1) / 2.0 * h) for n in vals.shape]
        res = args.resolution or max(vals.shape) - 1
        contour = ex.marching_squares(ex.grid_field(vals, dom), dom, res)
        ex.save_contour_csv(contour, args.out)
        summary = f"{len(contour.polylines)} polylines, {contour.n_points} points"
        source = {"grid": args.grid, "h": h}
    else:
        from . import trainer, fieldnet

        if not os.path.exists(args.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        params, _, _ = trainer.load_checkpoint(args.checkpoint)
        dim = params.config.input_dim
        field = lambda P: fieldnet.forward_batch(params, P)
        dom = (-args.domain, args.domain)
        if dim == 3:
            res = args.resolution or ex.DEFAULT_RES_3D
            mesh = ex.marching_cubes(field, dom, res)
            ex.save_obj(mesh, args.out)
            summary = f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles"
        elif dim == 2:
            res = args.resolution or ex.DEFAULT_RES_2D
            contour = ex.marching_squares(field, dom, res)
            ex.save_contour_csv(contour, args.out)
            summary = (f"{len(contour.polylines)} polylines, "
                       f"{contour.n_points} points")
        else:
            raise ValueError("extraction needs a 2D or 3D field")
        source = {"checkpoint": args.checkpoint, "domain": args.domain}

    _write_manifest(args.out + ".manifest.json", "extract", None,
                    {**source, "resolution": res, "out": args.out})
    print(f"extract: {summary} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_points_file(path):
    import numpy as np

    if not os.path.exists(path):
        raise FileNotFoundError(f"points not found: {path}")
    with open(path) as fh:
        first = fh.readline()
    delim = "," if "," in first else None
    return np.loadtxt(path, delimiter=delim, ndmin=2)


def _run_eval(args) -> int:
    import numpy as np

    from . import extract as ex, metrics

    if (args.gt_mesh is None) == (args.gt_points is None):
        raise ValueError("pass exactly one of --gt-mesh or --gt-points")
    if not os.path.exists(args.mesh):
        raise FileNotFoundError(f"mesh not found: {args.mesh}")
    mesh = ex.load_obj(args.mesh)
    A = metrics.sample_mesh_points(mesh, args.samples,
                                   np.random.default_rng(args.seed))
    gt_mesh = None
    if args.gt_mesh is not None:
        if not os.path.exists(args.gt_mesh):
            raise FileNotFoundError(f"mesh not found: {args.gt_mesh}")
        gt_mesh = ex.load_obj(args.gt_mesh)
        B = metrics.sample_mesh_points(gt_mesh, args.samples,
                                       np.random.default_rng(args.seed))
    else:
        B = _load_points_file(args.gt_points)

    occupancy = None
    if args.occupancy_samples > 0:
        if gt_mesh is None:
            raise ValueError("occupancy IoU requires --gt-mesh")
        lo = np.minimum(mesh.vertices.min(0), gt_mesh.vertices.min(0))
        hi = np.maximum(mesh.vertices.max(0), gt_mesh.vertices.max(0))
        pad = 0.05 * (hi - lo)
        rng = np.random.default_rng(args.seed + 1)
        pts = rng.uniform(lo - pad, hi + pad,
                          size=(args.occupancy_samples, 3))
        occupancy = metrics.iou(metrics.mesh_contains(mesh, pts),
                                metrics.mesh_contains(gt_mesh, pts))

    report = metrics.MetricReport(
        d_C=metrics.chamfer(A, B),
        d_H=metrics.hausdorff(A, B),
        d_C_one_sided=metrics.chamfer_one_sided(A, B),
        d_H_one_sided=metrics.hausdorff_one_sided(A, B),
        squared_chamfer=metrics.squared_chamfer(A, B),
        iou=occupancy)
    metrics.save_report_csv(report, args.out)
    _write_manifest(args.out + ".manifest.json", "eval", args.seed,
                    {"mesh": args.mesh, "gt_mesh": args.gt_mesh,
                     "gt_points": args.gt_points, "samples": args.samples,
                     "occupancy_samples": args.occupancy_samples,
                     "out": args.out})
    print(metrics.format_report(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

_TERM_WEIGHT = {"eikonal": "alpha_e", "manifold": "alpha_m",
                "nonmanifold": "alpha_n", "directional": "alpha_l",
                "divergence": "alpha_d", "normal": "alpha_norm"}
_TERM_SCALE = {"alpha_e": 50.0, "alpha_m": 2000.0, "alpha_n": 100.0,
               "alpha_l": 100.0, "alpha_d": 100.0, "alpha_norm": 100.0}


def gradcheck_weights(terms: str):
    """LossWeights with the named comma-separated terms active, or "all"."""
    from .losses import LOSS_TERMS, LossWeights

    names = LOSS_TERMS if terms == "all" else \
        tuple(t.strip() for t in terms.split(","))
    w = LossWeights(alpha_e=0.0, alpha_m=0.0, alpha_n=0.0, alpha_l=0.0,
                    alpha_d=0.0, alpha_norm=0.0)
    for name in names:
        if name not in _TERM_WEIGHT:
            raise ValueError(f"unknown loss term {name!r}")
        field = _TERM_WEIGHT[name]
        setattr(w, field, _TERM_SCALE[field])
    return w


def _run_gradcheck(args) -> int:
    import numpy as np

    from . import fieldnet, jetdiff
    from .losses import SampleBatch

    net = fieldnet.NetworkConfig(input_dim=3, hidden_layers=args.layers,
                                 hidden_width=args.width,
                                 layer_kind=args.net)
    params = fieldnet.init(net, args.seed)
    rng = np.random.default_rng(args.seed)
    surf = rng.standard_normal((8, 3))
    surf /= np.linalg.norm(surf, axis=1, keepdims=True)
    nrm = surf.copy()
    surf *= 0.5
    off = rng.uniform(-1.0, 1.0, (8, 3))
    batch = SampleBatch(surf, None, off, None, nrm)
    weights = gradcheck_weights(args.terms)
    err = jetdiff.check_grad(params, batch, weights, step=args.step,
                             n_coords=args.coords, seed=args.seed)
    print(f"max relative error = {err:.3g}")
    print("config: " + json.dumps({"net": args.net, "layers": args.layers,
                                   "width": args.width, "seed": args.seed,
                                   "terms": args.terms, "step": args.step}))
    return EXIT_OK if err < GRADCHECK_TOL else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _parse_matrix(spec: str):
    axes = {}
    for part in spec.split(";"):
        if "=" not in part:
            raise ValueError(f"bad matrix spec {spec!r}")
        key, vals = (s.strip() for s in part.split("=", 1))
        norms = []
        for v in vals.split(","):
            v = v.strip().upper()
            if v not in ("L1", "L2"):
                raise ValueError(f"matrix norms must be L1 or L2, got {v!r}")
            norms.append(1 if v == "L1" else 2)
        axes[key] = norms
    if set(axes) != {"eik", "reg"}:
        raise ValueError("matrix spec must name both eik= and reg=")
    return axes["eik"], axes["reg"]


def torus_fixture(k: int, seed: int):
    """Point cloud with normals on an analytic torus, ring 0.5, tube 0.2."""
    import numpy as np

    from .sampler import PointCloud

    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 2 * np.pi, k)
    v = rng.uniform(0.0, 2 * np.pi, k)
    ring = np.stack([np.cos(u), np.sin(u), np.zeros(k)], axis=1)
    axis = np.array([0.0, 0.0, 1.0])
    pts = (0.5 + 0.2 * np.cos(v))[:, None] * ring \
        + 0.2 * np.sin(v)[:, None] * axis
    nrm = np.cos(v)[:, None] * ring + np.sin(v)[:, None] * axis
    return PointCloud(pts, nrm)


def _run_ablate(args) -> int:
    import numpy as np

    from . import trainer
    from .fieldnet import NetworkConfig
    from .losses import AnnealSchedule, LossWeights

    eik_norms, reg_norms = _parse_matrix(args.matrix)
    if args.shape != "torus":
        raise ValueError(f"unknown ablation fixture {args.shape!r}")
    pc = torus_fixture(args.points, args.seed)

    net = NetworkConfig(input_dim=3, hidden_layers=args.net_layers,
                        hidden_width=args.net_width,
                        layer_kind="quadratic",
                        init_scheme="multifreq_geometric")
    rows = []
    for pe in eik_norms:
        for pr in reg_norms:
            cfg = trainer.TrainConfig(
                iterations=args.iterations, lr=1e-4,
                surface_batch=min(512, args.points), offsurface_batch=512,
                seed=args.seed,
                weights=LossWeights(alpha_e=50, alpha_m=2000, alpha_n=100,
                                    alpha_l=0.0, alpha_d=100.0,
                                    p_eik=pe, p_reg=pr),
                schedule=AnnealSchedule(max(1, args.iterations // 3),
                                        max(2, 2 * args.iterations // 3)))
            _, history = trainer.fit(pc, net, cfg)
            total = history.total[-1] if len(history) else float("nan")
            eik = history.terms["eikonal"][-1] if len(history) else float("nan")
            div = history.terms["divergence"][-1] if len(history) else float("nan")
            finite = bool(np.isfinite([total, eik, div]).all())
            rows.append((pe, pr, total, eik, div, finite))

    with open(args.out, "w") as fh:
        fh.write(ABLATE_REFERENCE + "\n")
        fh.write("eik,reg,final_total,final_eikonal,final_divergence,finite\n")
        for pe, pr, total, eik, div, finite in rows:
            fh.write(f"L{pe},L{pr},{total:.10g},{eik:.10g},{div:.10g},"
                     f"{str(finite).lower()}\n")
    _write_manifest(args.out + ".manifest.json", "ablate", args.seed,
                    {"matrix": args.matrix, "shape": args.shape,
                     "points": args.points, "iterations": args.iterations,
                     "net_layers": args.net_layers,
                     "net_width": args.net_width, "out": args.out})
    for pe, pr, total, _, _, finite in rows:
        print(f"ablate L{pe}/L{pr}: final_total={total:.6g} finite={finite}")
    return EXIT_OK if all(r[5] for r in rows) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="steik",
        description="SDF field fitting, flow simulation, extraction, and "
                    "evaluation")
    p.add_argument("--threads", type=int, default=None,
                   help="worker/BLAS thread count (default: STEIK_THREADS "
                        "or available parallelism)")
    sub = p.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="train a field network on a point cloud")
    fit.add_argument("--input", required=True)
    fit.add_argument("--preset", default="srb",
                     choices=("srb", "shapenet", "scene", "custom"))
    fit.add_argument("--net", choices=("linear", "quadratic"))
    fit.add_argument("--reg", choices=("directional", "divergence", "none"))
    fit.add_argument("--out-dir", required=True)
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--lr", type=float)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--layers", type=int)
    fit.add_argument("--width", type=int)
    fit.add_argument("--omega0", type=float)
    fit.add_argument("--init-scheme")
    fit.add_argument("--surface-batch", type=int)
    fit.add_argument("--offsurface-batch", type=int)
    fit.add_argument("--checkpoint-every", type=int)
    for name in ("alpha-e", "alpha-m", "alpha-n", "alpha-l", "alpha-d",
                 "alpha-norm"):
        fit.add_argument("--" + name, type=float)
    fit.add_argument("--p-eik", type=int)
    fit.add_argument("--p-reg", type=int)
    fit.add_argument("--anneal-start", type=int)
    fit.add_argument("--anneal-end", type=int)
    fit.add_argument("--config")
    fit.set_defaults(run=_run_fit)

    ev = sub.add_parser("evolve", help="run a grid flow from a shape SDF")
    ev.add_argument("--shape", default="circle",
                    choices=("circle", "square", "snowflake", "polygon"))
    ev.add_argument("--radius", type=float, default=0.5)
    ev.add_argument("--half-width", type=float, default=0.5)
    ev.add_argument("--order", type=int, default=3)
    ev.add_argument("--vertices")
    ev.add_argument("--n", type=int, default=128)
    ev.add_argument("--extent", type=float, default=2.2)
    ev.add_argument("--scale", type=float, default=1.0)
    ev.add_argument("--boundary", default="neumann",
                    choices=("periodic", "neumann"))
    ev.add_argument("--alpha-e", type=float, default=0.0)
    ev.add_argument("--alpha-d", type=float, default=0.0)
    ev.add_argument("--alpha-l", type=float, default=0.0)
    ev.add_argument("--p", type=int, default=2)
    ev.add_argument("--p-reg", type=int, default=2)
    ev.add_argument("--sgn-slope", type=float, default=100.0)
    ev.add_argument("--dt", type=float)
    ev.add_argument("--on-cfl", default="warn", choices=("warn", "abort"))
    ev.add_argument("--steps", type=int, default=100)
    ev.add_argument("--snapshot-every", type=int, default=1)
    ev.add_argument("--perturb-amplitude", type=float)
    ev.add_argument("--perturb-wavenumber", type=int, default=8)
    ev.add_argument("--perturb-seed", type=int)
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--config")
    ev.set_defaults(run=_run_evolve)

    ex = sub.add_parser("extract", help="extract the zero level set")
    ex.add_argument("--checkpoint")
    ex.add_argument("--grid")
    ex.add_argument("--resolution", type=int)
    ex.add_argument("--domain", type=float, default=1.2,
                    help="half-width of the cube sampled around a network")
    ex.add_argument("--h", type=float,
                    help="grid spacing for --grid inputs")
    ex.add_argument("--out", required=True)
    ex.add_argument("--config")
    ex.set_defaults(run=_run_extract)

    ev2 = sub.add_parser("eval", help="distances and IoU between surfaces")
    ev2.add_argument("--mesh", required=True)
    ev2.add_argument("--gt-mesh")
    ev2.add_argument("--gt-points")
    ev2.add_argument("--samples", type=int, default=30000)
    ev2.add_argument("--occupancy-samples", type=int, default=0)
    ev2.add_argument("--seed", type=int, default=0)
    ev2.add_argument("--out", required=True)
    ev2.add_argument("--config")
    ev2.set_defaults(run=_run_eval)

    gc = sub.add_parser("gradcheck",
                        help="analytic vs finite-difference gradients")
    gc.add_argument("--net", default="quadratic",
                    choices=("linear", "quadratic"))
    gc.add_argument("--layers", type=int, default=3)
    gc.add_argument("--width", type=int, default=16)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--coords", type=int, default=100)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--terms", default="all")
    gc.add_argument("--config")
    gc.set_defaults(run=_run_gradcheck)

    ab = sub.add_parser("ablate",
                        help="loss-norm ablation matrix on a torus fixture")
    ab.add_argument("--matrix", default="eik=L1,L2;reg=L1,L2")
    ab.add_argument("--shape", default="torus")
    ab.add_argument("--points", type=int, default=2000)
    ab.add_argument("--iterations", type=int, default=200)
    ab.add_argument("--net-layers", type=int, default=2)
    ab.add_argument("--net-width", type=int, default=24)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--out", required=True)
    ab.add_argument("--config")
    ab.set_defaults(run=_run_ablate)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _pin_threads(_resolve_threads(args.threads))
        _apply_config_file(args, argv)
        # exception types come in lazily, after the thread pin above
        from .jetdiff import NonFiniteLossError
        from .pdeflow import CFLViolation, FlowDiverged
        from .trainer import TrainDiverged
        numeric = (TrainDiverged, FlowDiverged, CFLViolation,
                   NonFiniteLossError)
        try:
            return args.run(args)
        except numeric as err:
            print(f"steik {args.command}: {err}", file=sys.stderr)
            return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        print(f"steik {args.command}: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"steik {args.command}: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"steik {args.command}: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
