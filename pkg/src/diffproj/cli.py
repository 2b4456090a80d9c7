"""Command-line entry point: simulate, gradcheck, identify, bench-solver.

Every command writes its outputs plus a RunManifest JSON into --out.
Exit codes: 0 ok, 2 input error, 3 solver failure, 4 optimization
divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np
import scipy.sparse.linalg as spla

from . import adjoint as aj
from . import core
from . import forward as fw
from . import ident
from . import linsolve


EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4


def _variable_value(scene, name):
    """Current value of a named scalar parameter (0 for pure controls)."""
    if name == "stiffness":
        return next((m.stiffness for m in scene.materials
                     if m.model == "arap"), 0.0)
    if name == "E":
        return next((m.E for m in scene.materials
                     if m.model == "neohookean"), 0.0)
    if name == "nu":
        return next((m.nu for m in scene.materials
                     if m.model == "neohookean"), 0.0)
    if name == "mu":
        return scene.colliders[0].mu if scene.colliders else 0.0
    if name == "Eb":
        return scene.bindings[0].compliance if scene.bindings else 0.0
    if name == "db_z":
        return scene.bindings[0].target[2] if scene.bindings else 0.0
    return 0.0   # fext_*, v0_*


def write_manifest(args, out_dir, command):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(cfg, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "scene_path": getattr(args, "scene", None),
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "output_dir": out_dir,
        "seed": getattr(args, "seed", 0),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def _load_scene(args):
    if not os.path.exists(args.scene):
        raise FileNotFoundError(f"scene file not found: {args.scene}")
    scene = core.load_scene(args.scene)
    if args.dt_override is not None:
        scene.h = args.dt_override
    if args.eps2_override is not None:
        scene.eps_fb = args.eps2_override
    return scene


def cmd_simulate(args):
    try:
        scene = _load_scene(args)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    try:
        states, caches = fw.rollout(scene, scene.rest_state(), args.steps)
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    with open(os.path.join(args.out, "trajectory.csv"), "w",
              newline="") as f:
        f.write("# schema: trajectory v1\n")
        wr = csv.writer(f)
        wr.writerow(["step", "vid", "x", "y", "z"])
        for s, st in enumerate(states):
            pos = st.q.reshape(-1, 3)
            for vid in range(pos.shape[0]):
                wr.writerow([s, vid] + [f"{c:.17g}" for c in pos[vid]])
    summaries = [{"step": i + 1,
                  "iterations": c.report.iterations,
                  "converged": c.report.converged,
                  "final_residual": c.report.residual_history[-1],
                  "n_contacts": len(c.contacts)}
                 for i, c in enumerate(caches)]
    with open(os.path.join(args.out, "forward.json"), "w") as f:
        json.dump(summaries, f, indent=1)
    write_manifest(args, args.out, "simulate")
    return EXIT_OK


def cmd_gradcheck(args):
    try:
        scene = _load_scene(args)
        variables = args.var.split(",")
        etas = [float(e) for e in args.eta.split(",")]
        for v in variables:
            if v not in ident.VARIABLES:
                raise ValueError(f"unknown variable {v!r}")
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    frictional = any(c.mu > 0 for c in scene.colliders)
    rows = []
    all_ok = True
    try:
        for var in variables:
            x0 = _variable_value(scene, var)
            prob = ident.OptProblem(scene=scene, horizon=args.steps,
                                    variable=var, init_value=x0,
                                    learning_rate=1.0, iterations=1)
            # target from a perturbed parameter so the loss is nonzero
            prob.target_value = x0 * 1.2 + 0.1
            _, g_ana = ident.rollout_loss(prob, x0, with_grad=True)
            flag = frictional and (var == "mu" or scene.colliders)
            for eta in etas:
                g_fd = ident.fd_gradient(prob, x0, eta)
                rel = abs(g_ana - g_fd) / (abs(g_fd) + 1e-12)
                rows.append([var, eta, g_ana, g_fd, rel, bool(flag)])
                if not flag and rel > args.tol:
                    all_ok = False
    except (RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="") as f:
        f.write("# schema: gradcheck v1\n")
        wr = csv.writer(f)
        wr.writerow(["var", "eta", "grad_ana", "grad_fd", "relerr",
                     "friction_flag"])
        for r in rows:
            wr.writerow([r[0], f"{r[1]:.17g}", f"{r[2]:.17g}",
                         f"{r[3]:.17g}", f"{r[4]:.17g}", r[5]])
    write_manifest(args, args.out, "gradcheck")
    return EXIT_OK if all_ok else EXIT_SOLVER


def cmd_identify(args):
    try:
        scene = _load_scene(args)
        names = [v.strip() for v in args.var.split(",") if v.strip()]
        init = [float(v) for v in str(args.init).split(",")]
        target = [float(v) for v in str(args.target).split(",")]
        if len(init) != len(names) or len(target) != len(names):
            raise ValueError("--init and --target need one value per "
                             "variable")
        scalar = len(names) == 1
        prob = ident.OptProblem(scene=scene, horizon=args.steps,
                                variable=args.var,
                                init_value=init[0] if scalar else init,
                                learning_rate=args.lr,
                                iterations=args.iters,
                                target_value=target[0] if scalar else target,
                                log_space=args.log_space,
                                fd_every=args.fd_every)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    try:
        trace = ident.optimize(prob)
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOLVER

    def columns(prefix):
        if scalar:
            return [prefix]
        return [f"{prefix}_{n}" for n in names]

    def cells(val):
        if val is None:
            return [""] * len(names)
        vals = np.atleast_1d(val)
        return [f"{v:.17g}" for v in vals]

    with open(os.path.join(args.out, "trace.csv"), "w", newline="") as f:
        f.write("# schema: trace v1\n")
        wr = csv.writer(f)
        wr.writerow(["iter", "loss"] + columns("param")
                    + columns("grad_ana") + columns("grad_fd"))
        for i in range(len(trace.losses)):
            wr.writerow([i, f"{trace.losses[i]:.17g}"]
                        + cells(trace.params[i])
                        + cells(trace.grads_ana[i])
                        + cells(trace.grads_fd[i]))
    rep = ident.metrics(trace)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(vars(rep), f, indent=1)
    write_manifest(args, args.out, "identify")
    if trace.diverged:
        print("error: optimization diverged (trace truncated)",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _bench_scene(regime):
    """Ill-conditioned scenes: stiff binding plus (optionally) heavy contact."""
    v, t = ident.box_tet_mesh(1, 1, 1, size=0.4, origin=(0.0, 0.0, -0.01))
    mu = {"contact_free": 0.0, "frictionless": 0.0, "frictional": 0.3}[regime]
    colliders = [] if regime == "contact_free" \
        else [core.HalfSpace([0, 0, 1], 0.0, mu=mu)]
    top = int(np.argmax(v[:, 2]))
    scene = core.Scene(
        vertices=v, elements=t,
        masses=core.lumped_masses(v, t, density=2000.0),
        materials=ident._material_list(len(t), model="arap", stiffness=1e5),
        bindings=[core.BindingSpec(top, v[top] + np.array([0, 0, 0.001]),
                                   compliance=1e-8)],
        colliders=colliders,
        h=0.01)
    return scene


def _bench_entries(scene, seed):
    """Solve one converged step's adjoint system with every combination."""
    sysmat = core.assemble_system_matrix(scene)
    state, report = fw.forward_step(scene, scene.rest_state(), sysmat)
    if not report.converged:
        raise RuntimeError("bench scene forward step did not converge")
    ws = aj.assemble_adjoint_operator(report.cache)
    rng = np.random.default_rng(seed)
    rhs = rng.standard_normal(scene.ndof)
    op = ws.apply if ws.symmetric else ws.apply_transpose

    import scipy.sparse as sp
    A_base = sp.csc_matrix(ws.A_elastic + sp.diags(ws.kb_diag))
    lu = spla.splu(A_base)
    h = scene.h
    J = np.zeros((3 * len(ws.contacts), scene.ndof))
    K_blocks = []
    for i, (cp, blk) in enumerate(zip(ws.contacts, ws.contact_blocks)):
        J[3 * i:3 * i + 3, cp.dofs] = cp.frame
        K_blocks.append(blk.Kc_local.T if not ws.symmetric else blk.Kc_local)

    def make_precond(name):
        if name == "none":
            return None
        if name == "jacobi":
            return linsolve.jacobi_precond(ws.diagonal())
        if name == "sparse_inverse":
            return linsolve.sparse_inverse_precond(A_base)
        if name == "woodbury":
            return linsolve.woodbury_precond(lu.solve, J, K_blocks, h)
        raise ValueError(name)

    cfg = linsolve.SolverConfig(tol=1e-10, max_iter=2000)
    method = "cg" if ws.symmetric else "gmres"
    entries = []
    for pname in ("none", "jacobi", "sparse_inverse", "woodbury"):
        pre = make_precond(pname)
        solver = linsolve.cg if method == "cg" else linsolve.gmres
        try:
            _, rep = solver(op, rhs, precond=pre, cfg=cfg)
        except RuntimeError:
            rep = linsolve.SolveReport(residual_history=[1.0], diverged=True)
        entries.append((method, pname, rep))
    _, rep = linsolve.semi_implicit(lu.solve, op, rhs, cfg)
    entries.append(("semi_implicit", "none", rep))
    return entries


def cmd_bench_solver(args):
    try:
        scene = _bench_scene(args.regime)
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    entries = _bench_entries(scene, args.seed)
    with open(os.path.join(args.out, "bench.csv"), "w", newline="") as f:
        f.write("# schema: bench v1\n")
        wr = csv.writer(f)
        wr.writerow(["solver", "precond", "iter", "relres", "wall_ms",
                     "diverged"])
        for solver, pname, rep in entries:
            wall_ms = rep.wall_time * 1e3
            for i, r in enumerate(rep.residual_history):
                wr.writerow([solver, pname, i, f"{r:.17g}",
                             f"{wall_ms:.3f}", rep.diverged])
    write_manifest(args, args.out, "bench-solver")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="diffproj")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scene_required=True):
        if scene_required:
            sp.add_argument("--scene", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--dt-override", type=float, default=None)
        sp.add_argument("--eps2-override", type=float, default=None)

    ps = sub.add_parser("simulate")
    common(ps)
    ps.add_argument("--steps", type=int, default=100)
    ps.set_defaults(func=cmd_simulate)

    pg = sub.add_parser("gradcheck")
    common(pg)
    pg.add_argument("--var", required=True)
    pg.add_argument("--eta", default="1e-4")
    pg.add_argument("--steps", type=int, default=5)
    pg.add_argument("--tol", type=float, default=1e-3)
    pg.set_defaults(func=cmd_gradcheck)

    pi = sub.add_parser("identify")
    common(pi)
    pi.add_argument("--var", required=True)
    pi.add_argument("--init", required=True)
    pi.add_argument("--target", required=True)
    pi.add_argument("--lr", type=float, required=True)
    pi.add_argument("--iters", type=int, default=100)
    pi.add_argument("--steps", type=int, default=10)
    pi.add_argument("--log-space", action="store_true")
    pi.add_argument("--fd-every", type=int, default=0)
    pi.set_defaults(func=cmd_identify)

    pb = sub.add_parser("bench-solver")
    common(pb, scene_required=False)
    pb.add_argument("--regime", required=True,
                    choices=["contact_free", "frictionless", "frictional"])
    pb.set_defaults(func=cmd_bench_solver)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
