"""Differentiable projective-dynamics simulation toolkit.

Forward implicit solver for projective elasticity with bindings and
smoothed-NCP frictional contact, an analytic adjoint backward pass, Krylov
solvers with structure-exploiting preconditioners, and a gradient-descent
identification harness with a finite-difference oracle.
"""

from .core import (
    Scene,
    SimState,
    MaterialParams,
    BindingSpec,
    HalfSpace,
    Sphere,
    SparseMat,
    SystemMatrix,
    assemble_system_matrix,
    predict,
    spmv,
    spmv_transpose,
    load_scene,
    save_scene,
)
from .forward import forward_step, rollout, ForwardConfig
from .adjoint import (
    assemble_adjoint_operator,
    solve_adjoint,
    backprop_step,
    backprop_rollout,
    loss_final_state,
)

__all__ = [
    "Scene",
    "SimState",
    "MaterialParams",
    "BindingSpec",
    "HalfSpace",
    "Sphere",
    "SparseMat",
    "SystemMatrix",
    "assemble_system_matrix",
    "predict",
    "spmv",
    "spmv_transpose",
    "load_scene",
    "save_scene",
    "forward_step",
    "rollout",
    "ForwardConfig",
    "assemble_adjoint_operator",
    "solve_adjoint",
    "backprop_step",
    "backprop_rollout",
    "loss_final_state",
]
