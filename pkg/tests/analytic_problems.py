"""Hand-built LMI problems with analytically known optima.

Shared between the solver unit tests and the acceptance suite.  Each entry
builds a fresh `LmiProblem` and returns it together with the exact optimal
objective value.
"""
import math

import numpy as np

from replay_guard.sdp import LmiBlockBuilder, LmiProblem, MatrixVariable


def _min_t_offdiag():
    # min t s.t. [[t, 1], [1, t]] ⪰ 0  →  t* = 1
    t = MatrixVariable("t", 1, 1)
    b = LmiBlockBuilder(2, "corr")
    b.add_const(0, 1, [[1.0]])
    b.add_term(0, 0, t)
    b.add_term(1, 1, t)
    prob = LmiProblem([t], [b.build([t])], {"t": np.array([[1.0]])}, "minimize")
    return prob, 1.0


def _interval_lower():
    # min x s.t. diag(x − 1, 3 − x) ⪰ 0  →  x* = 1
    x = MatrixVariable("x", 1, 1)
    b = LmiBlockBuilder(2, "interval")
    b.add_const(0, 0, [[-1.0]])
    b.add_const(1, 1, [[3.0]])
    b.add_term(0, 0, x)
    b.add_term(1, 1, x, left=[[-1.0]])
    prob = LmiProblem([x], [b.build([x])], {"x": np.array([[1.0]])}, "minimize")
    return prob, 1.0


def _scalar_cap():
    # max tr(Γ) s.t. 2 − Γ ⪰ 0, Γ scalar  →  Γ* = 2
    g = MatrixVariable("Gamma", 1, 1)
    b = LmiBlockBuilder(1, "cap")
    b.add_const(0, 0, [[2.0]])
    b.add_term(0, 0, g, left=[[-1.0]])
    prob = LmiProblem([g], [b.build([g])], {"Gamma": np.array([[1.0]])}, "maximize")
    return prob, 2.0


def _scalar_lyapunov():
    # min p s.t. p − a²p − 1 ≥ 0 with a = 1/2  →  p* = 1/(1 − a²) = 4/3
    p = MatrixVariable("p", 1, 1)
    b = LmiBlockBuilder(1, "lyap")
    b.add_const(0, 0, [[-1.0]])
    b.add_term(0, 0, p, left=[[1.0 - 0.25]])
    prob = LmiProblem([p], [b.build([p])], {"p": np.array([[1.0]])}, "minimize")
    return prob, 4.0 / 3.0


def _min_eigenvalue():
    # max t s.t. A − t·I ⪰ 0, A = [[2,1],[1,2]]  →  t* = λmin(A) = 1
    t = MatrixVariable("t", 1, 1)
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    b = LmiBlockBuilder(2, "eig")
    b.add_const(0, 0, A)
    b.add_term(0, 0, t, left=[[-1.0], [0.0]], right=[[1.0, 0.0]])
    b.add_term(1, 1, t, left=[[-1.0]])
    prob = LmiProblem([t], [b.build([t])], {"t": np.array([[1.0]])}, "maximize")
    return prob, 1.0


def _matrix_dominance():
    # min tr(X) s.t. X ⪰ M, M = [[2,1],[1,2]]  →  X* = M, tr = 4
    X = MatrixVariable("X", 2, 2)
    M = np.array([[2.0, 1.0], [1.0, 2.0]])
    b = LmiBlockBuilder(2, "dom")
    b.add_const(0, 0, -M)
    b.add_term(0, 0, X)
    prob = LmiProblem([X], [b.build([X])], {"X": np.eye(2)}, "minimize")
    return prob, 4.0


def _schur_norm():
    # min t s.t. [[t, vᵀ],[v, I]] ⪰ 0 with v = (3, 4)  →  t* = ‖v‖² = 25
    t = MatrixVariable("t", 1, 1)
    v = np.array([[3.0], [4.0]])
    b = LmiBlockBuilder(3, "schur")
    b.add_const(1, 0, v)
    b.add_const(1, 1, np.eye(2))
    b.add_term(0, 0, t)
    prob = LmiProblem([t], [b.build([t])], {"t": np.array([[1.0]])}, "minimize")
    return prob, 25.0


def _schur_quadratic():
    # min t s.t. [[t, 1, 2], [1, 2, 0], [2, 0, 4]] ⪰ 0
    # Schur: t ≥ [1 2]·diag(2,4)⁻¹·[1 2]ᵀ = 1/2 + 1 = 3/2
    t = MatrixVariable("t", 1, 1)
    b = LmiBlockBuilder(3, "quad")
    b.add_const(0, 1, [[1.0, 2.0]])
    b.add_const(1, 1, np.diag([2.0, 4.0]))
    b.add_term(0, 0, t)
    prob = LmiProblem([t], [b.build([t])], {"t": np.array([[1.0]])}, "minimize")
    return prob, 1.5


def _two_blocks():
    # min x + y s.t. x − 2 ≥ 0 and y − 3 ≥ 0 (separate blocks)  →  5
    x = MatrixVariable("x", 1, 1)
    y = MatrixVariable("y", 1, 1)
    bx = LmiBlockBuilder(1, "bx")
    bx.add_const(0, 0, [[-2.0]])
    bx.add_term(0, 0, x)
    by = LmiBlockBuilder(1, "by")
    by.add_const(0, 0, [[-3.0]])
    by.add_term(0, 0, y)
    prob = LmiProblem([x, y], [bx.build([x, y]), by.build([x, y])],
                      {"x": np.array([[1.0]]), "y": np.array([[1.0]])}, "minimize")
    return prob, 5.0


def _operator_norm_ball():
    # max l₁ + l₂ s.t. [[1, L],[Lᵀ, I₂]] ⪰ 0, L a 1×2 full variable
    # (‖L‖₂ ≤ 1)  →  L* = (1/√2, 1/√2), objective √2
    L = MatrixVariable("L", 1, 2, symmetry="full")
    b = LmiBlockBuilder(3, "ball")
    b.add_const(0, 0, [[1.0]])
    b.add_const(1, 1, np.eye(2))
    b.add_term(0, 1, L)
    prob = LmiProblem([L], [b.build([L])],
                      {"L": np.array([[1.0, 1.0]])}, "maximize")
    return prob, math.sqrt(2.0)


PROBLEMS = [
    ("min_t_offdiag", _min_t_offdiag),
    ("interval_lower", _interval_lower),
    ("scalar_cap", _scalar_cap),
    ("scalar_lyapunov", _scalar_lyapunov),
    ("min_eigenvalue", _min_eigenvalue),
    ("matrix_dominance", _matrix_dominance),
    ("schur_norm", _schur_norm),
    ("schur_quadratic", _schur_quadratic),
    ("two_blocks", _two_blocks),
    ("operator_norm_ball", _operator_norm_ball),
]


def infeasible_problem():
    # diag(x − 1, −x) ⪰ 0 needs x ≥ 1 and x ≤ 0 simultaneously
    x = MatrixVariable("x", 1, 1)
    b = LmiBlockBuilder(2, "empty")
    b.add_const(0, 0, [[-1.0]])
    b.add_term(0, 0, x)
    b.add_term(1, 1, x, left=[[-1.0]])
    return LmiProblem([x], [b.build([x])], {"x": np.array([[1.0]])}, "minimize")
