"""Dense interior-point solver for block-structured linear matrix inequalities.

A problem is a list of matrix variables (symmetric or rectangular), a list of
affine constraint blocks ``G_b(z) ⪰ 0`` and a linear objective, where ``z`` is
the packed decision vector.  Symmetric variables are packed in svec form
(off-diagonal entries scaled by √2) so that matrix inner products equal
euclidean inner products of the packed vectors.

The solver is a standard logarithmic-barrier path-following method:

* Phase I minimizes an auxiliary margin ``s`` subject to ``G_b(z) + s·I ⪰ 0``
  starting from the zero assignment; a strictly feasible point is any iterate
  with ``s < 0``, and a final lower bound ``s* > 0`` is an infeasibility
  certificate.
* Phase II minimizes ``t·cᵀz − Σ_b log det G_b(z)`` with damped Newton steps,
  increasing ``t`` geometrically until the duality-gap bound ``m/t`` (``m`` =
  total constraint dimension) is below tolerance relative to the objective.

Blocks are Jacobi-equilibrated internally (a diagonal congruence, which does
not change the feasible set) so corners with very different magnitudes do not
spoil the Newton systems.

Strict inequalities are represented by folding a margin ``δ·I`` into the
constant term at assembly time; see `LmiBlockBuilder.build`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MatrixVariable", "LmiBlock", "LmiBlockBuilder", "LmiProblem",
    "SolveOptions", "SdpSolution", "SdpNumericalError", "solve",
    "check_feasible", "dump_problem", "DEFAULT_DELTA",
]

DEFAULT_DELTA = 1e-6

_SQRT2 = math.sqrt(2.0)


class SdpNumericalError(RuntimeError):
    """Newton system singular beyond regularization, or line search collapsed."""


@dataclass(frozen=True)
class MatrixVariable:
    """A matrix-valued unknown with its packing into the decision vector.

    ``symmetry`` is ``"symmetric"`` (rows == cols, svec packing with √2
    off-diagonal scaling) or ``"full"`` (row-major packing).
    """

    name: str
    rows: int
    cols: int
    symmetry: str = "symmetric"
    offset: int = 0

    def __post_init__(self):
        if self.symmetry not in ("symmetric", "full"):
            raise ValueError(f"unknown symmetry {self.symmetry!r}")
        if self.symmetry == "symmetric" and self.rows != self.cols:
            raise ValueError(f"symmetric variable {self.name} must be square")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"variable {self.name} has empty shape")

    @property
    def size(self) -> int:
        """Number of scalar unknowns contributed to the decision vector."""
        if self.symmetry == "symmetric":
            return self.rows * (self.rows + 1) // 2
        return self.rows * self.cols

    def basis(self):
        """Yield the packing basis matrices E_j (svec or unit, in pack order)."""
        if self.symmetry == "symmetric":
            n = self.rows
            for i in range(n):
                for j in range(i, n):
                    E = np.zeros((n, n))
                    if i == j:
                        E[i, i] = 1.0
                    else:
                        E[i, j] = E[j, i] = 1.0 / _SQRT2
                    yield E
        else:
            for i in range(self.rows):
                for j in range(self.cols):
                    E = np.zeros((self.rows, self.cols))
                    E[i, j] = 1.0
                    yield E

    def pack(self, M) -> np.ndarray:
        M = np.asarray(M, dtype=float)
        if M.shape != (self.rows, self.cols):
            raise ValueError(f"{self.name}: expected shape {(self.rows, self.cols)}, "
                             f"got {M.shape}")
        if self.symmetry == "symmetric":
            out = np.empty(self.size)
            k = 0
            for i in range(self.rows):
                out[k] = M[i, i]
                m = self.rows - i - 1
                out[k + 1:k + 1 + m] = _SQRT2 * M[i, i + 1:]
                k += 1 + m
            return out
        return M.reshape(-1).copy()

    def unpack(self, z: np.ndarray) -> np.ndarray:
        if self.symmetry == "symmetric":
            M = np.zeros((self.rows, self.rows))
            k = 0
            for i in range(self.rows):
                M[i, i] = z[k]
                m = self.rows - i - 1
                M[i, i + 1:] = z[k + 1:k + 1 + m] / _SQRT2
                k += 1 + m
            return M + np.triu(M, 1).T
        return np.asarray(z, dtype=float).reshape(self.rows, self.cols).copy()


@dataclass
class _Term:
    """One affine contribution ``left @ VAR(ᵀ) @ right`` into a block slice."""
    var: str
    row: int
    col: int
    left: np.ndarray | None
    right: np.ndarray | None
    transpose: bool


@dataclass
class LmiBlock:
    """One affine constraint block ``G(z) = G0 + Σ_i z_i A_i ⪰ 0``.

    ``coeffs`` maps variable name → array of shape (var.size, s, s) holding
    the (already symmetrized) coefficient of each packed scalar unknown.
    """

    size: int
    constant: np.ndarray
    coeffs: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def evaluate(self, assignment: dict[str, np.ndarray],
                 variables: dict[str, MatrixVariable]) -> np.ndarray:
        G = self.constant.copy()
        for vname, A in self.coeffs.items():
            if vname not in assignment:
                raise KeyError(f"missing assignment for variable {vname!r}")
            z = variables[vname].pack(assignment[vname])
            G += np.tensordot(z, A, axes=(0, 0))
        return G


class LmiBlockBuilder:
    """Assembles one symmetric affine block from slice-level contributions.

    Entries are written once, on or above the block diagonal; anything placed
    at ``(r, c)`` with ``r != c`` is mirrored by its transpose at ``(c, r)``.
    Contributions at a diagonal position must themselves be symmetric
    (constants are checked; variable terms like ``X`` placed on the diagonal
    are symmetric by the variable's own symmetry).
    """

    def __init__(self, size: int, name: str = ""):
        self.size = size
        self.name = name
        self._const = np.zeros((size, size))
        self._terms: list[_Term] = []

    def add_const(self, r: int, c: int, M) -> "LmiBlockBuilder":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        p, q = M.shape
        self._check(r, c, p, q)
        self._const[r:r + p, c:c + q] += M
        if r != c:
            self._const[c:c + q, r:r + p] += M.T
        return self

    def add_term(self, r: int, c: int, var: MatrixVariable,
                 left=None, right=None, transpose: bool = False) -> "LmiBlockBuilder":
        vr, vc = (var.cols, var.rows) if transpose else (var.rows, var.cols)
        p = vr if left is None else np.atleast_2d(left).shape[0]
        q = vc if right is None else np.atleast_2d(right).shape[1]
        self._check(r, c, p, q)
        self._terms.append(_Term(
            var=var.name, row=r, col=c,
            left=None if left is None else np.atleast_2d(np.asarray(left, float)),
            right=None if right is None else np.atleast_2d(np.asarray(right, float)),
            transpose=transpose))
        return self

    def _check(self, r, c, p, q):
        if r < 0 or c < 0 or r + p > self.size or c + q > self.size:
            raise ValueError(f"block {self.name!r}: slice ({r}:{r + p}, {c}:{c + q}) "
                             f"outside {self.size}x{self.size}")

    def build(self, variables: list[MatrixVariable], shift: float = 0.0) -> LmiBlock:
        """Materialize per-unknown coefficient matrices.

        ``shift`` folds a strict margin into the constant: the built block is
        ``G(z) − shift·I ⪰ 0``.
        """
        var_map = {v.name: v for v in variables}
        const = self._const - shift * np.eye(self.size)
        if np.abs(const - const.T).max() > 1e-12 * max(1.0, np.abs(const).max()):
            raise ValueError(f"block {self.name!r}: constant part not symmetric")
        coeffs: dict[str, np.ndarray] = {}
        for term in self._terms:
            if term.var not in var_map:
                raise KeyError(f"block {self.name!r} references undeclared "
                               f"variable {term.var!r}")
            var = var_map[term.var]
            A = coeffs.setdefault(term.var, np.zeros((var.size, self.size, self.size)))
            for idx, E in enumerate(var.basis()):
                Em = E.T if term.transpose else E
                M = Em
                if term.left is not None:
                    M = term.left @ M
                if term.right is not None:
                    M = M @ term.right
                p, q = M.shape
                A[idx, term.row:term.row + p, term.col:term.col + q] += M
                if term.row != term.col:
                    A[idx, term.col:term.col + q, term.row:term.row + p] += M.T
        # symmetrize diagonal-positioned contributions exactly
        for A in coeffs.values():
            A += np.transpose(A, (0, 2, 1))
            A *= 0.5
        const = 0.5 * (const + const.T)
        return LmiBlock(size=self.size, constant=const, coeffs=coeffs, name=self.name)


@dataclass
class LmiProblem:
    """Linear objective over matrix variables subject to LMI blocks.

    ``objective`` maps variable name → coefficient matrix Θ; the scalar
    objective is ``Σ_v ⟨Θ_v, value_v⟩`` (Frobenius inner product).
    """

    variables: list[MatrixVariable]
    blocks: list[LmiBlock]
    objective: dict[str, np.ndarray] = field(default_factory=dict)
    direction: str = "minimize"

    def __post_init__(self):
        if self.direction not in ("minimize", "maximize"):
            raise ValueError(f"unknown direction {self.direction!r}")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError("duplicate variable names")
        declared = set(names)
        for vname in self.objective:
            if vname not in declared:
                raise ValueError(f"objective references undeclared variable {vname!r}")
        used = set()
        for blk in self.blocks:
            for vname in blk.coeffs:
                if vname not in declared:
                    raise ValueError(f"block {blk.name!r} references undeclared "
                                     f"variable {vname!r}")
                used.add(vname)
        unused = declared - used
        if unused:
            # a variable outside every block makes the barrier flat (and the
            # problem unbounded if it carries objective weight)
            raise ValueError(f"variables not constrained by any block: "
                             f"{sorted(unused)}")
        # assign packing offsets
        off = 0
        repacked = []
        for v in self.variables:
            repacked.append(MatrixVariable(v.name, v.rows, v.cols, v.symmetry, off))
            off += v.size
        self.variables = repacked
        self.n_scalars = off

    def var(self, name: str) -> MatrixVariable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def cost_vector(self) -> np.ndarray:
        """Packed objective coefficients (sign already minimization-oriented)."""
        c = np.zeros(self.n_scalars)
        for v in self.variables:
            if v.name in self.objective:
                theta = np.asarray(self.objective[v.name], dtype=float)
                if v.symmetry == "symmetric":
                    theta = 0.5 * (theta + theta.T)
                c[v.offset:v.offset + v.size] = v.pack(theta)
        if self.direction == "maximize":
            c = -c
        return c

    def pack_assignment(self, assignment: dict[str, np.ndarray]) -> np.ndarray:
        z = np.zeros(self.n_scalars)
        for v in self.variables:
            if v.name in assignment:
                z[v.offset:v.offset + v.size] = v.pack(assignment[v.name])
        return z

    def unpack(self, z: np.ndarray) -> dict[str, np.ndarray]:
        return {v.name: v.unpack(z[v.offset:v.offset + v.size])
                for v in self.variables}


@dataclass
class SolveOptions:
    """Barrier-method knobs.

    ``tol`` is the relative duality-gap target ``m/t ≤ tol·max(1, |obj|)``.
    """

    tol: float = 1e-7
    mu: float = 10.0
    max_outer: int = 80
    max_newton: int = 80
    newton_tol: float = 1e-10
    max_scalars: int = 5000
    phase1_radius: float = 1e9


@dataclass
class SdpSolution:
    """Solver output: variable assignments plus solution diagnostics.

    When ``status == "infeasible"``, ``phase1_certificate`` is a lower bound
    on the best achievable constraint margin within the Phase-I search box
    (a nonnegative value means no strictly feasible point exists there).
    """

    status: str
    assignments: dict[str, np.ndarray]
    objective: float
    min_eigenvalue: float
    gap: float = float("nan")
    iterations: int = 0
    objective_path: list = field(default_factory=list)
    phase1_certificate: float | None = None


class _Cone:
    """Per-block data in equilibrated coordinates plus barrier evaluations."""

    def __init__(self, block: LmiBlock, problem: LmiProblem):
        self.size = block.size
        # stack per-variable coefficient tensors into one (n_scalars, s, s)
        A = np.zeros((problem.n_scalars, block.size, block.size))
        for vname, C in block.coeffs.items():
            v = problem.var(vname)
            A[v.offset:v.offset + v.size] = C
        G0 = block.constant.copy()
        # Jacobi equilibration: diagonal congruence D G D with
        # d_j = (max column magnitude over constant and coefficients)^(-1/2)
        colmax = np.abs(G0).max(axis=0)
        if A.size:
            colmax = np.maximum(colmax, np.abs(A).max(axis=(0, 1)))
        colmax = np.maximum(colmax, 1e-12)
        d = 1.0 / np.sqrt(colmax)
        d /= d.max()  # keep scalings ≤ 1 so well-scaled parts are untouched
        self.scale = d
        self.G0 = d[:, None] * G0 * d[None, :]
        self.A = d[None, :, None] * A * d[None, None, :]
        self.Aflat = self.A.reshape(problem.n_scalars, -1)

    def value(self, z: np.ndarray) -> np.ndarray:
        return self.G0 + np.tensordot(z, self.A, axes=(0, 0))

    def chol(self, z: np.ndarray):
        G = self.value(z)
        try:
            return np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            return None


def _barrier_value(cones, z):
    total = 0.0
    for cone in cones:
        L = cone.chol(z)
        if L is None:
            return None
        total -= 2.0 * np.log(np.diag(L)).sum()
    return total


def _barrier_gradient(cones, z, box):
    grad = np.zeros(z.size)
    for cone in cones:
        L = cone.chol(z)
        if L is None:
            return None
        Linv = np.linalg.inv(L)
        Ginv = Linv.T @ Linv
        grad -= cone.Aflat @ Ginv.reshape(-1)
    if box is not None:
        grad += 1.0 / (box - z) - 1.0 / (box + z)
    return grad


def _newton_phase(cones, c, z0, t, options, stop=None, box=None):
    """Damped Newton centering for min t·cᵀz + barrier(z).

    Returns ``(z, converged)``; ``converged`` is False when centering ran
    out of iterations or the line search stalled away from the rounding
    floor, so the caller must not treat ``z`` as a centered point.

    ``stop``, if given, is evaluated after every accepted step; a truthy
    result ends centering early (used by Phase I, which only needs a strictly
    feasible point, not the centered one).  ``box``, if given, adds the
    interval barrier −Σ log(box² − z_i²), which keeps the iterates bounded
    in directions where the cone barrier alone has vanishing curvature.
    """

    def barrier(zv):
        total = _barrier_value(cones, zv)
        if total is None:
            return None
        if box is not None:
            w = box * box - zv * zv
            if np.any(w <= 0.0):
                return None
            total -= np.log(w).sum()
        return total

    z = z0.copy()
    n = z.size
    for _ in range(options.max_newton):
        if stop is not None and stop(z):
            return z, True
        grad = t * c
        H = np.zeros((n, n))
        feasible = True
        for cone in cones:
            L = cone.chol(z)
            if L is None:
                feasible = False
                break
            Linv = np.linalg.inv(L)  # lower triangular inverse (small blocks)
            Ginv = Linv.T @ Linv
            grad -= cone.Aflat @ Ginv.reshape(-1)
            # H_ij = tr(G⁻¹ A_i G⁻¹ A_j) via congruence Ã_i = L⁻¹ A_i L⁻ᵀ
            At = np.einsum("pq,iqr,rs->ips", Linv, cone.A, Linv.T, optimize=True)
            M = At.reshape(n, -1)
            H += M @ M.T
        if not feasible:
            raise SdpNumericalError("iterate left the cone during centering")
        if box is not None:
            lo, hi = box + z, box - z    # distances to the walls
            grad += 1.0 / hi - 1.0 / lo
            H[np.diag_indices_from(H)] += 1.0 / hi ** 2 + 1.0 / lo ** 2
        # Jacobi-scaled eigensolve: curvature spans many orders of magnitude
        # when the iterate sits far out in an unbounded cone direction or the
        # path approaches a degenerate boundary face.  Near-null curvature is
        # floored rather than inverted: a barrier-only flat direction carries
        # gradient O(sqrt(curvature)) by self-concordance, so against the
        # floor it contributes ~nothing to the decrement and cannot block
        # convergence, while a flat direction holding genuine objective
        # gradient still registers a large decrement and a bounded
        # (Levenberg-style) step for the line search to harvest.
        d = np.sqrt(np.diag(H))
        d[d <= 0.0] = 1.0
        Hs = H / d[:, None] / d[None, :]
        gs = grad / d
        try:
            w, Qe = np.linalg.eigh(Hs)
        except np.linalg.LinAlgError as exc:
            raise SdpNumericalError("Newton system eigensolve failed") from exc
        w_eff = np.maximum(w, 1e-12 * max(w[-1], 1e-8))
        gq = Qe.T @ gs
        decrement2 = float(gq @ (gq / w_eff))
        # scale-aware centering test: a residual decrement of λ² costs at
        # most λ²/t in objective — but only inside the region λ ≤ 1/2 where
        # self-concordance actually bounds the suboptimality by λ², so the
        # relative tolerance is capped there
        if decrement2 <= 0.25 and decrement2 / 2.0 <= \
                options.newton_tol * max(1.0, abs(t * float(c @ z))):
            return z, True
        # backtracking line search on φ(z) = t·cᵀz + barrier; when the
        # Newton step stalls (floored curvature can make it garbage), retry
        # with increasing Levenberg shifts — the heavily shifted step tends
        # to a plain gradient step, which descends whenever the gradient is
        # above the rounding floor of φ
        phi0 = t * float(c @ z) + barrier(z)
        alpha = None
        for reg in (0.0, 1e-8, 1e-4, 1e-2, 1.0, 1e2):
            w_ls = w_eff if reg == 0.0 else w_eff + reg * max(w[-1], 1e-8)
            step = -(Qe @ (gq / w_ls)) / d
            slope2 = float(gq @ (gq / w_ls))
            a = 1.0
            for _ in range(60):
                z_new = z + a * step
                bar = barrier(z_new)
                if bar is not None:
                    phi_new = t * float(c @ z_new) + bar
                    if phi_new <= phi0 - 0.25 * a * slope2:
                        alpha = a
                        break
                a *= 0.5
            if alpha is not None:
                break
        else:
            # progress below the rounding floor of φ counts as centered to
            # working precision; anything larger is a genuine stall and the
            # iterate must not be trusted as a center
            return z, decrement2 <= 0.25 and \
                0.25 * decrement2 <= 1e-13 * max(1.0, abs(phi0))
        z = z + alpha * step
    return z, False


def _min_eig_blocks(problem, assignment):
    worst = np.inf
    for blk in problem.blocks:
        var_map = {v.name: v for v in problem.variables}
        G = blk.evaluate(assignment, var_map)
        worst = min(worst, float(np.linalg.eigvalsh(0.5 * (G + G.T))[0]))
    return worst


def _phase1(cones, problem, options):
    """Find a strictly feasible z, or an infeasibility certificate.

    Works on the extended problem min s s.t. G_b(z) + s·I ⪰ 0 where s is an
    extra scalar appended to z, with an interval barrier |z_i| < R keeping
    the search bounded (R = `SolveOptions.phase1_radius`).  Centering stops
    as soon as the original blocks are strictly positive definite at the
    current z, which also covers directions along which the margin improves
    without bound.  Returns (z_feasible, None) or (None, s_lower); the lower
    bound certifies that no feasible point exists with all |z_i| < R.
    """
    n = problem.n_scalars
    z0 = np.zeros(n)
    # s acts as an unscaled identity shift: the aux cone is D(G(z) + s·I)D,
    # so any s0 > −λmin(G_b(0)) over all blocks starts strictly inside
    worst = -np.inf
    for blk in problem.blocks:
        lam = float(np.linalg.eigvalsh(0.5 * (blk.constant + blk.constant.T))[0])
        worst = max(worst, -lam)

    class _AuxCone:
        def __init__(self, base):
            self.base = base
            self.size = base.size
            D2 = np.diag(base.scale ** 2)
            self.A = np.concatenate([base.A, D2[None]], axis=0)
            self.Aflat = self.A.reshape(n + 1, -1)
            self.G0 = base.G0

        def value(self, zz):
            return self.G0 + np.tensordot(zz, self.A, axes=(0, 0))

        def chol(self, zz):
            G = self.value(zz)
            try:
                return np.linalg.cholesky(G)
            except np.linalg.LinAlgError:
                return None

    def strictly_feasible(zz):
        return all(cone.chol(zz[:n]) is not None for cone in cones)

    aux = [_AuxCone(c) for c in cones]
    s0 = worst + max(1.0, 0.1 * abs(worst))
    zz = np.concatenate([z0, [s0]])
    c_aux = np.zeros(n + 1)
    c_aux[-1] = 1.0
    # total barrier degree: cone sizes plus two wall terms per coordinate
    m_total = sum(c.size for c in cones) + 2 * (n + 1)
    scale = max(1.0, abs(s0))
    t = max(1.0, m_total / scale)
    for _ in range(options.max_outer):
        zz, centered = _newton_phase(aux, c_aux, zz, t, options,
                                     stop=strictly_feasible,
                                     box=options.phase1_radius)
        if strictly_feasible(zz):
            return zz[:n], None
        s_now = zz[-1]
        gap = m_total / t
        # the gap bounds s_now − s* only at a centered point, so an
        # uncentered iterate must not issue a certificate
        if centered and s_now - gap > 0:
            return None, s_now - gap
        if centered and gap <= options.tol * scale:
            return None, max(s_now - gap, 0.0)
        t *= options.mu
    raise SdpNumericalError("phase-I barrier did not resolve feasibility")


def solve(problem: LmiProblem, options: SolveOptions | None = None,
          initial: dict[str, np.ndarray] | None = None) -> SdpSolution:
    """Minimize/maximize the linear objective subject to the LMI blocks.

    Args:
        problem: assembled `LmiProblem`.
        options: barrier parameters; defaults are suitable for the dense,
            few-hundred-unknown problems this package generates.
        initial: optional strictly feasible starting assignment (skips
            Phase I when it verifies).

    Returns:
        SdpSolution with status ``"optimal"``, ``"infeasible"`` or
        ``"max-iterations"``.

    Raises:
        SdpNumericalError: on Newton breakdown beyond regularization.
    """
    options = options or SolveOptions()
    if problem.n_scalars > options.max_scalars:
        raise ValueError(f"problem has {problem.n_scalars} scalar unknowns, "
                         f"cap is {options.max_scalars}")
    cones = [_Cone(blk, problem) for blk in problem.blocks]
    # the interval barrier |z_i| < R runs through the main solve as well:
    # objective-free coordinates can sit on barrier-unbounded recession rays
    # (log det keeps growing along them), and without walls the analytic
    # center does not exist in those directions.  The walls contribute two
    # barrier terms per coordinate to the degree used in the gap bound and
    # perturb an interior optimum by O(|z|/R²), far below the duality gap.
    box = options.phase1_radius
    m_total = sum(c.size for c in cones) + 2 * problem.n_scalars
    c = problem.cost_vector()

    z = None
    warm = False
    if initial is not None:
        z_try = problem.pack_assignment(initial)
        if np.all(np.abs(z_try) < box) \
                and all(cone.chol(z_try) is not None for cone in cones):
            z = z_try
            warm = True
    if z is None:
        z, certificate = _phase1(cones, problem, options)
        if z is None:
            return SdpSolution(status="infeasible", assignments={},
                               objective=float("nan"), min_eigenvalue=float("nan"),
                               phase1_certificate=float(certificate))

    sign = -1.0 if problem.direction == "maximize" else 1.0
    if not np.any(c):
        # constant objective: any strictly feasible point is optimal
        assignments = problem.unpack(z)
        return SdpSolution(status="optimal", assignments=assignments,
                           objective=0.0,
                           min_eigenvalue=_min_eig_blocks(problem, assignments),
                           gap=0.0, iterations=0, objective_path=[0.0])
    obj0 = float(c @ z)
    t = max(1.0, m_total / max(1.0, abs(obj0)))
    if warm:
        # a caller-supplied point is presumed near-optimal; starting at the
        # default temperature would first walk it back to the analytic
        # center.  At a centered point ∇barrier = −t·c, so projecting the
        # actual barrier gradient on −c recovers the temperature the point
        # is (approximately) centered for.
        g_bar = _barrier_gradient(cones, z, box)
        t_cap = m_total / (options.tol * max(1.0, abs(obj0)))
        if g_bar is not None:
            t_match = float(-(g_bar @ c) / max(float(c @ c), 1e-300))
            if np.isfinite(t_match) and t_match > t:
                t = min(t_match, t_cap)
    path = []
    status = "max-iterations"
    outer = 0
    for outer in range(1, options.max_outer + 1):
        z, centered = _newton_phase(cones, c, z, t, options, box=box)
        obj = float(c @ z)
        path.append(sign * obj)
        gap = m_total / t
        # the gap bounds the suboptimality only at a centered point
        if centered and gap <= options.tol * max(1.0, abs(obj)):
            status = "optimal"
            break
        t *= options.mu
    assignments = problem.unpack(z)
    return SdpSolution(
        status=status,
        assignments=assignments,
        objective=sign * float(c @ z),
        min_eigenvalue=_min_eig_blocks(problem, assignments),
        gap=m_total / t,
        iterations=outer,
        objective_path=path,
    )


def check_feasible(problem: LmiProblem, assignment: dict[str, np.ndarray]) -> float:
    """Minimum eigenvalue across all assembled blocks at the assignment.

    Raises:
        KeyError: if the assignment misses a variable some block references.
    """
    return _min_eig_blocks(problem, assignment)


def dump_problem(problem: LmiProblem, path: str) -> None:
    """Write a sparse-triplet text dump for cross-checking with other solvers.

    Format (one record per line, whitespace-separated):

        var <name> <rows> <cols> <symmetry> <offset>
        obj <scalar-index> <coefficient>
        blk <block-index> <size>
        con <block-index> <row> <col> <value>          # constant entries
        coef <block-index> <scalar-index> <row> <col> <value>

    Scalar indices refer to the packed decision vector (svec order for
    symmetric variables, row-major otherwise).
    """
    lines = [f"direction {problem.direction}"]
    for v in problem.variables:
        lines.append(f"var {v.name} {v.rows} {v.cols} {v.symmetry} {v.offset}")
    c = problem.cost_vector()
    for i, ci in enumerate(c):
        if ci != 0.0:
            lines.append(f"obj {i} {float(ci):.17g}")
    for b, blk in enumerate(problem.blocks):
        lines.append(f"blk {b} {blk.size}")
        for (i, j) in zip(*np.nonzero(blk.constant)):
            lines.append(f"con {b} {i} {j} {float(blk.constant[i, j]):.17g}")
        for vname, A in sorted(blk.coeffs.items()):
            off = problem.var(vname).offset
            for (k, i, j) in zip(*np.nonzero(A)):
                lines.append(f"coef {b} {off + k} {i} {j} {float(A[k, i, j]):.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
