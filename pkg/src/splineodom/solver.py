"""Dense block-structured nonlinear least squares with marginalization.

A Problem owns parameter blocks (plain vectors or SO(3) states stored as
unit quaternions with 3-dof tangents) and factor groups. Groups expose

    cost(values) -> float
    accumulate(values, H, b) -> float   # adds J^T J and J^T r, returns cost

over `values`, a list of per-block arrays. Rotation blocks retract on the
right, q <- q * exp(dphi), matching the Jacobian convention of the factor
modules.

`solve_lm` is a standard Levenberg-Marquardt loop with multiplicative
diagonal damping; accepted steps never increase the cost. `marginalize`
Schur-eliminates blocks from the undamped Gauss-Newton system at the
current estimate and returns a PriorFactor that replays the retained
information in later problems.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import so3

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Non-finite numerics or a structurally unusable problem."""


@dataclass
class SolverSettings:
    max_iterations: int = 30
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    cost_tolerance: float = 1e-8   # relative decrease of accepted steps
    step_tolerance: float = 1e-10
    max_lambda: float = 1e12

    def __post_init__(self):
        if min(self.cost_tolerance, self.step_tolerance) <= 0.0:
            raise ValueError("tolerances must be positive")


@dataclass
class Block:
    name: str
    kind: str          # 'vec' or 'so3'
    value: np.ndarray  # (dim,) for vec, quaternion (4,) for so3

    @property
    def dim(self):
        return 3 if self.kind == "so3" else self.value.size


class Problem:
    def __init__(self):
        self.blocks = []
        self.index = {}
        self.offsets = []
        self.dim = 0
        self.groups = []

    def add_block(self, name, value, kind="vec"):
        if name in self.index:
            raise ValueError(f"duplicate block {name}")
        blk = Block(name, kind, np.asarray(value, dtype=float).copy())
        self.index[name] = len(self.blocks)
        self.offsets.append(self.dim)
        self.dim += blk.dim
        self.blocks.append(blk)
        return self.index[name]

    def block_offset(self, idx):
        return self.offsets[idx]

    def add_group(self, group):
        self.groups.append(group)

    def initial_values(self):
        return [blk.value.copy() for blk in self.blocks]

    def retract(self, values, step):
        out = []
        for blk, off, v in zip(self.blocks, self.offsets, values):
            d = step[off:off + blk.dim]
            if blk.kind == "so3":
                out.append(so3.quat_normalize(so3.quat_multiply(v, so3.quat_exp(d))))
            else:
                out.append(v + d)
        return out

    def cost(self, values):
        return float(sum(g.cost(values) for g in self.groups))

    def assemble(self, values):
        """Undamped Gauss-Newton system (H, b, cost) at `values`."""
        H = np.zeros((self.dim, self.dim))
        b = np.zeros(self.dim)
        cost = float(sum(g.accumulate(values, H, b) for g in self.groups))
        if not (np.isfinite(cost) and np.all(np.isfinite(H)) and np.all(np.isfinite(b))):
            raise SolverError("non-finite residuals or jacobians during assembly")
        return H, b, cost


class CallableFactor:
    """Adapter for test-style factors fn(values) -> (residual, {block: J}).

    Residuals are assumed already whitened; jacobians are w.r.t. the block
    tangents.
    """

    def __init__(self, problem, fn):
        self.problem = problem
        self.fn = fn

    def cost(self, values):
        r, _ = self.fn(values)
        return 0.5 * float(np.dot(r, r))

    def accumulate(self, values, H, b):
        r, jacs = self.fn(values)
        for bi, Ji in jacs.items():
            oi = self.problem.block_offset(bi)
            di = Ji.shape[1]
            b[oi:oi + di] += Ji.T @ r
            for bj, Jj in jacs.items():
                oj = self.problem.block_offset(bj)
                dj = Jj.shape[1]
                H[oi:oi + di, oj:oj + dj] += Ji.T @ Jj
        return 0.5 * float(np.dot(r, r))


@dataclass
class LMResult:
    values: list
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    reason: str
    cost_history: list = field(default_factory=list)


def solve_lm(problem, values=None, settings=None):
    """Levenberg-Marquardt with multiplicative diagonal damping."""
    settings = settings or SolverSettings()
    values = [v.copy() for v in (values or problem.initial_values())]
    H, b, cost = problem.assemble(values)
    initial_cost = cost
    history = [cost]
    lam = settings.initial_lambda
    reason = "max_iterations"
    converged = False
    iterations = 0

    for _ in range(settings.max_iterations):
        iterations += 1
        accepted = False
        while lam <= settings.max_lambda:
            D = np.clip(np.diag(H), 1e-12, None)
            try:
                step = np.linalg.solve(H + lam * np.diag(D), -b)
            except np.linalg.LinAlgError:
                lam *= settings.lambda_up
                continue
            # a tiny step only signals convergence near nominal damping; a
            # step shrunk by lambda escalation is exhaustion, not an optimum
            if (np.linalg.norm(step) < settings.step_tolerance
                    and lam <= settings.initial_lambda):
                return LMResult(values, cost, initial_cost, iterations, True,
                                "step_tolerance", history)
            trial = problem.retract(values, step)
            trial_cost = problem.cost(trial)
            if np.isfinite(trial_cost) and trial_cost < cost:
                accepted = True
                break
            lam *= settings.lambda_up
        if not accepted:
            reason = "no_progress"
            converged = True
            break
        # accepted steps are monotone by construction
        assert trial_cost < cost
        rel_drop = (cost - trial_cost) / max(cost, 1e-300)
        values = trial
        cost = trial_cost
        history.append(cost)
        lam = max(lam * settings.lambda_down, 1e-18)
        H, b, cost = problem.assemble(values)
        if rel_drop < settings.cost_tolerance:
            reason = "cost_tolerance"
            converged = True
            break

    return LMResult(values, cost, initial_cost, iterations, converged, reason, history)


# ------------------------------------------------------------ marginalization

@dataclass
class PriorBlockSpec:
    name: str
    kind: str
    linearization: np.ndarray


class PriorFactor:
    """Gaussian prior from Schur-complement marginalization.

    Stores the linearization point of the retained blocks together with the
    condensed information matrix/vector; the residual replayed in later
    problems is U d + r0 with d the stacked tangent deviation from the
    linearization point and U^T U = information_matrix.
    """

    def __init__(self, block_specs, information_matrix, information_vector,
                 regularized=False, min_eigenvalue=0.0):
        self.block_specs = block_specs
        information_matrix = 0.5 * (information_matrix + information_matrix.T)
        self.information_matrix = information_matrix
        self.information_vector = information_vector
        self.regularized = regularized
        self.min_eigenvalue = min_eigenvalue
        evals, evecs = np.linalg.eigh(information_matrix)
        self.min_eigenvalue = min(self.min_eigenvalue, float(evals.min()))
        evals = np.clip(evals, 0.0, None)
        self.sqrt_info = np.diag(np.sqrt(evals)) @ evecs.T
        inv_sqrt = np.where(evals > 1e-12, 1.0 / np.sqrt(np.clip(evals, 1e-300, None)), 0.0)
        self.rhs = np.diag(inv_sqrt) @ evecs.T @ information_vector

    @property
    def linearization_point(self):
        return np.concatenate([
            s.linearization if s.kind == "vec" else s.linearization
            for s in self.block_specs
        ])

    @property
    def dim(self):
        return self.information_matrix.shape[0]


class PriorFactorGroup:
    """PriorFactor bound to the blocks of a concrete problem.

    bindings[i] is the block index holding spec i, or the literal value of
    a state held fixed in this problem (e.g. biases during the IMU-only
    bootstrap); fixed blocks contribute to the residual but expose no
    jacobian columns.
    """

    def __init__(self, problem, prior, bindings):
        self.problem = problem
        self.prior = prior
        self.bindings = bindings

    def _deltas(self, values):
        deltas = []
        jac_spots = []  # (tangent column start, block idx or None, J_local)
        col = 0
        for spec, bind in zip(self.prior.block_specs, self.bindings):
            if isinstance(bind, (int, np.integer)):
                v = values[bind]
                blk_idx = int(bind)
            else:
                v = np.asarray(bind, dtype=float)
                blk_idx = None
            if spec.kind == "so3":
                d = so3.quat_log(so3.quat_multiply(so3.quat_conjugate(spec.linearization), v))
                Jl = so3.right_jacobian_inv(d)
                dim = 3
            else:
                d = v - spec.linearization
                Jl = np.eye(d.size)
                dim = d.size
            deltas.append(d)
            jac_spots.append((col, blk_idx, Jl))
            col += dim
        return np.concatenate(deltas), jac_spots

    def _residual(self, values):
        d, spots = self._deltas(values)
        return self.prior.sqrt_info @ d + self.prior.rhs, spots

    def cost(self, values):
        r, _ = self._residual(values)
        return 0.5 * float(np.dot(r, r))

    def accumulate(self, values, H, b):
        r, spots = self._residual(values)
        J = np.zeros((r.size, H.shape[0]))
        for col, blk_idx, Jl in spots:
            if blk_idx is None:
                continue
            off = self.problem.block_offset(blk_idx)
            dim = Jl.shape[1]
            J[:, off:off + dim] = self.prior.sqrt_info[:, col:col + Jl.shape[0]] @ Jl
        H += J.T @ J
        b += J.T @ r
        return 0.5 * float(np.dot(r, r))


def marginalize(problem, values, keep_block_indices):
    """Schur-complement the assembled system onto the kept blocks.

    Returns a PriorFactor over the kept blocks (in the given order),
    linearized at `values`. A rank-deficient eliminated block is
    regularized with 1e-9 on its diagonal and flagged.
    """
    H, b, _ = problem.assemble(values)
    keep_cols = []
    for bi in keep_block_indices:
        off = problem.block_offset(bi)
        keep_cols.extend(range(off, off + problem.blocks[bi].dim))
    keep_cols = np.asarray(keep_cols, dtype=int)
    drop_cols = np.setdiff1d(np.arange(problem.dim), keep_cols)

    Hkk = H[np.ix_(keep_cols, keep_cols)]
    bk = b[keep_cols]
    regularized = False
    if drop_cols.size:
        Hee = H[np.ix_(drop_cols, drop_cols)]
        Hke = H[np.ix_(keep_cols, drop_cols)]
        be = b[drop_cols]
        try:
            L = np.linalg.cholesky(Hee)
        except np.linalg.LinAlgError:
            regularized = True
            logger.warning("rank-deficient eliminated block, regularizing with 1e-9")
            L = np.linalg.cholesky(Hee + 1e-9 * np.eye(Hee.shape[0]))
        X = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Hke.T, be])))
        Hkk = Hkk - Hke @ X[:, :-1]
        bk = bk - Hke @ X[:, -1]

    specs = [
        PriorBlockSpec(problem.blocks[bi].name, problem.blocks[bi].kind,
                       values[bi].copy())
        for bi in keep_block_indices
    ]
    return PriorFactor(specs, Hkk, bk, regularized=regularized)


def anchor_prior(specs_values, sigmas):
    """Diagonal anchoring prior used to initialize the very first window.

    specs_values: list of (name, kind, value); sigmas: matching stddevs per
    tangent dimension (scalar per block).
    """
    specs = []
    diag = []
    for (name, kind, value), sigma in zip(specs_values, sigmas):
        value = np.asarray(value, dtype=float)
        dim = 3 if kind == "so3" else value.size
        specs.append(PriorBlockSpec(name, kind, value.copy()))
        diag.extend([1.0 / (sigma * sigma)] * dim)
    info = np.diag(diag)
    return PriorFactor(specs, info, np.zeros(len(diag)))
