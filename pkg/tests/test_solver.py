import numpy as np
import pytest

from splineodom.solver import (
    CallableFactor,
    Problem,
    SolverSettings,
    anchor_prior,
    marginalize,
    PriorFactorGroup,
    solve_lm,
)


def _rosenbrock_problem():
    p = Problem()
    xi = p.add_block("x", np.array([-1.2, 1.0]))

    def fn(values):
        x, y = values[xi]
        r = np.array([10.0 * (y - x * x), 1.0 - x])
        J = np.array([[-20.0 * x, 10.0], [-1.0, 0.0]])
        return r, {xi: J}

    p.add_group(CallableFactor(p, fn))
    return p, xi


def test_rosenbrock_converges():
    p, xi = _rosenbrock_problem()
    res = solve_lm(p, settings=SolverSettings(max_iterations=200))
    assert res.converged
    assert np.allclose(res.values[xi], [1.0, 1.0], atol=1e-6)


def test_accepted_costs_monotone():
    p, _ = _rosenbrock_problem()
    res = solve_lm(p, settings=SolverSettings(max_iterations=200))
    hist = np.array(res.cost_history)
    assert np.all(np.diff(hist) <= 0.0)


def test_linear_least_squares_single_iteration():
    rng = np.random.default_rng(40)
    A = rng.normal(size=(12, 4))
    y = rng.normal(size=12)
    p = Problem()
    xi = p.add_block("x", np.zeros(4))

    def fn(values):
        return A @ values[xi] - y, {xi: A}

    p.add_group(CallableFactor(p, fn))
    x_star, *_ = np.linalg.lstsq(A, y, rcond=None)

    res = solve_lm(p, settings=SolverSettings(max_iterations=1, initial_lambda=1e-14))
    assert np.allclose(res.values[xi], x_star, atol=1e-8)

    res = solve_lm(p, settings=SolverSettings(max_iterations=25))
    assert np.allclose(res.values[xi], x_star, atol=1e-10)


def test_nonfinite_residual_aborts():
    p = Problem()
    xi = p.add_block("x", np.array([1.0]))

    def fn(values):
        return np.array([np.inf]), {xi: np.array([[1.0]])}

    p.add_group(CallableFactor(p, fn))
    from splineodom.solver import SolverError
    with pytest.raises(SolverError):
        solve_lm(p)


def test_so3_block_retraction():
    # rotate an so3 block to match a target direction
    from splineodom import so3
    target = so3.so3_exp(np.array([0.3, -0.5, 0.8]))
    p = Problem()
    qi = p.add_block("q", so3.quat_identity(), kind="so3")

    def fn(values):
        R = so3.quat_to_matrix(values[qi])
        r = so3.so3_log(target.T @ R)
        # d/dphi Log(target^T R Exp(phi)) = Jrinv(r); near solution ~ I
        J = so3.right_jacobian_inv(r)
        return r, {qi: J}

    p.add_group(CallableFactor(p, fn))
    res = solve_lm(p, settings=SolverSettings(max_iterations=50))
    R = so3.quat_to_matrix(res.values[qi])
    assert so3.rotation_distance(R, target) < 1e-9


class TestMarginalize:
    def test_chain_closed_form(self):
        # prior on x0 (unit information) + unit-information odometry x0->x1:
        # eliminating x0 leaves information 1/2 on x1
        p = Problem()
        x0 = p.add_block("x0", np.zeros(1))
        x1 = p.add_block("x1", np.zeros(1))
        p.add_group(CallableFactor(p, lambda v: (v[x0], {x0: np.eye(1)})))
        p.add_group(CallableFactor(
            p, lambda v: (v[x1] - v[x0], {x0: -np.eye(1), x1: np.eye(1)})))
        prior = marginalize(p, p.initial_values(), [x1])
        assert np.allclose(prior.information_matrix, [[0.5]], atol=1e-12)

    def test_no_cross_terms_keeps_information(self):
        p = Problem()
        x0 = p.add_block("x0", np.zeros(2))
        x1 = p.add_block("x1", np.zeros(2))
        A0 = np.array([[2.0, 0.3], [0.0, 1.5]])
        A1 = np.array([[1.0, -0.2], [0.4, 0.9]])
        p.add_group(CallableFactor(p, lambda v: (A0 @ v[x0], {x0: A0})))
        p.add_group(CallableFactor(p, lambda v: (A1 @ v[x1], {x1: A1})))
        prior = marginalize(p, p.initial_values(), [x1])
        assert np.allclose(prior.information_matrix, A1.T @ A1, atol=1e-12)

    def test_prior_information_psd(self):
        rng = np.random.default_rng(41)
        p = Problem()
        xs = [p.add_block(f"x{i}", rng.normal(size=2)) for i in range(4)]
        for i in range(3):
            Ji = rng.normal(size=(2, 2))
            def fn(v, i=i, Ji=Ji):
                return Ji @ (v[xs[i + 1]] - v[xs[i]]), {xs[i]: -Ji, xs[i + 1]: Ji}
            p.add_group(CallableFactor(p, fn))
        p.add_group(CallableFactor(p, lambda v: (v[xs[0]], {xs[0]: np.eye(2)})))
        prior = marginalize(p, p.initial_values(), [xs[3]])
        evals = np.linalg.eigvalsh(prior.information_matrix)
        assert evals.min() >= -1e-10

    def test_sliding_window_matches_batch_on_linear_chain(self):
        """Five-interval linear-Gaussian chain: after each window the current
        state's estimate equals the batch solution over the data seen so far,
        and the final window matches the full batch solution."""
        rng = np.random.default_rng(42)
        n = 6
        odo = rng.normal(size=n - 1)          # odometry measurements
        meas = rng.normal(size=n)             # direct state measurements
        sq2 = 1.0 / np.sqrt(2.0)

        def batch_solution(k):
            """Batch least squares over states 0..k with all data up to k."""
            dim = k + 1
            rows, rhs = [], []
            row = np.zeros(dim)
            row[0] = 1.0
            rows.append(row)
            rhs.append(0.0)   # anchor prior on x0
            for i in range(k + 1):
                row = np.zeros(dim)
                row[i] = 1.0
                rows.append(row)
                rhs.append(meas[i])
            for i in range(k):
                row = np.zeros(dim)
                row[i], row[i + 1] = -sq2, sq2
                rows.append(row)
                rhs.append(sq2 * odo[i])
            A = np.array(rows)
            x, *_ = np.linalg.lstsq(A, np.array(rhs), rcond=None)
            return x

        # sliding window: states (x_{k-1}, x_k), marginalize the older one
        prior = anchor_prior([("x0", "vec", np.zeros(1))], [1.0])
        est = {0: np.zeros(1)}
        # process the measurement on x0 together with the first odometry
        for k in range(1, n):
            p = Problem()
            xa = p.add_block(f"x{k - 1}", est[k - 1])
            xb = p.add_block(f"x{k}", est[k - 1].copy())
            bindings = [p.index[s.name] for s in prior.block_specs]
            p.add_group(PriorFactorGroup(p, prior, bindings))
            if k == 1:
                p.add_group(CallableFactor(
                    p, lambda v: (v[xa] - meas[0], {xa: np.eye(1)})))
            p.add_group(CallableFactor(
                p, lambda v, k=k: (v[xb] - meas[k], {xb: np.eye(1)})))
            p.add_group(CallableFactor(
                p, lambda v, k=k: (sq2 * (v[xb] - v[xa] - odo[k - 1]),
                                   {xa: -sq2 * np.eye(1), xb: sq2 * np.eye(1)})))
            res = solve_lm(p, settings=SolverSettings(max_iterations=60))
            est[k - 1] = res.values[xa]
            est[k] = res.values[xb]
            xb_batch = batch_solution(k)[-1]
            assert abs(est[k][0] - xb_batch) < 1e-8
            prior = marginalize(p, res.values, [xb])

        full = batch_solution(n - 1)
        assert abs(est[n - 1][0] - full[-1]) < 1e-8
