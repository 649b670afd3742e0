"""
Tests for the least-squares engine: losses, manifolds, solve, Jacobian
checking and marginalization.
"""

import numpy as np
import pytest

from odometry.errors import NegativeInput, NumericalFailure, StructureError
from odometry.geometry import Rotation, right_jacobian_inverse
from odometry.optimizer import (
    Factor,
    FactorBatch,
    HuberLoss,
    Manifold,
    ParameterBlock,
    PriorFactor,
    Termination,
    check_jacobian,
    evaluate_cost,
    manifold_minus,
    manifold_plus,
    marginalize,
    robust_loss,
    solve,
    yaw_frozen_basis,
)


class Absolute(Factor):
    """Residual (x - target) / sigma on a single Euclidean block."""

    def __init__(self, block_id, target, sigma=1.0, loss=None):
        super().__init__([block_id], loss)
        self.target = np.atleast_1d(np.asarray(target, dtype=float))
        self.sigma = sigma

    def evaluate(self, values, jacobians=True):
        r = (values[0] - self.target) / self.sigma
        return r, [np.eye(len(r)) / self.sigma] if jacobians else None


class Difference(Factor):
    """Residual (x_j - x_i - delta) / sigma."""

    def __init__(self, i, j, delta, sigma=1.0):
        super().__init__([i, j])
        self.delta = np.asarray(delta, dtype=float)
        self.sigma = sigma

    def evaluate(self, values, jacobians=True):
        r = (values[1] - values[0] - self.delta) / self.sigma
        if not jacobians:
            return r, None
        I = np.eye(len(r)) / self.sigma
        return r, [-I, I]


class RotationTo(Factor):
    """Residual log(target^-1 q) on a rotation block."""

    def __init__(self, block_id, target):
        super().__init__([block_id])
        self.target = target

    def evaluate(self, values, jacobians=True):
        r = (self.target.inverse() * Rotation(values[0])).log()
        return r, [right_jacobian_inverse(r)] if jacobians else None


class AbsoluteBatch(FactorBatch):
    def __init__(self, block_ids, targets):
        super().__init__([block_ids])
        self.targets = np.asarray(targets, dtype=float)

    def evaluate(self, values, jacobians=True):
        r = values[0] - self.targets
        if not jacobians:
            return r, None
        return r, [np.broadcast_to(np.eye(r.shape[1]), (len(r), r.shape[1], r.shape[1])).copy()]


class Broken(Factor):
    def evaluate(self, values, jacobians=True):
        return np.array([np.nan]), [np.ones((1, 1))] if jacobians else None


# ---------------------------------------------------------------------------
# losses / manifolds
# ---------------------------------------------------------------------------

def test_robust_loss_regions():
    assert robust_loss(0.5) == (0.5, 1.0)
    rho, drho = robust_loss(4.0)
    assert rho == pytest.approx(3.0)
    assert drho == pytest.approx(0.5)
    assert robust_loss(0.0) == (0.0, 1.0)


def test_robust_loss_rejects_negative():
    with pytest.raises(NegativeInput):
        robust_loss(-1e-3)


def test_huber_matches_scalar_loss():
    s = np.array([0.0, 0.3, 1.0, 2.5, 100.0])
    rho, drho = HuberLoss(1.0)(s)
    expected = np.array([robust_loss(v) for v in s])
    assert np.allclose(rho, expected[:, 0])
    assert np.allclose(drho, expected[:, 1])


def test_rotation_plus_minus_are_inverse(rng):
    q = Rotation.exp([0.3, -0.1, 0.7]).q
    for _ in range(10):
        delta = rng.normal(scale=0.3, size=3)
        moved = manifold_plus(Manifold.ROTATION, q, delta)
        assert np.allclose(manifold_minus(Manifold.ROTATION, moved, q), delta, atol=1e-10)


def test_yaw_frozen_basis_excludes_world_z(rng):
    q = Rotation.exp(rng.normal(size=3)).q
    B = yaw_frozen_basis(q)
    axis = Rotation(q).matrix().T @ np.array([0.0, 0.0, 1.0])
    assert B.shape == (3, 2)
    assert np.allclose(B.T @ B, np.eye(2))
    assert np.allclose(B.T @ axis, 0.0)


def test_parameter_block_validation():
    with pytest.raises(ValueError):
        ParameterBlock("q", [1.0, 0.0, 0.0], Manifold.ROTATION)
    with pytest.raises(ValueError):
        ParameterBlock("rho", [-0.5], Manifold.INVERSE_DEPTH)
    assert ParameterBlock("q", [-1.0, 0.0, 0.0, 0.0], Manifold.ROTATION).value[0] == 1.0


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def test_linear_fit_matches_lstsq(rng):
    t = np.linspace(0.0, 1.0, 30)
    y = 2.0 * t - 0.5 + rng.normal(scale=0.01, size=t.size)

    class Line(Factor):
        def __init__(self, ti, yi):
            super().__init__(["ab"])
            self.ti, self.yi = ti, yi

        def evaluate(self, values, jacobians=True):
            a, b = values[0]
            return np.array([a * self.ti + b - self.yi]), [np.array([[self.ti, 1.0]])] if jacobians else None

    block = ParameterBlock("ab", [0.0, 0.0])
    report = solve([block], [Line(ti, yi) for ti, yi in zip(t, y)])
    expected, *_ = np.linalg.lstsq(np.column_stack([t, np.ones_like(t)]), y, rcond=None)
    assert report.converged
    assert np.allclose(block.value, expected, atol=1e-6)
    assert report.final_cost <= report.initial_cost


def test_rotation_block_converges_to_target():
    target = Rotation.exp([0.4, -0.3, 1.2])
    block = ParameterBlock("q", Rotation.identity().q, Manifold.ROTATION)
    report = solve({"q": block}, [RotationTo("q", target)], max_iterations=20)
    assert report.termination is Termination.CONVERGED
    assert (Rotation(block.value).inverse() * target).angle() < 1e-8


def test_constant_block_is_not_moved():
    fixed = ParameterBlock("a", [1.0], constant=True)
    free = ParameterBlock("b", [0.0])
    solve([fixed, free], [Difference("a", "b", [2.0]), Absolute("a", [5.0])])
    assert fixed.value[0] == 1.0
    assert free.value[0] == pytest.approx(3.0)


def test_subspace_keeps_frozen_directions():
    block = ParameterBlock("x", [0.0, 0.0, 7.0], subspace=np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
    solve([block], [Absolute("x", [1.0, 2.0, 3.0])])
    assert np.allclose(block.value, [1.0, 2.0, 7.0])


def test_huber_limits_outlier_pull():
    data = [0.0, 0.1, -0.1, 0.05, 100.0]
    plain = ParameterBlock("x", [0.0])
    robust = ParameterBlock("x", [0.0])
    solve([plain], [Absolute("x", d) for d in data])
    solve([robust], [Absolute("x", d, loss=HuberLoss(1.0)) for d in data], max_iterations=50, tolerance=1e-12)
    assert plain.value[0] == pytest.approx(np.mean(data))
    # inliers balance the clamped unit pull of the outlier
    assert robust.value[0] == pytest.approx(1.05 / 4.0, abs=1e-3)


def test_batch_equals_individual_factors(rng):
    targets = rng.normal(size=(5, 3))
    ids = [f"p{i}" for i in range(5)]
    batch_blocks = [ParameterBlock(i, np.zeros(3)) for i in ids]
    single_blocks = [ParameterBlock(i, np.zeros(3)) for i in ids]
    links = [Difference(a, b, [0.1, 0.0, 0.0], 0.5) for a, b in zip(ids, ids[1:])]
    solve(batch_blocks, [AbsoluteBatch(ids, targets)] + links)
    solve(single_blocks, [Absolute(i, t) for i, t in zip(ids, targets)] + links)
    for a, b in zip(batch_blocks, single_blocks):
        assert np.allclose(a.value, b.value, atol=1e-8)


def test_structure_errors():
    with pytest.raises(StructureError):
        solve([ParameterBlock("a", [0.0])], [Absolute("missing", 1.0)])
    with pytest.raises(StructureError):
        solve([ParameterBlock("a", [0.0], constant=True)], [Absolute("a", 1.0)])


def test_non_finite_residual_raises():
    with pytest.raises(NumericalFailure):
        solve([ParameterBlock("a", [0.0])], [Broken(["a"])])


def test_zero_time_budget_stops_before_first_iteration():
    block = ParameterBlock("a", [0.0])
    report = solve([block], [Absolute("a", 3.0)], time_budget_ms=0.0)
    assert report.budget_exceeded
    assert report.iterations == 0
    assert block.value[0] == 0.0


def test_evaluate_cost_is_half_squared_norm():
    cost = evaluate_cost([ParameterBlock("a", [1.0, 2.0])], [Absolute("a", [0.0, 0.0])])
    assert cost == pytest.approx(2.5)


def test_check_jacobian_accepts_correct_factor():
    block = ParameterBlock("q", Rotation.exp([0.2, 0.5, -0.4]).q, Manifold.ROTATION)
    assert check_jacobian(RotationTo("q", Rotation.exp([0.1, 0.0, 0.3])), [block]) < 1e-5


def test_check_jacobian_flags_wrong_factor():
    class Wrong(RotationTo):
        def evaluate(self, values, jacobians=True):
            r, _ = super().evaluate(values, jacobians)
            return r, [2.0 * np.eye(3)] if jacobians else None

    block = ParameterBlock("q", Rotation.exp([0.2, 0.5, -0.4]).q, Manifold.ROTATION)
    assert check_jacobian(Wrong("q", Rotation.exp([0.1, 0.0, 0.3])), [block]) > 0.1


# ---------------------------------------------------------------------------
# marginalization
# ---------------------------------------------------------------------------

def chain_factors():
    prior0 = Absolute("x0", [0.0, 0.0], 0.1)
    link01 = Difference("x0", "x1", [1.0, 0.5], 0.2)
    link12 = Difference("x1", "x2", [1.0, -0.5], 0.2)
    meas2 = Absolute("x2", [2.2, 0.1], 0.3)
    return prior0, link01, link12, meas2


def chain_blocks(values=((0.3, 0.3), (0.0, 0.0), (0.0, 0.0))):
    return {f"x{i}": ParameterBlock(f"x{i}", v) for i, v in enumerate(values)}


def test_marginalized_prior_reproduces_full_solution():
    prior0, link01, link12, meas2 = chain_factors()
    full = chain_blocks()
    solve(full, [prior0, link01, link12, meas2])

    reduced = chain_blocks()
    prior = marginalize(reduced, [prior0, link01], ["x0"])
    assert isinstance(prior, PriorFactor)
    assert prior.block_ids == ("x1",)
    remaining = {k: v for k, v in reduced.items() if k != "x0"}
    solve(remaining, [prior, link12, meas2])
    assert np.allclose(remaining["x1"].value, full["x1"].value, atol=1e-6)
    assert np.allclose(remaining["x2"].value, full["x2"].value, atol=1e-6)


def test_marginalizing_everything_returns_none():
    prior0, *_ = chain_factors()
    assert marginalize(chain_blocks(), [prior0], ["x0"]) is None


def test_prior_on_rotation_block_has_correct_jacobian():
    block = ParameterBlock("q", Rotation.exp([0.1, 0.2, 0.3]).q, Manifold.ROTATION)
    other = ParameterBlock("p", [1.0, 0.0, 0.0])

    class Coupled(Factor):
        def evaluate(self, values, jacobians=True):
            r = Rotation(values[0]).log() - values[1]
            return r, [right_jacobian_inverse(Rotation(values[0]).log()), -np.eye(3)] if jacobians else None

    prior = marginalize({"q": block, "p": other}, [Coupled(["q", "p"]), Absolute("p", [0.0, 0.0, 0.0])], ["p"])
    block.value = Rotation.exp([0.15, 0.1, 0.35]).q
    assert check_jacobian(prior, [block]) < 1e-5
