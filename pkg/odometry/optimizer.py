"""
Stereo-Inertial Odometry - Least-Squares Engine

Sparse Levenberg-Marquardt over parameter blocks living on manifolds
(Euclidean vectors, unit quaternions, positive inverse depths), with Huber
robustification, landmark elimination by Schur complement and a Gaussian
prior produced by marginalization.

Two kinds of residual sources are accepted by ``solve``:

- ``Factor``: a single residual attached to a fixed tuple of blocks.
- ``FactorBatch``: n residuals of identical structure evaluated together
  with numpy (the visual terms of a window are one batch).

Residuals are whitened by the factor itself; Jacobians are returned with
respect to the tangent space of each block.

License: MIT
"""

import logging
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from odometry.errors import NegativeInput, NumericalFailure, StructureError
from odometry.geometry import (
    quat_canonical,
    quat_conjugate,
    quat_multiply,
    quat_to_matrix,
    right_jacobian_inverse,
    so3_exp,
    so3_log,
)

logger = logging.getLogger(__name__)


class Manifold(Enum):
    EUCLIDEAN = "Euclidean"
    ROTATION = "Rotation"
    INVERSE_DEPTH = "InverseDepth"


class Termination(Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    TRUST_REGION_FAILURE = "TrustRegionFailure"


def manifold_plus(manifold, value, delta):
    if manifold is Manifold.ROTATION:
        return quat_canonical(quat_multiply(value, so3_exp(delta)))
    return value + delta


def manifold_minus(manifold, value, reference):
    """Tangent vector d with manifold_plus(reference, d) == value."""
    if manifold is Manifold.ROTATION:
        return so3_log(quat_multiply(quat_conjugate(reference), value))
    return value - reference


def yaw_frozen_basis(q):
    """
    Tangent basis of a rotation block that excludes rotations about the
    world z axis (right perturbations along R^T e_z).
    """
    axis = quat_to_matrix(q)[2, :]
    _, _, Vt = np.linalg.svd(axis[None, :])
    return Vt[1:].T


class ParameterBlock:
    """
    A group of optimization variables.

    Args:
        block_id: hashable identifier referenced by factors
        value: initial value; (w, x, y, z) for rotation blocks
        manifold (Manifold): update rule
        constant (bool): held fixed during solves
        subspace (np.ndarray): optional tangent basis (tangent_dim x k);
            directions outside it are held fixed
    """

    def __init__(self, block_id, value, manifold=Manifold.EUCLIDEAN, constant=False, subspace=None):
        value = np.array(value, dtype=float).ravel()
        if manifold is Manifold.ROTATION:
            if value.size != 4:
                raise ValueError(f"rotation block {block_id} needs a 4-vector quaternion")
            value = quat_canonical(value)
        if manifold is Manifold.INVERSE_DEPTH and (value.size != 1 or value[0] <= 0):
            raise ValueError(f"inverse depth block {block_id} must be a positive scalar")
        self.block_id = block_id
        self.value = value
        self.manifold = manifold
        self.constant = constant
        self.subspace = None if subspace is None else np.asarray(subspace, dtype=float)

    @property
    def tangent_dim(self):
        return 3 if self.manifold is Manifold.ROTATION else self.value.size

    @property
    def free_dim(self):
        if self.constant:
            return 0
        return self.tangent_dim if self.subspace is None else self.subspace.shape[1]

    def __repr__(self):
        flag = ", constant" if self.constant else ""
        return f"ParameterBlock({self.block_id!r}, {self.manifold.value}{flag})"


def robust_loss(s):
    """
    Huber loss on a squared residual norm.

    Returns:
        tuple: (rho(s), rho'(s))

    Raises:
        NegativeInput: if s < 0
    """
    if s < 0:
        raise NegativeInput(f"squared norm must be non-negative, got {s}")
    if s <= 1.0:
        return float(s), 1.0
    root = np.sqrt(s)
    return float(2.0 * root - 1.0), float(1.0 / root)


class HuberLoss:
    """Vectorized Huber loss with threshold ``delta`` on the residual norm."""

    def __init__(self, delta=1.0):
        self.delta = float(delta)

    def __call__(self, s):
        c2 = self.delta * self.delta
        s = np.asarray(s, dtype=float)
        outer = s > c2
        root = np.sqrt(np.where(outer, s, c2))
        rho = np.where(outer, 2.0 * self.delta * root - c2, s)
        drho = np.where(outer, self.delta / root, 1.0)
        return rho, drho

    def __repr__(self):
        return f"HuberLoss({self.delta})"


class Factor:
    """
    A residual term attached to a tuple of parameter blocks.

    Subclasses implement ``evaluate(values, jacobians=True)`` returning
    ``(residual, [J_k])`` where ``J_k`` has shape (residual_dim, tangent_dim_k),
    or ``(residual, None)`` when jacobians is False.
    """

    def __init__(self, block_ids, loss=None):
        self.block_ids = tuple(block_ids)
        self.loss = loss

    def evaluate(self, values, jacobians=True):
        raise NotImplementedError


class FactorBatch:
    """
    n residual terms sharing one structure.

    ``slot_ids[k][i]`` names the block feeding slot k of row i.
    ``evaluate(values, jacobians=True)`` receives one stacked array per
    slot and returns ``(residuals (n, m), [J_k (n, m, tangent_k)])``.
    """

    def __init__(self, slot_ids, loss=None):
        self.slot_ids = [list(ids) for ids in slot_ids]
        self.loss = loss

    def __len__(self):
        return len(self.slot_ids[0]) if self.slot_ids else 0

    def evaluate(self, values, jacobians=True):
        raise NotImplementedError


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: Termination
    elapsed_ms: float = 0.0
    budget_exceeded: bool = False

    @property
    def converged(self):
        return self.termination is Termination.CONVERGED


def _slot_layout(factor):
    if isinstance(factor, FactorBatch):
        return factor.slot_ids, True
    return [[b] for b in factor.block_ids], False


def _evaluate(factor, values, batch, jacobians=True):
    if batch:
        return factor.evaluate(values, jacobians)
    residual, Js = factor.evaluate([v[0] for v in values], jacobians)
    residual = np.asarray(residual, dtype=float)[None, :]
    if Js is not None:
        Js = [np.asarray(J, dtype=float)[None, :, :] for J in Js]
    return residual, Js


class _Problem:
    """Index bookkeeping shared by solve and marginalize."""

    def __init__(self, blocks, factors, use_subspace=True, trailing=()):
        self.blocks = blocks
        self.factors = list(factors)
        self.layouts = []
        referenced = {}
        for factor in self.factors:
            slot_ids, batch = _slot_layout(factor)
            for ids in slot_ids:
                for bid in ids:
                    if bid not in blocks:
                        raise StructureError(f"factor references unknown block {bid!r}")
                    referenced[bid] = True
            self.layouts.append((slot_ids, batch))

        variable = [bid for bid in referenced if not blocks[bid].constant]
        # landmarks last so their diagonal block can be eliminated
        trailing = set(trailing)
        first = [b for b in variable if b not in trailing and blocks[b].manifold is not Manifold.INVERSE_DEPTH]
        middle = [b for b in variable if b not in trailing and blocks[b].manifold is Manifold.INVERSE_DEPTH]
        last = [b for b in variable if b in trailing]
        self.order = first + middle + last
        self.n_landmark = sum(1 for _ in middle) if not last else 0

        self.tangent_offset = {}
        offset = 0
        for bid in self.order:
            self.tangent_offset[bid] = offset
            offset += blocks[bid].tangent_dim
        self.n_tangent = offset

        basis_rows, basis_cols, basis_data = [], [], []
        free = 0
        for bid in self.order:
            block = blocks[bid]
            t0 = self.tangent_offset[bid]
            B = block.subspace if (use_subspace and block.subspace is not None) else np.eye(block.tangent_dim)
            r, c = np.nonzero(np.ones_like(B))
            basis_rows.append(t0 + r)
            basis_cols.append(free + c)
            basis_data.append(B[r, c])
            free += B.shape[1]
        self.n_free = free
        if self.order:
            self.basis = sp.csr_matrix(
                (np.concatenate(basis_data), (np.concatenate(basis_rows), np.concatenate(basis_cols))),
                shape=(self.n_tangent, self.n_free))
        else:
            self.basis = sp.csr_matrix((0, 0))

        self.slot_offsets = []
        for slot_ids, _ in self.layouts:
            self.slot_offsets.append([
                np.array([self.tangent_offset.get(b, -1) for b in ids], dtype=int) for ids in slot_ids
            ])

    def values(self):
        return {bid: block.value for bid, block in self.blocks.items()}

    def linearize(self, values, jacobians=True):
        """Robustified cost, and when requested the whitened sparse system."""
        cost = 0.0
        residuals, rows, cols, data = [], [], [], []
        row0 = 0
        for factor, (slot_ids, batch), offsets in zip(self.factors, self.layouts, self.slot_offsets):
            stacked = [np.stack([values[b] for b in ids]) for ids in slot_ids]
            r, Js = _evaluate(factor, stacked, batch, jacobians)
            if not np.all(np.isfinite(r)) or (jacobians and not all(np.all(np.isfinite(J)) for J in Js)):
                raise NumericalFailure(f"{type(factor).__name__} produced a non-finite value")
            s = np.einsum("ij,ij->i", r, r)
            if factor.loss is not None:
                rho, weight = factor.loss(s)
            else:
                rho, weight = s, np.ones_like(s)
            cost += 0.5 * float(np.sum(rho))
            if not jacobians:
                continue
            n, m = r.shape
            sw = np.sqrt(weight)
            residuals.append((r * sw[:, None]).ravel())
            row_index = row0 + np.arange(n)[:, None] * m + np.arange(m)[None, :]
            for J, off in zip(Js, offsets):
                keep = off >= 0
                if not keep.any():
                    continue
                t = J.shape[2]
                Jw = (J * sw[:, None, None])[keep]
                rr = np.broadcast_to(row_index[keep][:, :, None], Jw.shape)
                cc = np.broadcast_to(off[keep][:, None, None] + np.arange(t)[None, None, :], Jw.shape)
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                data.append(Jw.ravel())
            row0 += n * m
        if not jacobians:
            return cost, None, None
        r_all = np.concatenate(residuals) if residuals else np.zeros(0)
        if rows:
            J_all = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                  shape=(row0, self.n_tangent))
        else:
            J_all = sp.csr_matrix((row0, self.n_tangent))
        return cost, J_all, r_all

    def retract(self, values, step_free):
        """Apply a free-coordinate step; None if an inverse depth turns non-positive."""
        step = self.basis @ step_free
        trial = dict(values)
        for bid in self.order:
            block = self.blocks[bid]
            t0 = self.tangent_offset[bid]
            new = manifold_plus(block.manifold, values[bid], step[t0:t0 + block.tangent_dim])
            if block.manifold is Manifold.INVERSE_DEPTH and new[0] <= 0:
                return None
            trial[bid] = new
        return trial


def _solve_damped(H, g, mu, n_landmark):
    """Solve (H + mu D) dx = -g, eliminating trailing 1-D landmarks when decoupled."""
    diag = np.clip(np.diag(H), 1e-6, 1e32)
    A = H + np.diag(mu * diag)
    n = len(g)
    p = n - n_landmark
    if n_landmark:
        H_ll = A[p:, p:]
        if np.count_nonzero(H_ll - np.diag(np.diag(H_ll))) == 0:
            inv = 1.0 / np.diag(H_ll)
            H_pl = A[:p, p:]
            W = H_pl * inv[None, :]
            S = A[:p, :p] - W @ H_pl.T
            rhs = -g[:p] + W @ g[p:]
            dp = _dense_solve(S, rhs) if p else np.zeros(0)
            dl = inv * (-g[p:] - H_pl.T @ dp)
            return np.concatenate([dp, dl])
    return _dense_solve(A, -g)


def _dense_solve(A, b):
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b)
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _as_block_map(blocks):
    if isinstance(blocks, dict):
        return blocks
    return {block.block_id: block for block in blocks}


def solve(blocks, factors, max_iterations=10, tolerance=1e-6, initial_damping=1e-8,
          time_budget_ms=None, gradient_tolerance=1e-10):
    """
    Minimize the robustified sum of squared residuals.

    Block values are updated in place.

    Args:
        blocks: mapping id -> ParameterBlock, or an iterable of blocks
        factors (list): Factor / FactorBatch instances
        max_iterations (int): LM iteration cap
        tolerance (float): relative cost decrease that counts as converged
        initial_damping (float): starting Marquardt damping
        time_budget_ms (float): stop before starting an iteration past this
        gradient_tolerance (float): max-norm of the gradient that counts as converged

    Returns:
        SolveReport

    Raises:
        StructureError: dangling block reference, or nothing to optimize
        NumericalFailure: a factor produced NaN/inf
    """
    blocks = _as_block_map(blocks)
    problem = _Problem(blocks, factors)
    if problem.n_free == 0:
        raise StructureError("solve needs at least one non-constant parameter block")

    start = time.perf_counter()
    values = problem.values()
    cost, J, r = problem.linearize(values)
    initial_cost = cost
    mu, nu = initial_damping, 2.0
    iterations, failures = 0, 0
    termination = Termination.MAX_ITERATIONS
    budget_exceeded = False

    while True:
        Jf = J @ problem.basis
        g = Jf.T @ r
        if cost == 0.0 or np.max(np.abs(g), initial=0.0) < gradient_tolerance:
            termination = Termination.CONVERGED
            break
        if iterations >= max_iterations:
            break
        if time_budget_ms is not None and (time.perf_counter() - start) * 1e3 >= time_budget_ms:
            budget_exceeded = True
            break
        iterations += 1
        H = (Jf.T @ Jf).toarray()
        step = _solve_damped(H, g, mu, problem.n_landmark)
        trial = problem.retract(values, step) if np.all(np.isfinite(step)) else None
        accepted = False
        if trial is not None:
            new_cost, _, _ = problem.linearize(trial, jacobians=False)
            predicted = -(g @ step) - 0.5 * step @ H @ step
            ratio = (cost - new_cost) / predicted if predicted > 0 else -1.0
            if ratio > 0 and np.isfinite(new_cost):
                accepted = True
        logger.debug("LM iteration %d: cost %.6g, damping %.3g, %s", iterations, cost, mu,
                     "accepted" if accepted else "rejected")
        if accepted:
            relative = (cost - new_cost) / max(cost, 1e-300)
            values = trial
            cost, J, r = problem.linearize(values)
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * ratio - 1.0) ** 3)
            nu, failures = 2.0, 0
            if relative < tolerance:
                termination = Termination.CONVERGED
                break
        else:
            mu *= nu
            nu *= 2.0
            failures += 1
            if failures >= 10 or mu > 1e16:
                termination = Termination.TRUST_REGION_FAILURE
                break

    for bid in problem.order:
        blocks[bid].value = values[bid]
    elapsed = (time.perf_counter() - start) * 1e3
    if budget_exceeded:
        logger.debug("solve stopped by its %.1f ms budget after %d iterations", time_budget_ms, iterations)
    return SolveReport(initial_cost, cost, iterations, termination, elapsed, budget_exceeded)


def evaluate_cost(blocks, factors):
    """Robustified cost 0.5 * sum rho(|r|^2) at the current block values."""
    blocks = _as_block_map(blocks)
    problem = _Problem(blocks, factors)
    cost, _, _ = problem.linearize(problem.values(), jacobians=False)
    return cost


def check_jacobian(factor, blocks, step=1e-6, atol=1e-7, floor=1e-8):
    """
    Compare analytic Jacobians against central differences on the manifold.

    Differences below ``atol`` are taken as finite-difference noise; others
    are divided by max(|analytic|, |numeric|, floor).

    Returns:
        float: worst element-wise relative error
    """
    blocks = _as_block_map(blocks)
    slot_ids, batch = _slot_layout(factor)
    values = [np.stack([blocks[b].value for b in ids]) for ids in slot_ids]
    _, Js = _evaluate(factor, values, batch)
    worst = 0.0
    for k, ids in enumerate(slot_ids):
        manifold = blocks[ids[0]].manifold
        tangent = blocks[ids[0]].tangent_dim
        for d in range(tangent):
            delta = np.zeros(tangent)
            delta[d] = step
            plus = [v.copy() for v in values]
            minus = [v.copy() for v in values]
            plus[k] = np.stack([manifold_plus(manifold, v, delta) for v in values[k]])
            minus[k] = np.stack([manifold_plus(manifold, v, -delta) for v in values[k]])
            r_plus, _ = _evaluate(factor, plus, batch, jacobians=False)
            r_minus, _ = _evaluate(factor, minus, batch, jacobians=False)
            numeric = (r_plus - r_minus) / (2.0 * step)
            analytic = Js[k][:, :, d]
            diff = np.abs(analytic - numeric)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            err = np.where(diff <= atol, 0.0, diff / denom)
            worst = max(worst, float(np.max(err, initial=0.0)))
    return worst


class PriorFactor(Factor):
    """
    Linear Gaussian prior r = r0 + J0 (x [-] x0) left by marginalization.
    """

    def __init__(self, block_ids, manifolds, linearization_points, J0, r0):
        super().__init__(block_ids)
        self.manifolds = list(manifolds)
        self.x0 = [np.array(v, dtype=float) for v in linearization_points]
        self.J0 = np.asarray(J0, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self.dims = [3 if m is Manifold.ROTATION else len(v) for m, v in zip(self.manifolds, self.x0)]
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def evaluate(self, values, jacobians=True):
        dx = np.concatenate([manifold_minus(m, v, x0) for m, v, x0 in zip(self.manifolds, values, self.x0)])
        residual = self.r0 + self.J0 @ dx
        if not jacobians:
            return residual, None
        Js = []
        for k, m in enumerate(self.manifolds):
            block = self.J0[:, self.offsets[k]:self.offsets[k + 1]]
            if m is Manifold.ROTATION:
                block = block @ right_jacobian_inverse(dx[self.offsets[k]:self.offsets[k + 1]])
            Js.append(block)
        return residual, Js


def marginalize(blocks, factors, marginalized_ids, eps=1e-8):
    """
    Eliminate blocks from a linearized problem by Schur complement.

    Every factor touching a marginalized block must be passed in; the
    result is a PriorFactor on the remaining non-constant blocks they touch.

    Returns:
        PriorFactor or None when nothing remains connected
    """
    blocks = _as_block_map(blocks)
    marginalized = [bid for bid in marginalized_ids if bid in blocks and not blocks[bid].constant]
    problem = _Problem(blocks, factors, use_subspace=False, trailing=marginalized)
    kept = [bid for bid in problem.order if bid not in set(marginalized)]
    if not kept:
        return None
    _, J, r = problem.linearize(problem.values())
    H = (J.T @ J).toarray()
    g = J.T @ r
    n_keep = sum(blocks[b].tangent_dim for b in kept)

    H_mm = H[n_keep:, n_keep:]
    if H_mm.size:
        w, V = np.linalg.eigh(0.5 * (H_mm + H_mm.T))
        inv = np.where(w > eps, 1.0 / np.where(w > eps, w, 1.0), 0.0)
        H_mm_inv = (V * inv) @ V.T
        H_km = H[:n_keep, n_keep:]
        H_star = H[:n_keep, :n_keep] - H_km @ H_mm_inv @ H_km.T
        g_star = g[:n_keep] - H_km @ H_mm_inv @ g[n_keep:]
    else:
        H_star, g_star = H, g

    w, V = np.linalg.eigh(0.5 * (H_star + H_star.T))
    keep = w > eps
    sqrt_w = np.sqrt(w[keep])
    J0 = sqrt_w[:, None] * V[:, keep].T
    r0 = (V[:, keep].T @ g_star) / sqrt_w
    logger.debug("marginalized %d blocks into a rank-%d prior on %d blocks",
                 len(marginalized), int(keep.sum()), len(kept))
    return PriorFactor(kept, [blocks[b].manifold for b in kept],
                       [blocks[b].value.copy() for b in kept], J0, r0)
