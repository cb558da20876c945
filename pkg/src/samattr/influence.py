"""Influence estimators for SAM-trained models.

Three estimators share one sign convention: the returned influence
vector IF(k) points so that the leave-one-out retrained parameters are
approximately ``params - IF(k)``. The influence score is oriented so
that a positive score predicts the validation loss *increases* when the
point is removed, i.e. positive = valuable, negative = harmful.

* fast Hessian estimator: inverse-Hessian-vector product at the
  perturbed optimum, perturbation treated as fixed.
* total-Hessian estimator: additionally propagates the dependence of
  the worst-case perturbation on the parameters through the operator.
* trajectory estimator: sums learning-rate-weighted per-point gradients
  at perturbed checkpoints, gated by batch membership.

Inverse operators are applied via a damped, scaled truncated Neumann
iteration; no Hessian is ever materialized here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as mod
from .errors import DivergenceError, InvalidInputError
from .numcore import p_norm
from .samtrain import Trajectory, worst_perturbation

Array = np.ndarray
LinearOperator = Callable[[Array], Array]

ESTIMATORS = ("if_fast", "hif", "gif")


@dataclass(frozen=True)
class NeumannConfig:
    order: int = 500  # max iterations J
    alpha: float | None = None  # None: auto from a trace estimate
    damp: float = 0.01
    zeta: float = 1e-9  # L1 early-stop threshold

    def __post_init__(self):
        if self.order < 1:
            raise InvalidInputError("Neumann order must be >= 1")
        if self.alpha is not None and self.alpha <= 0.0:
            raise InvalidInputError("Neumann alpha must be > 0")
        if self.damp < 0.0 or self.zeta <= 0.0:
            raise InvalidInputError("need damp >= 0 and zeta > 0")


@dataclass(frozen=True)
class InfluenceRequest:
    k: int
    estimator: str = "if_fast"
    delta: float = -1.0  # up-weight factor; -1 models removal

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise InvalidInputError(f"unknown estimator {self.estimator!r}")


@dataclass
class InfluenceRecord:
    k: int
    estimator: str
    influence: Array
    score: float
    wall_time: float


def _auto_alpha(apply_A: LinearOperator, dim: int, iters: int = 20) -> float:
    """0.9 / (largest-eigenvalue estimate), via seeded power iteration.

    Scaling by the top eigenvalue (rather than the mean) keeps the
    Neumann iteration contractive whenever the operator is positive
    definite; a trace-based mean badly overshoots when the spectrum is
    spread out.
    """
    rng = np.random.default_rng(0)
    z = rng.standard_normal(dim)
    z /= np.linalg.norm(z)
    lam_max = 1.0
    for _ in range(iters):
        az = apply_A(z)
        norm = np.linalg.norm(az)
        if norm == 0.0 or not np.isfinite(norm):
            break
        lam_max = norm
        z = az / norm
    if lam_max <= 0.0:
        return 1.0
    return 0.9 / lam_max


def neumann_ihvp(apply_A: LinearOperator, g: Array, cfg: NeumannConfig) -> Array:
    """Approximate (A + damp*I)^{-1} g by the scaled Neumann iteration
    v_{j+1} = alpha*g + v_j - alpha*(A + damp*I) v_j, v_0 = alpha*g.

    Stops early once the L1 step shrinks below zeta. Convergence needs
    the damped, scaled operator to have spectral radius below one;
    divergence raises with advice to shrink alpha or raise damp.
    """
    g = np.asarray(g, dtype=np.float64)
    alpha = cfg.alpha if cfg.alpha is not None else _auto_alpha(apply_A, g.size)
    ag = alpha * g
    v = ag.copy()
    for _ in range(cfg.order):
        v_next = ag + v - alpha * (apply_A(v) + cfg.damp * v)
        if not np.all(np.isfinite(v_next)):
            raise DivergenceError(
                "Neumann iteration diverged; reduce alpha or increase damp"
            )
        step = p_norm(v_next - v, 1.0)
        v = v_next
        if step <= cfg.zeta:
            break
    return v


def _train_rows(dataset: mod.Dataset) -> Array:
    rows = dataset.indices("train")
    if rows.size == 0:
        raise InvalidInputError("dataset has no train split rows")
    return rows


def perturbed_params(
    spec: mod.ModelSpec, dataset: mod.Dataset, params: Array, rho: float, p: float
) -> tuple[Array, Array]:
    """params + worst-case perturbation of the full train loss; also the
    perturbation itself."""
    rows = _train_rows(dataset)
    _, g = mod.subset_loss_grad(spec, params, dataset, rows, 1.0 / rows.size)
    eps = worst_perturbation(g, rho, p)
    return params + eps, eps


def sam_if_fast(
    spec: mod.ModelSpec,
    dataset: mod.Dataset,
    params: Array,
    rho: float,
    p: float,
    lam: float,
    k: int,
    ncfg: NeumannConfig,
) -> Array:
    """Fast estimator: -(H + lam*I)^{-1} grad_k, both taken at the
    perturbed optimum, with the perturbation held fixed."""
    rows = _train_rows(dataset)
    if not 0 <= k < rows.size:
        raise InvalidInputError(f"training index {k} out of range")
    w_pert, _ = perturbed_params(spec, dataset, params, rho, p)
    scale = 1.0 / rows.size
    _, gk = mod.subset_loss_grad(spec, w_pert, dataset, rows[k], scale)
    if not np.any(gk):
        return np.zeros_like(gk)

    def apply_A(v: Array) -> Array:
        return mod.hvp(spec, w_pert, dataset, rows, v, scale) + lam * v

    return -neumann_ihvp(apply_A, gk, ncfg)


def eps_jacobian_vec(
    spec: mod.ModelSpec,
    dataset: mod.Dataset,
    params: Array,
    rho: float,
    p: float,
    v: Array,
) -> Array:
    """Directional derivative of the worst-case perturbation: (d eps / d w) v.

    p = 2 uses the analytic projection form; other p fall back to a
    central difference of the closed-form perturbation. Assumes the
    gradient's sign pattern is stable, so a zero full-train gradient is
    rejected as singular.
    """
    v = np.asarray(v, dtype=np.float64)
    if rho == 0.0:
        return np.zeros_like(v)
    rows = _train_rows(dataset)
    scale = 1.0 / rows.size
    _, g = mod.subset_loss_grad(spec, params, dataset, rows, scale)
    gnorm = p_norm(g, 2.0)
    if gnorm == 0.0:
        raise InvalidInputError("perturbation Jacobian is singular at a zero gradient")
    if not np.any(v):
        return np.zeros_like(v)
    if p == 2.0:
        Hv = mod.hvp(spec, params, dataset, rows, v, scale)
        return rho * (Hv / gnorm - g * float(g @ Hv) / gnorm**3)
    h = 1e-4 * max(p_norm(params, 2.0), 1.0) / p_norm(v, 2.0)
    _, g_plus = mod.subset_loss_grad(spec, params + h * v, dataset, rows, scale)
    _, g_minus = mod.subset_loss_grad(spec, params - h * v, dataset, rows, scale)
    eps_plus = worst_perturbation(g_plus, rho, p)
    eps_minus = worst_perturbation(g_minus, rho, p)
    return (eps_plus - eps_minus) / (2.0 * h)


def sam_hif(
    spec: mod.ModelSpec,
    dataset: mod.Dataset,
    params: Array,
    rho: float,
    p: float,
    lam: float,
    k: int,
    ncfg: NeumannConfig,
) -> Array:
    """Total-Hessian estimator: like the fast one, but the operator also
    carries the curvature applied to the perturbation's parameter
    Jacobian. At rho = 0 the extra term vanishes exactly."""
    rows = _train_rows(dataset)
    if not 0 <= k < rows.size:
        raise InvalidInputError(f"training index {k} out of range")
    w_pert, _ = perturbed_params(spec, dataset, params, rho, p)
    scale = 1.0 / rows.size
    _, gk = mod.subset_loss_grad(spec, w_pert, dataset, rows[k], scale)
    if not np.any(gk):
        return np.zeros_like(gk)

    def apply_A(v: Array) -> Array:
        out = mod.hvp(spec, w_pert, dataset, rows, v, scale) + lam * v
        if rho > 0.0:
            jv = eps_jacobian_vec(spec, dataset, params, rho, p, v)
            out = out + mod.hvp(spec, w_pert, dataset, rows, jv, scale)
        return out

    return -neumann_ihvp(apply_A, gk, ncfg)


def sam_gif(
    trajectory: Trajectory,
    spec: mod.ModelSpec,
    dataset: mod.Dataset,
    k: int,
    mode: str = "sgd",
) -> Array:
    """Trajectory estimator: IF(k) = -sum_t w_t * [k used at t] * grad_k
    at the perturbed checkpoint, with w_t the recorded per-example
    coefficient. gd mode drops the batch-membership gate.

    The perturbation at each checkpoint is recomputed from that step's
    batch gradient, matching what the trainer actually applied.
    """
    if mode not in ("gd", "sgd"):
        raise InvalidInputError(f"unknown gif mode {mode!r}")
    if trajectory.param_count != spec.param_count:
        raise InvalidInputError("trajectory parameter count does not match the model")
    rows = _train_rows(dataset)
    if rows.size != trajectory.n_train:
        raise InvalidInputError("trajectory train size does not match the dataset")
    if not 0 <= k < rows.size:
        raise InvalidInputError(f"training index {k} out of range")
    if trajectory.rho is None or trajectory.p is None:
        raise InvalidInputError(
            "trajectory is missing its SAM settings; set trajectory.rho and "
            "trajectory.p before computing trajectory influence"
        )
    total = np.zeros(spec.param_count)
    for ck in trajectory.checkpoints:
        if ck.batch.size == 0:  # final-state checkpoint, no update at this step
            continue
        if mode == "sgd" and k not in ck.batch:
            continue
        batch_rows = rows[ck.batch]
        _, g_batch = mod.subset_loss_grad(
            spec, ck.params, dataset, batch_rows, 1.0 / ck.batch.size
        )
        eps = worst_perturbation(g_batch, trajectory.rho, trajectory.p)
        _, gk = mod.subset_loss_grad(spec, ck.params + eps, dataset, rows[k], 1.0)
        total += ck.weight * gk
    return -total


def influence_score(
    spec: mod.ModelSpec,
    params: Array,
    dataset: mod.Dataset,
    val_indices,
    ifvec: Array,
) -> float:
    """Predicted validation-loss change on removal: positive = removing
    the point hurts (valuable), negative = removal helps (harmful).

    Computed as the validation-gradient inner product with the
    estimated parameter displacement (params_after_removal - params),
    which is -ifvec under the "omega_k ~ params - IF" convention.
    """
    val_indices = np.atleast_1d(np.asarray(val_indices, dtype=np.int64))
    if val_indices.size == 0:
        raise InvalidInputError("influence_score: empty validation index set")
    ifvec = np.asarray(ifvec, dtype=np.float64)
    _, gval = mod.subset_loss_grad(spec, params, dataset, val_indices, 1.0)
    return -float(gval @ ifvec)


def edit_model(params: Array, ifvec: Array) -> Array:
    """Apply an estimated removal: params - ifvec. Batched removals sum
    their influence vectors first (editing is linear)."""
    params = np.asarray(params, dtype=np.float64)
    ifvec = np.asarray(ifvec, dtype=np.float64)
    if params.shape != ifvec.shape:
        raise InvalidInputError("edit_model: length mismatch")
    return params - ifvec


def compute_influence(
    request: InfluenceRequest,
    spec: mod.ModelSpec,
    dataset: mod.Dataset,
    params: Array,
    rho: float,
    p: float,
    lam: float,
    ncfg: NeumannConfig,
    trajectory: Trajectory | None = None,
    gif_mode: str = "sgd",
    val_indices=None,
) -> InfluenceRecord:
    """Run one estimator for one training point and score it against the
    validation split (or explicit validation rows)."""
    start = time.perf_counter()
    if request.estimator == "if_fast":
        base = sam_if_fast(spec, dataset, params, rho, p, lam, request.k, ncfg)
    elif request.estimator == "hif":
        base = sam_hif(spec, dataset, params, rho, p, lam, request.k, ncfg)
    else:
        if trajectory is None:
            raise InvalidInputError("gif estimator needs a trajectory")
        base = sam_gif(trajectory, spec, dataset, request.k, gif_mode)
    # delta scales the up-weighting; removal (delta=-1) is the identity here.
    ifvec = (-request.delta) * base
    if val_indices is None:
        val_indices = dataset.indices("val")
    score = influence_score(spec, params, dataset, val_indices, ifvec)
    return InfluenceRecord(
        k=request.k,
        estimator=request.estimator,
        influence=ifvec,
        score=score,
        wall_time=time.perf_counter() - start,
    )
