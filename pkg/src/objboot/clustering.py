"""Joint-space clustering of the tokens of two views into shared object clusters.

The tokens of both views are concatenated (2N rows) and partitioned into K
clusters with entropic optimal transport under uniform marginals. The cost is
a cosine cost between tokens and centroids plus, optionally, a positional
cost: the distance from a token to the closest member of each cluster in the
previous round. Because a cluster is shared between views, object k of view 1
corresponds to object k of view 2 without any matching step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import ClusterConfig, ConfigError
from .encoder import NumericError

_COS_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    pass


@dataclass
class TransportCost:
    semantic: np.ndarray  # (2N, K)
    positional: np.ndarray  # (2N, K)
    lambda_pos: float

    @property
    def total(self) -> np.ndarray:
        if self.lambda_pos == 0:
            return self.semantic
        return self.semantic + self.lambda_pos * self.positional


@dataclass
class Assignment:
    soft: np.ndarray  # (2N, K)
    hard: np.ndarray  # (2N,)
    view_split: tuple[np.ndarray, np.ndarray]  # (N, K) each, columns l1-normalised or zero


@dataclass
class ObjectSet:
    reps_view1: np.ndarray  # (K, d); rows of invalid objects are zero
    reps_view2: np.ndarray
    valid_mask: np.ndarray  # (K,) bool
    centroids: np.ndarray  # (K, d)

    @property
    def k(self) -> int:
        return len(self.valid_mask)

    @property
    def valid_indices(self) -> np.ndarray:
        return np.flatnonzero(self.valid_mask)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), _COS_FLOOR)


def init_centroid_indices(n_tokens: int, k: int, seed: int) -> np.ndarray:
    if k > n_tokens:
        raise ConfigError(f"K={k} exceeds the {n_tokens} available tokens")
    if k < 1:
        raise ConfigError("K must be >= 1")
    return np.random.default_rng(seed).choice(n_tokens, size=k, replace=False)


def init_centroids(z_cat: np.ndarray, k: int, seed: int) -> np.ndarray:
    """K token rows drawn uniformly without replacement."""
    return z_cat[init_centroid_indices(len(z_cat), k, seed)].copy()


def semantic_cost(z_cat: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Negative cosine similarity between every token and every centroid."""
    return -np.clip(_unit_rows(z_cat) @ _unit_rows(centroids).T, -1.0, 1.0)


def positional_cost(coords: np.ndarray, prev_sets: list) -> np.ndarray:
    """Entry (i, j): distance from token i to the closest token of ``prev_sets[j]``."""
    dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    out = np.empty((len(coords), len(prev_sets)))
    for j, members in enumerate(prev_sets):
        members = np.asarray(members, dtype=np.int64)
        if members.size == 0:
            raise RuntimeError(f"cluster {j} has no members; drop empty clusters before building the cost")
        out[:, j] = dist[:, members].min(axis=1)
    return out


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_assign(cost: np.ndarray | TransportCost, epsilon: float, iters: int = 100,
                    tol: float = 1e-6, newton_steps: int = 300) -> np.ndarray:
    """Entropic OT plan with row marginals 1/(2N) and column marginals 1/K.

    Alternating scaling on a row-shifted kernel (log domain if that kernel
    would underflow), exiting early once the row-marginal residual is at most
    ``tol`` (columns are exact after each column update).
    Near-permutation problems (K close to 2N, small epsilon) converge very
    slowly under plain scaling; if ``iters`` runs out first, damped Newton
    steps on the same dual potentials finish the job. Both reach the same
    fixed point.
    """
    total = cost.total if isinstance(cost, TransportCost) else np.asarray(cost)
    if not np.all(np.isfinite(total)):
        raise NumericError("transport cost")
    if epsilon <= 0 or iters < 1:
        raise ConfigError("sinkhorn needs epsilon > 0 and iters >= 1")
    n, k = total.shape
    log_kernel = -total / epsilon
    plan = _scaling_loop(log_kernel, iters, tol)
    if plan is None:
        plan = _log_loop(log_kernel, iters, tol)
    if isinstance(plan, np.ndarray):
        return plan
    return _newton_polish(log_kernel, *plan, tol, newton_steps)


def _scaling_loop(log_kernel, iters, tol):
    """Plain alternating scaling on a row-shifted kernel.

    Returns the plan on convergence, ``(f, g, plan)`` potentials if ``iters``
    ran out, or ``None`` if the scalings left the floating-point range.
    """
    n, k = log_kernel.shape
    r, c = 1.0 / n, 1.0 / k
    shift = log_kernel.max(axis=1)
    kern = np.exp(log_kernel - shift[:, None])  # every row keeps an entry equal to 1
    v = np.ones(k)
    kv = kern @ v
    with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
        for _ in range(iters):
            u = r / kv
            v = c / (kern.T @ u)
            kv = kern @ v
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and kv.min() > 0):
                return None
            if np.abs(u * kv - r).max() <= tol:
                return u[:, None] * kern * v[None, :]
    return np.log(u) - shift, np.log(v), u[:, None] * kern * v[None, :]


def _log_loop(log_kernel, iters, tol):
    n, k = log_kernel.shape
    log_r, log_c = -np.log(n), -np.log(k)
    g = np.zeros(k)
    for _ in range(iters):
        f = log_r - _lse(log_kernel + g[None, :], axis=1)
        g = log_c - _lse(log_kernel + f[:, None], axis=0)
        plan = np.exp(log_kernel + f[:, None] + g[None, :])
        if np.abs(plan.sum(axis=1) - 1.0 / n).max() <= tol:
            return plan
    return f, g, plan


def _newton_polish(log_kernel, f, g, plan, tol, steps):
    """Levenberg-Marquardt-damped Newton on the convex dual.

    The dual psi(f, g) = sum(plan) - <f, r> - <g, c> has the marginal residual
    as gradient and the (singular, often badly conditioned) block matrix
    ``jac`` as Hessian. Solving with ``jac + mu I`` always gives a descent
    direction; ``mu`` shrinks after accepted steps and grows after rejected ones.
    """
    n, k = plan.shape
    target = np.concatenate([np.full(n, 1.0 / n), np.full(k, 1.0 / k)])

    def psi(f_, g_, p_):
        return p_.sum() - f_.sum() / n - g_.sum() / k

    res = np.concatenate([plan.sum(axis=1), plan.sum(axis=0)]) - target
    value = psi(f, g, plan)
    mu = 1e-10
    eye = np.eye(n + k)
    for _ in range(steps):
        if np.abs(res).max() <= tol:
            break
        jac = np.block([[np.diag(plan.sum(axis=1)), plan], [plan.T, np.diag(plan.sum(axis=0))]])
        for _ in range(40):
            step = np.linalg.solve(jac + mu * eye, -res)
            f_new, g_new = f + step[:n], g + step[n:]
            with np.errstate(over="ignore", invalid="ignore"):
                cand = np.exp(log_kernel + f_new[:, None] + g_new[None, :])
                cand_value = psi(f_new, g_new, cand)
            if np.isfinite(cand_value) and cand_value <= value + 1e-4 * float(res @ step):
                mu = max(mu * 0.1, 1e-14)
                break
            mu *= 10.0
        else:
            break
        f, g, plan, value = f_new, g_new, cand, cand_value
        res = np.concatenate([plan.sum(axis=1), plan.sum(axis=0)]) - target
    return plan


def marginal_residual(plan: np.ndarray) -> float:
    n, k = plan.shape
    return max(np.abs(plan.sum(axis=1) - 1.0 / n).max(), np.abs(plan.sum(axis=0) - 1.0 / k).max())


def hard_argmax(soft: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest cluster index on ties
    return np.argmax(soft, axis=1)


def split_views(weights: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split (2N, K) hard weights per view, l1-normalise columns, return validity."""
    w1, w2 = weights[:n], weights[n:]
    s1, s2 = w1.sum(axis=0), w2.sum(axis=0)
    valid = (s1 > 0) & (s2 > 0)
    w1 = np.divide(w1, s1, out=np.zeros_like(w1), where=s1 > 0)
    w2 = np.divide(w2, s2, out=np.zeros_like(w2), where=s2 > 0)
    return w1, w2, valid


def _objects(z1, z2, soft, hard, centroids) -> tuple[Assignment, ObjectSet]:
    n = len(z1)
    k = soft.shape[1]
    onehot = np.zeros_like(soft)
    onehot[np.arange(len(hard)), hard] = 1.0
    w1, w2, valid = split_views(soft * onehot, n)
    reps1, reps2 = w1.T @ z1, w2.T @ z2
    reps1[~valid] = 0.0
    reps2[~valid] = 0.0
    assignment = Assignment(soft=soft, hard=hard, view_split=(w1, w2))
    return assignment, ObjectSet(reps1, reps2, valid, np.asarray(centroids).reshape(k, -1))


def _check_inputs(z1: np.ndarray, z2: np.ndarray, k: int) -> np.ndarray:
    if z1.shape != z2.shape:
        raise ValueError(f"view token shapes differ: {z1.shape} vs {z2.shape}")
    z = np.concatenate([z1, z2], axis=0)
    if k > len(z):
        raise ConfigError(f"K={k} must not exceed 2N={len(z)}")
    if not np.all(np.isfinite(z)):
        raise NumericError("clustering input tokens")
    if not np.any(np.linalg.norm(z, axis=1) > _COS_FLOOR):
        raise DegenerateInputError("all tokens are zero; cosine assignments undefined")
    return z


def cluster_joint(z1: np.ndarray, z2: np.ndarray, coords: np.ndarray, cfg: ClusterConfig,
                  seed: int = 0) -> tuple[Assignment, ObjectSet]:
    """Sinkhorn joint-space clustering with positional cues.

    ``coords`` is (2N, 2): view-1 patch coordinates followed by view-2 ones.
    Clusters that receive no token (by argmax) during the loop are dropped from
    later rounds; their columns stay zero.
    """
    z = _check_inputs(z1, z2, cfg.k)
    k = cfg.k
    idx = init_centroid_indices(len(z), k, seed)
    centroids = z[idx].copy()
    active = np.arange(k)
    members = [np.array([i]) for i in idx]
    soft = np.zeros((len(z), k))
    for _ in range(cfg.outer_iters):
        sem = semantic_cost(z, centroids[active])
        if cfg.lambda_pos > 0:
            pos = positional_cost(coords, [members[j] for j in active])
        else:
            pos = np.zeros_like(sem)
        plan = sinkhorn_assign(TransportCost(sem, pos, cfg.lambda_pos), cfg.epsilon,
                               cfg.sinkhorn_iters, cfg.sinkhorn_tol)
        soft = np.zeros((len(z), k))
        soft[:, active] = plan
        centroids[active] = plan.T @ z
        owner = active[hard_argmax(plan)]
        members = [np.flatnonzero(owner == j) for j in range(k)]
        active = np.array([j for j in active if members[j].size > 0])
    return _objects(z1, z2, soft, hard_argmax(soft), centroids)


def kmeans_joint(z1: np.ndarray, z2: np.ndarray, cfg: ClusterConfig, seed: int = 0,
                 history: list | None = None) -> tuple[Assignment, ObjectSet]:
    """Spherical Lloyd iterations on the 2N tokens (cosine distance).

    If ``history`` is given, the objective sum(1 - cos(token, centroid)) after
    each assignment step is appended to it.
    """
    z = _check_inputs(z1, z2, cfg.k)
    zn = _unit_rows(z)
    k = cfg.k
    directions = zn[init_centroid_indices(len(z), k, seed)].copy()
    active = np.arange(k)
    assign = None
    for _ in range(cfg.kmeans_iters):
        sims = zn @ directions[active].T
        new_assign = active[np.argmax(sims, axis=1)]
        if history is not None:
            history.append(float((1.0 - sims.max(axis=1)).sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        active = np.unique(assign)
        for j in active:
            directions[j] = _unit_rows(zn[assign == j].sum(axis=0))
    onehot = np.zeros((len(z), k))
    onehot[np.arange(len(z)), assign] = 1.0
    counts = onehot.sum(axis=0)
    centroids = np.divide(onehot.T @ z, counts[:, None], out=np.zeros((k, z.shape[1])), where=counts[:, None] > 0)
    return _objects(z1, z2, onehot / len(z), assign, centroids)


def label_objects(labels1: np.ndarray, labels2: np.ndarray, z1: np.ndarray, z2: np.ndarray,
                  num_classes: int) -> tuple[Assignment, ObjectSet]:
    """Supervised-oracle objects: one cluster per ground-truth class (K = C)."""
    labels = np.concatenate([labels1, labels2])
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    counts = onehot.sum(axis=0)
    z = np.concatenate([z1, z2])
    centroids = np.divide(onehot.T @ z, counts[:, None], out=np.zeros((num_classes, z.shape[1])),
                          where=counts[:, None] > 0)
    return _objects(z1, z2, onehot / len(labels), labels.astype(np.int64), centroids)


def assignment_grids(assignment: Assignment, grid: tuple[int, int]) -> dict:
    n = grid[0] * grid[1]
    return {
        "view1": assignment.hard[:n].reshape(grid).tolist(),
        "view2": assignment.hard[n:].reshape(grid).tolist(),
    }


def dump_assignments(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)
