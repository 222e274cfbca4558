"""Base classifiers behind a single fit/predict contract.

Four learner kinds: binary probit GLM, quadratic discriminant analysis,
random forest, and (weighted) ordered probit.  Every fitted model predicts a
probability vector over a fixed class universe; models degenerate to a
constant-class fallback when the training labels are single-class, so the
caller can fit them on arbitrarily small sub-regions without special-casing.

All stochastic fitting (the forest) draws from a counter-based generator
seeded explicitly; tree t uses a stream derived from (seed, t), so serial
and parallel builds, and any training-row permutation, give bit-identical
forests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri
from scipy.special import logsumexp

from mrsl.rng import make_rng

KINDS = ("ProbitGLM", "QDA", "RandomForest", "OrderedProbit")

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class FitError(RuntimeError):
    """A learner could not be fit (singular/indefinite or non-convergent)."""


@dataclass(frozen=True)
class LearnerSpec:
    """Learner kind plus kind-specific hyperparameters.

    Recognized hyperparameters: ``lam`` (ridge penalty, probit and ordered
    probit), ``jitter`` (relative covariance jitter, QDA), ``T``/``m``/
    ``leaf_min`` (forest size, candidate features per split, minimum leaf
    size).
    """

    kind: str
    hyperparams: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        hp = self.resolved()
        if hp.get("lam", 0.0) < 0:
            raise ValueError("ridge penalty lam must be >= 0")
        if hp.get("jitter", 0.0) < 0:
            raise ValueError("jitter must be >= 0")
        if self.kind == "RandomForest":
            if hp["T"] < 1 or hp["leaf_min"] < 1:
                raise ValueError("forest needs T >= 1 and leaf_min >= 1")
            if hp["m"] is not None and hp["m"] < 1:
                raise ValueError("features per split m must be >= 1")

    def resolved(self) -> dict:
        defaults = {
            "ProbitGLM": {"lam": 1e-4},
            "QDA": {"jitter": 1e-6},
            "RandomForest": {"T": 100, "m": None, "leaf_min": 5},
            "OrderedProbit": {"lam": 1e-4},
        }[self.kind]
        out = dict(defaults)
        for k, v in self.hyperparams.items():
            if k not in defaults:
                raise ValueError(f"{self.kind}: unknown hyperparameter {k!r}")
            out[k] = v
        return out


@dataclass(frozen=True)
class FittedLearner:
    """Immutable fitted model.

    ``classes`` is the class universe predictions are indexed by.  When
    ``constant_class`` is set the model ignores features and predicts that
    class with probability 1.  ``params`` holds kind-specific arrays:
    ProbitGLM beta0/beta; QDA per-present-class prior/mean/cov; forest
    trees; ordered probit beta plus non-decreasing cutpoints (equal adjacent
    cutpoints encode a category absent from training).
    """

    spec: LearnerSpec
    classes: tuple
    params: dict
    constant_class: Optional[int] = None

    @property
    def d(self) -> int:
        return int(self.params["d"])

    def predict_proba(self, y):
        return predict_proba(self, y)


def _as_xy(features, labels):
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels)
    if X.ndim != 2 or y.shape != (X.shape[0],) or X.shape[0] < 1:
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature value")
    return X, y.astype(np.int64)


def _constant(spec, classes, d, cls) -> FittedLearner:
    return FittedLearner(spec=spec, classes=tuple(classes),
                         params={"d": d}, constant_class=int(cls))


def constant_prob_learner(spec: LearnerSpec, classes, d: int,
                          probs) -> FittedLearner:
    """Feature-blind learner returning a fixed probability vector.

    Used for sub-regions with no training voxels, where the global class
    prevalence is the only available prediction.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (len(classes),) or np.any(probs < 0):
        raise ValueError("probs must be a non-negative vector over classes")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probs must sum to 1")
    return FittedLearner(spec=spec, classes=tuple(classes),
                         params={"d": int(d), "probs": _ro(probs.copy())})


# =============================================================== probit GLM


def probit_objective(params, X, y, lam) -> float:
    """Penalized negative log-likelihood at params = (beta0, beta)."""
    beta0 = params[0]
    beta = np.asarray(params[1:], dtype=float)
    s = 2.0 * y - 1.0
    eta = beta0 + X @ beta
    return float(-np.sum(log_ndtr(s * eta)) + 0.5 * lam * beta @ beta)


def _probit_grad_hess(params, X, y, lam):
    beta0 = params[0]
    beta = params[1:]
    s = 2.0 * y - 1.0
    eta = beta0 + X @ beta
    u = s * eta
    r = np.exp(-0.5 * u * u - _LOG_SQRT_2PI - log_ndtr(u))  # phi(u)/Phi(u)
    Xa = np.hstack([np.ones((X.shape[0], 1)), X])
    grad = -(Xa.T @ (s * r))
    grad[1:] += lam * beta
    w = r * (r + u)  # -d^2 log Phi(u) / d eta^2, always >= 0
    H = (Xa * w[:, None]).T @ Xa
    H[1:, 1:] += lam * np.eye(X.shape[1])
    return grad, H


def fit_probit(features, labels, lam: float = 1e-4) -> FittedLearner:
    """Ridge-penalized probit regression via damped Newton iterations.

    Maximizes sum_i log Phi(s_i (beta0 + beta^T x_i)) - (lam/2)||beta||^2,
    the intercept unpenalized.  Converged when the accepted step has max
    absolute component < 1e-8, capped at 100 iterations with up to 30 step
    halvings each.
    """
    X, y = _as_xy(features, labels)
    if not np.all(np.isin(y, (0, 1))).item():
        raise ValueError("probit labels must be 0/1")
    spec = LearnerSpec("ProbitGLM", {"lam": lam})
    if y.min() == y.max():
        return _constant(spec, (0, 1), X.shape[1], y[0])

    theta = np.zeros(X.shape[1] + 1)
    obj = probit_objective(theta, X, y, lam)
    for _ in range(100):
        grad, H = _probit_grad_hess(theta, X, y, lam)
        step = _solve_newton(H, -grad)
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            cand_obj = probit_objective(cand, X, y, lam)
            if cand_obj < obj:
                break
            scale *= 0.5
        else:
            break  # no improving step in 30 halvings: at a (numerical) optimum
        delta = scale * step
        theta = cand
        obj = cand_obj
        if np.max(np.abs(delta)) < 1e-8:
            break
    return FittedLearner(
        spec=spec, classes=(0, 1),
        params={"d": X.shape[1], "beta0": float(theta[0]),
                "beta": _ro(theta[1:].copy())},
    )


def _solve_newton(H, rhs):
    ridge = 0.0
    while True:
        try:
            step = np.linalg.solve(H + ridge * np.eye(H.shape[0]), rhs)
            if np.all(np.isfinite(step)):
                return step
        except np.linalg.LinAlgError:
            pass
        ridge = 1e-10 if ridge == 0.0 else ridge * 100.0
        if ridge > 1e-6:
            raise FitError("singular Hessian despite internal ridge up to 1e-6")


def predict_probit(model: FittedLearner, y):
    """P(class 1) = Phi(beta0 + beta^T y); accepts a vector or (n, d) rows."""
    if model.spec.kind != "ProbitGLM":
        raise ValueError("model is not a ProbitGLM")
    Y = np.asarray(y, dtype=float)
    single = Y.ndim == 1
    if single:
        Y = Y[None, :]
    if Y.shape[1] != model.d:
        raise ValueError(f"expected {model.d} features, got {Y.shape[1]}")
    if model.constant_class is not None:
        out = np.full(Y.shape[0], float(model.constant_class))
    else:
        out = ndtr(model.params["beta0"] + Y @ model.params["beta"])
    return float(out[0]) if single else out


# ====================================================================== QDA


def fit_qda(features, labels, jitter: float = 1e-6,
            classes: Optional[Sequence[int]] = None) -> FittedLearner:
    """Quadratic discriminant analysis with jittered class covariances.

    Class covariances are the usual n_z - 1 denominators plus eps*I, eps =
    ``jitter`` times the mean covariance diagonal (escalated tenfold, up to
    1e-3 relative, until the Cholesky factorization succeeds).  Classes with
    fewer than d + 1 samples borrow the pooled covariance.
    """
    X, y = _as_xy(features, labels)
    n, d = X.shape
    present = np.unique(y)
    if classes is None:
        classes = present
    classes = tuple(int(c) for c in classes)
    if not np.all(np.isin(present, classes)):
        raise ValueError("labels outside the declared class universe")
    spec = LearnerSpec("QDA", {"jitter": jitter})
    if present.size == 1:
        return _constant(spec, classes, d, present[0])

    means = {}
    covs = {}
    priors = {}
    resid_sq = np.zeros((d, d))
    n_resid = 0
    for z in present:
        Xz = X[y == z]
        means[z] = Xz.mean(axis=0)
        priors[z] = Xz.shape[0] / n
        centered = Xz - means[z]
        resid_sq += centered.T @ centered
        n_resid += Xz.shape[0] - 1
        if Xz.shape[0] >= d + 1:
            covs[z] = centered.T @ centered / (Xz.shape[0] - 1)
    if len(covs) < len(means):
        if n_resid >= 1:
            pooled = resid_sq / n_resid
        else:
            centered = X - X.mean(axis=0)  # every class a singleton
            pooled = centered.T @ centered / (n - 1)
        for z in present:
            covs.setdefault(int(z), pooled)

    chols = {z: _jittered_cholesky(covs[z], jitter) for z in means}
    return FittedLearner(
        spec=spec, classes=classes,
        params={
            "d": d,
            "class_labels": tuple(int(z) for z in present),
            "prior": _ro(np.array([priors[z] for z in present])),
            "mean": _ro(np.array([means[z] for z in present])),
            "cov": _ro(np.array([covs[z] for z in present])),
            "chol": _ro(np.array([chols[z] for z in present])),
        },
    )


def _jittered_cholesky(cov, jitter):
    base = float(np.mean(np.diag(cov)))
    if base <= 0.0:
        base = 1.0
    eps = jitter
    while True:
        try:
            return np.linalg.cholesky(cov + eps * base * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            eps = 1e-6 if eps == 0.0 else eps * 10.0
            if eps > 1e-3:
                raise FitError("covariance not positive definite after jitter")


def _qda_log_posterior(model, Y):
    p = model.params
    logs = []
    for k in range(len(p["class_labels"])):
        L = p["chol"][k]
        diff = Y - p["mean"][k]
        sol = np.linalg.solve(L, diff.T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        quad = np.sum(sol * sol, axis=0)
        logs.append(np.log(p["prior"][k]) - 0.5 * (logdet + quad))
    return np.column_stack(logs)


# ============================================================ random forest


def fit_random_forest(features, labels, T: int = 100, m: Optional[int] = None,
                      leaf_min: int = 5, seed: int = 0,
                      classes: Optional[Sequence[int]] = None) -> FittedLearner:
    """Bagged CART trees with Gini splits over m candidate features per node.

    Each tree t bootstraps n rows with a generator derived from (seed, t)
    and is grown until purity or until no split leaves both children with at
    least ``leaf_min`` rows.  Prediction is the vote-share vector over the
    class universe; ordinal labels are treated as nominal.  Training rows
    are canonicalized by sorting before any random draw, so row order cannot
    influence the fit.
    """
    X, y = _as_xy(features, labels)
    n, d = X.shape
    present = np.unique(y)
    if classes is None:
        classes = present
    classes = tuple(int(c) for c in classes)
    if not np.all(np.isin(present, classes)):
        raise ValueError("labels outside the declared class universe")
    if m is None:
        m = int(np.ceil(np.sqrt(d)))
    m = min(m, d)
    if T < 1 or m < 1 or leaf_min < 1:
        raise ValueError("need T >= 1, m >= 1, leaf_min >= 1")
    spec = LearnerSpec("RandomForest", {"T": T, "m": m, "leaf_min": leaf_min})
    if present.size == 1:
        return _constant(spec, classes, d, present[0])

    if list(classes) != sorted(classes):
        raise ValueError("class universe must be sorted")
    order = np.lexsort((y, *X.T[::-1]))
    X = X[order]
    y = y[order]
    y_idx = np.searchsorted(classes, y)

    trees = []
    for t in range(T):
        rng = make_rng(seed, t)
        boot = rng.integers(0, n, size=n)
        trees.append(_grow_tree(X, y_idx, boot, len(classes), m, leaf_min, rng))
    return FittedLearner(
        spec=spec, classes=classes,
        params={"d": d, "trees": tuple(trees), "seed": int(seed)},
    )


def _grow_tree(X, y_idx, rows, n_classes, m, leaf_min, rng):
    feat, thr, left, right, value = [], [], [], [], []

    def leaf(counts):
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(int(np.argmax(counts)))  # ties resolve to the lower class
        return len(feat) - 1

    def grow(rows):
        counts = np.bincount(y_idx[rows], minlength=n_classes)
        if counts.max() == len(rows) or len(rows) < 2 * leaf_min:
            return leaf(counts)
        cand = rng.choice(X.shape[1], size=m, replace=False)
        best = None  # (score, feature, threshold, sorted_rows, split_pos)
        for j in cand:
            v = X[rows, j]
            order = np.argsort(v, kind="stable")
            sv = v[order]
            sy = y_idx[rows[order]]
            # cumulative class counts after each prefix
            onehot = np.zeros((len(rows), n_classes))
            onehot[np.arange(len(rows)), sy] = 1.0
            cum = np.cumsum(onehot, axis=0)
            nl = np.arange(1, len(rows) + 1, dtype=float)
            ok = (sv[:-1] < sv[1:])
            ok &= (nl[:-1] >= leaf_min) & (len(rows) - nl[:-1] >= leaf_min)
            if not ok.any():
                continue
            pos = np.nonzero(ok)[0]
            cl = cum[pos]
            cr = counts - cl
            nl_p = nl[pos]
            nr_p = len(rows) - nl_p
            # minimizing weighted Gini == maximizing sum of squared counts/n
            score = (cl * cl).sum(axis=1) / nl_p + (cr * cr).sum(axis=1) / nr_p
            k = int(np.argmax(score))
            if best is None or score[k] > best[0]:
                t = 0.5 * (sv[pos[k]] + sv[pos[k] + 1])
                best = (score[k], int(j), float(t), rows[order], int(pos[k]))
        if best is None:
            return leaf(counts)
        _, j, t, sorted_rows, pos = best
        idx = len(feat)
        feat.append(j)
        thr.append(t)
        left.append(-1)
        right.append(-1)
        value.append(-1)
        li = grow(sorted_rows[: pos + 1])
        ri = grow(sorted_rows[pos + 1:])
        left[idx] = li
        right[idx] = ri
        return idx

    grow(np.sort(rows))
    return {
        "feature": _ro(np.array(feat, dtype=np.int64)),
        "threshold": _ro(np.array(thr, dtype=float)),
        "left": _ro(np.array(left, dtype=np.int64)),
        "right": _ro(np.array(right, dtype=np.int64)),
        "value": _ro(np.array(value, dtype=np.int64)),
    }


def _tree_apply(tree, Y):
    node = np.zeros(Y.shape[0], dtype=np.int64)
    feat = tree["feature"]
    active = feat[node] >= 0
    while active.any():
        nz = np.nonzero(active)[0]
        nd = node[nz]
        go_left = Y[nz, feat[nd]] <= tree["threshold"][nd]
        node[nz] = np.where(go_left, tree["left"][nd], tree["right"][nd])
        active = feat[node] >= 0
    return tree["value"][node]


# =========================================================== ordered probit


def _interval_log_prob(u, l):
    """log(Phi(u) - Phi(l)) elementwise, stable in both tails (u > l)."""
    u = np.asarray(u, dtype=float)
    l = np.asarray(l, dtype=float)
    out = np.empty(np.broadcast(u, l).shape)
    lower_inf = np.isneginf(l)
    upper_inf = np.isposinf(u)
    both = ~lower_inf & ~upper_inf
    out[lower_inf] = log_ndtr(np.broadcast_to(u, out.shape)[lower_inf])
    out[upper_inf] = log_ndtr(-np.broadcast_to(l, out.shape)[upper_inf])
    if both.any():
        ub = np.broadcast_to(u, out.shape)[both]
        lb = np.broadcast_to(l, out.shape)[both]
        flip = ub + lb > 0  # work on the side with the larger mass
        a = np.where(flip, -lb, ub)
        b = np.where(flip, -ub, lb)
        la, lb_ = log_ndtr(a), log_ndtr(b)
        with np.errstate(divide="ignore"):
            out[both] = la + np.log1p(-np.exp(np.minimum(lb_ - la, -1e-300)))
    return out


def _log_phi(x):
    with np.errstate(invalid="ignore"):
        out = -0.5 * x * x - _LOG_SQRT_2PI
    return np.where(np.isinf(x), -np.inf, out)


def ordered_probit_objective_grad(theta, X, z_idx, weights, lam, m):
    """Penalized weighted NLL and gradient in the internal parameterization.

    theta = (beta_1..beta_d, t_1..t_{m-1}) where the m-1 cutpoints are
    b_1 = t_1 and b_k = b_{k-1} + exp(t_k): ordering holds by construction.
    z_idx are collapsed category indices 0..m-1.
    """
    d = X.shape[1]
    beta = theta[:d]
    t = theta[d:]
    b = np.concatenate([[t[0]], np.exp(t[1:])]).cumsum() if m > 1 else np.array([])
    eta = X @ beta
    up = np.concatenate([b, [np.inf]])[z_idx] - eta
    lo = np.concatenate([[-np.inf], b])[z_idx] - eta
    # floor far below anything reachable with standardized covariates, so
    # the line search never sees an infinite objective or a NaN gradient
    logp = np.maximum(_interval_log_prob(up, lo), -690.0)
    nll = -float(weights @ logp) + 0.5 * lam * float(beta @ beta)

    ru = np.exp(_log_phi(up) - logp)  # phi(upper)/P, 0 at +inf
    rl = np.exp(_log_phi(lo) - logp)
    gbeta = X.T @ (weights * (ru - rl)) + lam * beta
    gb = np.zeros(m - 1)
    has_up = z_idx <= m - 2
    np.add.at(gb, z_idx[has_up], -(weights * ru)[has_up])
    has_lo = z_idx >= 1
    np.add.at(gb, z_idx[has_lo] - 1, (weights * rl)[has_lo])
    # chain rule through the cumulative-increment parameterization
    gt = np.empty(m - 1)
    if m > 1:
        suffix = np.cumsum(gb[::-1])[::-1]
        gt[0] = suffix[0]
        gt[1:] = np.exp(t[1:]) * suffix[1:]
    return nll, np.concatenate([gbeta, gt])


def fit_ordered_probit(features, labels, weights=None, lam: float = 1e-4,
                       Z: Optional[int] = None) -> FittedLearner:
    """Weighted ordered probit with ridge on the slopes, no intercept.

    Maximizes sum_i w_i log[Phi(a_{G_i} - beta^T x_i) - Phi(a_{G_i-1} -
    beta^T x_i)] - (lam/2)||beta||^2 by L-BFGS with the analytic gradient.
    Weights are rescaled to mean 1 internally, so constant weights reproduce
    the unweighted fit exactly and the penalty does not depend on the
    weights' overall scale.  Categories with no (positive-weight) training
    voxels get zero-width cutpoint intervals and predicted probability 0;
    this is flagged with a warning.
    """
    from scipy.optimize import minimize

    X, y = _as_xy(features, labels)
    n, d = X.shape
    if Z is None:
        Z = int(y.max())
    Z = int(Z)
    if np.any((y < 1) | (y > Z)):
        raise ValueError(f"ordinal labels must lie in 1..{Z}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be non-negative, one per row")
        if w.sum() == 0.0:
            raise ValueError("weights must not all be zero")
    if np.all(w == w[0]):
        w = np.ones(n)  # exact: constant weights reduce to the unweighted fit
    else:
        w = w / w.mean()

    spec = LearnerSpec("OrderedProbit", {"lam": lam})
    classes = tuple(range(1, Z + 1))
    wsum = np.bincount(y, weights=w, minlength=Z + 1)[1:]
    present = np.nonzero(wsum > 0)[0] + 1
    if present.size < 2:
        return _constant(spec, classes, d, present[0])
    if present.size < Z:
        absent = sorted(set(range(1, Z + 1)) - set(present.tolist()))
        warnings.warn(
            f"ordinal categories {absent} absent from training; their "
            "cutpoint intervals degenerate to zero width",
            RuntimeWarning,
        )

    keep = w > 0
    Xk, yk, wk = X[keep], y[keep], w[keep]
    m = present.size
    z_idx = np.searchsorted(present, yk)

    # cutpoint starts from Phi^{-1} of the weighted cumulative frequencies
    freq = np.bincount(z_idx, weights=wk, minlength=m)
    cum = np.cumsum(freq)[:-1] / freq.sum()
    b0 = ndtri(np.clip(cum, 1e-6, 1 - 1e-6))
    b0 = np.maximum.accumulate(b0)
    b0 += np.arange(m - 1) * 1e-8  # strictify exactly-tied starts
    t0 = np.concatenate([[b0[0]], np.log(np.maximum(np.diff(b0), 1e-8))])
    theta0 = np.concatenate([np.zeros(d), t0])

    res = minimize(
        ordered_probit_objective_grad, theta0, args=(Xk, z_idx, wk, lam, m),
        jac=True, method="L-BFGS-B",
        options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-10},
    )
    gnorm = float(np.max(np.abs(res.jac)))
    if not res.success and gnorm > 1e-5 * max(1.0, float(wk.sum())):
        raise FitError(
            f"ordered probit did not converge in 500 iterations "
            f"(status {res.status}: {res.message}; |grad|={gnorm:.2e})"
        )
    beta = res.x[:d]
    t = res.x[d:]
    b = np.concatenate([[t[0]], np.exp(t[1:])]).cumsum()

    # expand collapsed cutpoints to the full 1..Z scale; a_z separates
    # categories <= z from > z, so an absent category ends up with equal
    # neighbours (zero-width interval) or an infinite edge cutpoint
    cuts = np.empty(Z - 1)
    for z in range(1, Z):
        j = int(np.searchsorted(present, z, side="right"))
        if j == 0:
            cuts[z - 1] = -np.inf
        elif j == m:
            cuts[z - 1] = np.inf
        else:
            cuts[z - 1] = b[j - 1]
    return FittedLearner(
        spec=spec, classes=classes,
        params={"d": d, "beta": _ro(beta.copy()), "cutpoints": _ro(cuts),
                "Z": Z},
    )


# ================================================================= predict


def predict_proba(model: FittedLearner, y):
    """Probability vector over ``model.classes``; rows of a matrix map to rows."""
    Y = np.asarray(y, dtype=float)
    single = Y.ndim == 1
    if single:
        Y = Y[None, :]
    if Y.ndim != 2 or Y.shape[1] != model.d:
        raise ValueError(f"expected {model.d} features, got shape {np.shape(y)}")
    C = len(model.classes)
    if model.constant_class is not None:
        out = np.zeros((Y.shape[0], C))
        out[:, model.classes.index(model.constant_class)] = 1.0
        return out[0] if single else out
    if "probs" in model.params:
        out = np.tile(model.params["probs"], (Y.shape[0], 1))
        return out[0] if single else out

    kind = model.spec.kind
    if kind == "ProbitGLM":
        p1 = ndtr(model.params["beta0"] + Y @ model.params["beta"])
        out = np.column_stack([1.0 - p1, p1])
    elif kind == "QDA":
        logpost = _qda_log_posterior(model, Y)
        logpost -= logsumexp(logpost, axis=1, keepdims=True)
        out = np.zeros((Y.shape[0], C))
        cols = [model.classes.index(z) for z in model.params["class_labels"]]
        out[:, cols] = np.exp(logpost)
    elif kind == "RandomForest":
        votes = np.zeros((Y.shape[0], C))
        for tree in model.params["trees"]:
            votes[np.arange(Y.shape[0]), _tree_apply(tree, Y)] += 1.0
        out = votes / len(model.params["trees"])
    elif kind == "OrderedProbit":
        eta = Y @ model.params["beta"]
        cuts = model.params["cutpoints"]
        cdf = np.column_stack(
            [np.zeros_like(eta)] + [ndtr(a - eta) for a in cuts]
            + [np.ones_like(eta)]
        )
        out = np.maximum(np.diff(cdf, axis=1), 0.0)
    else:  # pragma: no cover
        raise ValueError(f"unknown kind {kind!r}")
    return out[0] if single else out


def fit_learner(spec: LearnerSpec, features, labels, *, weights=None,
                classes=None, seed: int = 0) -> FittedLearner:
    """Dispatch to the kind-specific fit with the spec's hyperparameters."""
    hp = spec.resolved()
    if spec.kind == "ProbitGLM":
        return fit_probit(features, labels, lam=hp["lam"])
    if spec.kind == "QDA":
        return fit_qda(features, labels, jitter=hp["jitter"], classes=classes)
    if spec.kind == "RandomForest":
        return fit_random_forest(features, labels, T=hp["T"], m=hp["m"],
                                 leaf_min=hp["leaf_min"], seed=seed,
                                 classes=classes)
    if spec.kind == "OrderedProbit":
        Z = None if classes is None else max(classes)
        return fit_ordered_probit(features, labels, weights=weights,
                                  lam=hp["lam"], Z=Z)
    raise ValueError(f"unknown kind {spec.kind!r}")  # pragma: no cover


# =========================================================== serialization


def _ro(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def learner_to_dict(model: FittedLearner) -> dict:
    def enc(v):
        if isinstance(v, np.ndarray):
            return {"shape": list(v.shape),
                    "data": [x.item() for x in v.ravel()]}
        if isinstance(v, (np.integer,)):
            return int(v)
        if isinstance(v, (np.floating,)):
            return float(v)
        return v

    doc = {
        "kind": model.spec.kind,
        "hyperparams": {k: enc(v) for k, v in model.spec.hyperparams.items()},
        "classes": list(model.classes),
        "constant_class": model.constant_class,
        "params": {},
    }
    for k, v in model.params.items():
        if k == "trees":
            doc["params"]["trees"] = [
                {name: enc(arr) for name, arr in tree.items()} for tree in v
            ]
        elif k == "class_labels":
            doc["params"][k] = list(v)
        else:
            doc["params"][k] = enc(v)
    return doc


def learner_from_dict(doc: dict) -> FittedLearner:
    def dec(v):
        if isinstance(v, dict) and set(v) == {"shape", "data"}:
            return _ro(np.array(v["data"], dtype=float).reshape(v["shape"]))
        return v

    params = {}
    for k, v in doc["params"].items():
        if k == "trees":
            trees = []
            for tree in v:
                td = {}
                for name, arr in tree.items():
                    a = dec(arr)
                    if name != "threshold":
                        a = _ro(a.astype(np.int64))
                    td[name] = a
                trees.append(td)
            params["trees"] = tuple(trees)
        elif k == "class_labels":
            params[k] = tuple(int(x) for x in v)
        elif k in ("d", "seed", "Z"):
            params[k] = int(v)
        else:
            params[k] = dec(v)
    return FittedLearner(
        spec=LearnerSpec(doc["kind"], dict(doc["hyperparams"])),
        classes=tuple(doc["classes"]),
        params=params,
        constant_class=doc.get("constant_class"),
    )
