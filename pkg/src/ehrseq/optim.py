"""Adam updates and the severity-score calibration fitters.

Two score -> probability maps are supported:

* ``logistic_linear``: ``p = sigmoid(b0 + b1 * s)``, maximum likelihood by
  damped Newton iterations.
* ``saps_curve``: ``logit(p) = g0 + g1 * s + g2 * ln(s + 1)``, fitted with a
  Levenberg-Marquardt least-squares solver.  For binary outcomes the
  residuals are deviance residuals, which makes the least-squares optimum the
  maximum-likelihood fit.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._io import atomic_write, require_file

ADAM_LR = 0.0005


class NonFiniteGradient(FloatingPointError):
    def __init__(self, block):
        super().__init__(f"non-finite gradient in block {block!r}; update rejected")
        self.block = block


class SeparationWarning(UserWarning):
    """Outcomes are perfectly separated by the score; the MLE does not exist."""


class LMError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(f"{message} ({diagnostics})")
        self.diagnostics = diagnostics


# -- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = ADAM_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied in place.  Returns (params, state).

    All gradient blocks are checked before anything is touched, so a
    non-finite gradient leaves both params and state unchanged.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# -- Levenberg-Marquardt ---------------------------------------------------

@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    n_iter: int
    accepted_costs: list
    reason: str


def check_jacobian(residual_fn, jacobian_fn, x, args=(), step=1e-6, rtol=1e-4):
    """Largest relative mismatch between `jacobian_fn` and central differences at `x`."""
    x = np.asarray(x, dtype=np.float64)
    jac = np.asarray(jacobian_fn(x, *args), dtype=np.float64)
    num = np.empty_like(jac)
    for k in range(x.size):
        h = step * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        num[:, k] = (np.asarray(residual_fn(xp, *args)) - np.asarray(residual_fn(xm, *args))) / (2 * h)
    scale = max(np.abs(num).max(), np.abs(jac).max(), 1e-12)
    err = float(np.abs(jac - num).max() / scale)
    if err > rtol:
        raise ValueError(f"jacobian disagrees with finite differences (relative error {err:.2e})")
    return err


def lm_fit(residual_fn, jacobian_fn, x0, args=(), max_iter=200, ftol=1e-10,
           lambda0=1e-3, lambda_max=1e16, verify_jacobian=True):
    """Minimise ``0.5 * ||r(x)||^2`` by Levenberg-Marquardt.

    Steps solve ``(J^T J + lam * diag(J^T J)) dx = -J^T r``; ``lam`` is divided
    by 10 after an accepted step and multiplied by 10 after a rejected one.
    Stops once an accepted step lowers the cost by less than `ftol`
    (relative), after `max_iter` iterations, or when no damping can lower the
    cost any further.
    """
    x = np.array(x0, dtype=np.float64)
    if verify_jacobian:
        check_jacobian(residual_fn, jacobian_fn, x, args)
    r = np.asarray(residual_fn(x, *args), dtype=np.float64)
    cost = 0.5 * float(r @ r)
    initial = cost
    accepted = [cost]
    lam = lambda0
    reason = "max_iter"
    it = 0
    while it < max_iter:
        it += 1
        jac = np.asarray(jacobian_fn(x, *args), dtype=np.float64)
        if not np.all(np.isfinite(jac)):
            raise LMError("non-finite jacobian", {"iteration": it, "cost": cost, "lambda": lam, "x": x.tolist()})
        a = jac.T @ jac
        g = jac.T @ r
        if not np.any(g):
            reason = "zero_gradient"
            break
        diag = np.maximum(np.diag(a), 1e-12 * max(np.diag(a).max(), 1e-300))
        while True:
            try:
                dx = np.linalg.solve(a + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                x_new = x + dx
                r_new = np.asarray(residual_fn(x_new, *args), dtype=np.float64)
                cost_new = 0.5 * float(r_new @ r_new)
                if np.isfinite(cost_new) and cost_new < cost:
                    break
            lam *= 10.0
            if lam > lambda_max:
                if dx is None:
                    raise LMError("singular normal equations at maximum damping",
                                  {"iteration": it, "cost": cost, "lambda": lam, "x": x.tolist()})
                return LMResult(x, cost, initial, it, accepted, "no_further_decrease")
        decrease = (cost - cost_new) / cost if cost > 0 else 0.0
        x, r, cost = x_new, r_new, cost_new
        accepted.append(cost)
        lam = max(lam / 10.0, 1e-15)
        if decrease < ftol or cost == 0.0:
            reason = "ftol"
            break
    return LMResult(x, cost, initial, it, accepted, reason)


# -- calibration models ----------------------------------------------------

@dataclass
class CalibrationModel:
    kind: str  # "logistic_linear" or "saps_curve"
    coef: tuple
    diagnostics: dict = field(default_factory=dict)

    def save(self, path):
        with atomic_write(path) as f:
            f.write(f"kind = {self.kind}\n")
            f.write("coef = " + " ".join(repr(float(c)) for c in self.coef) + "\n")
            for k in sorted(self.diagnostics):
                f.write(f"{k} = {self.diagnostics[k]}\n")

    @classmethod
    def load(cls, path):
        kv = {}
        with open(require_file(path), encoding="utf-8") as f:
            for line in f:
                if "=" in line:
                    k, v = line.split("=", 1)
                    kv[k.strip()] = v.strip()
        coef = tuple(float(c) for c in kv.pop("coef").split())
        return cls(kv.pop("kind"), coef, kv)


def _design(kind, scores):
    s = np.asarray(scores, dtype=np.float64)
    if kind == "logistic_linear":
        return np.column_stack([np.ones_like(s), s])
    if kind == "saps_curve":
        if np.any(s <= -1.0):
            raise ValueError("saps_curve needs scores > -1 (ln(s + 1))")
        return np.column_stack([np.ones_like(s), s, np.log1p(s)])
    raise ValueError(f"unknown calibration kind {kind!r}")


def severity_to_probability(score, calib):
    """Mortality probability for a severity score (scalar or array)."""
    s = np.asarray(score, dtype=np.float64)
    if calib.kind == "saps_curve" and np.any(s < 0):
        raise ValueError("saps_curve is defined for non-negative scores")
    eta = _design(calib.kind, np.atleast_1d(s)) @ np.asarray(calib.coef)
    p = expit(eta)
    return float(p[0]) if s.ndim == 0 else p


def _check_outcomes(scores, outcomes):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(outcomes, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and outcomes must be 1-d and equally long")
    if np.unique(s).size < 2:
        raise ValueError("need at least two distinct scores")
    if not (np.any(y == 1) and np.any(y == 0)) or np.any((y != 0) & (y != 1)):
        raise ValueError("outcomes must be 0/1 with both classes present")
    return s, y


def _separated(s, y):
    s0, s1 = s[y == 0], s[y == 1]
    return s0.max() <= s1.min() or s1.max() <= s0.min()


def fit_logistic(scores, outcomes, tol=1e-8, max_iter=100, ridge=None):
    """Maximum-likelihood ``sigmoid(b0 + b1 * s)`` by damped Newton.

    Converges when the gradient of the mean negative log-likelihood has norm
    below `tol`.  Perfectly separated data have no finite MLE; a small ridge
    penalty is then added and a SeparationWarning issued.
    """
    s, y = _check_outcomes(scores, outcomes)
    if ridge is None and _separated(s, y):
        warnings.warn("score perfectly separates outcomes; using ridge-bounded coefficients",
                      SeparationWarning, stacklevel=2)
        ridge = 1e-2
    ridge = ridge or 0.0
    # centre/scale the score for conditioning, map back at the end
    mu, sd = s.mean(), s.std()
    z = (s - mu) / sd
    x = np.column_stack([np.ones_like(z), z])
    n = s.size
    beta = np.array([math.log(y.mean() / (1 - y.mean())), 0.0])

    def objective(b):
        eta = x @ b
        nll = np.logaddexp(0.0, eta) - y * eta
        return nll.mean() + 0.5 * ridge * (b @ b)

    f = objective(beta)
    grad_norm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(x @ beta)
        grad = x.T @ (p - y) / n + ridge * beta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            break
        hess = (x * (p * (1 - p))[:, None]).T @ x / n + ridge * np.eye(2)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-10:
            cand = beta - t * step
            f_cand = objective(cand)
            if f_cand <= f:
                break
            t *= 0.5
        beta, f = cand, f_cand
    b1 = beta[1] / sd
    b0 = beta[0] - b1 * mu
    diag = {"iterations": it, "grad_norm": grad_norm, "ridge": ridge, "n": n}
    return CalibrationModel("logistic_linear", (float(b0), float(b1)), diag)


def deviance_residuals(kind):
    """(residual_fn, jacobian_fn) whose least-squares optimum is the Bernoulli MLE."""

    def residual(coef, s, y):
        eta = _design(kind, s) @ coef
        nll = np.logaddexp(0.0, eta) - y * eta
        return np.sqrt(2.0 * np.maximum(nll, 1e-300))

    def jacobian(coef, s, y):
        x = _design(kind, s)
        eta = x @ coef
        r = residual(coef, s, y)
        return ((expit(eta) - y) / r)[:, None] * x

    return residual, jacobian


def probability_residuals(kind):
    """(residual_fn, jacobian_fn) for fitting the curve to observed probabilities."""

    def residual(coef, s, p_obs):
        return expit(_design(kind, s) @ coef) - p_obs

    def jacobian(coef, s, p_obs):
        x = _design(kind, s)
        p = expit(x @ coef)
        return (p * (1 - p))[:, None] * x

    return residual, jacobian


def fit_curve(scores, targets, kind="saps_curve", x0=None, residuals="deviance", **lm_kwargs):
    """Fit a calibration curve with Levenberg-Marquardt.

    ``residuals="deviance"`` expects 0/1 outcomes; ``"probability"`` expects
    observed mortality probabilities in [0, 1].
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    n_coef = 3 if kind == "saps_curve" else 2
    if residuals == "deviance":
        s, t = _check_outcomes(s, t)
        res, jac = deviance_residuals(kind)
    elif residuals == "probability":
        res, jac = probability_residuals(kind)
    else:
        raise ValueError(f"unknown residual type {residuals!r}")
    if x0 is None:
        x0 = np.zeros(n_coef)
        rate = float(np.clip(t.mean(), 1e-3, 1 - 1e-3))
        x0[0] = math.log(rate / (1 - rate))
    result = lm_fit(res, jac, x0, args=(s, t), **lm_kwargs)
    diag = {"iterations": result.n_iter, "cost": result.cost, "initial_cost": result.initial_cost,
            "stop": result.reason, "residuals": residuals, "n": s.size}
    return CalibrationModel(kind, tuple(float(c) for c in result.x), diag), result
