"""Variational-Bayes engine for doubly-unlinked regression.

Coordinate updates for the Gaussian beta and latent-field factors and the
two Inverse-Gamma variance factors are closed-form.  The range parameter
gets a self-normalized importance-sampling factor over a fixed node set
drawn once per fit from the Unif(0, sqrt(2)) prior; with the nodes held
fixed, steps 1-5 are exact coordinate ascent on the node-discretized ELBO,
which is what makes the monotonicity of the deterministic sub-algorithm
testable.  The two relaxed-permutation factors are optimized by
reparameterized stochastic gradient ascent with straight-through rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import digamma, gammaln, logsumexp

from . import covkernel, permops
from .covkernel import chol_factor, chol_solve, log_det
from .permops import RelaxedPermParams
from .simulate import Dataset

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_2PIE = float(np.log(2.0 * np.pi * np.e))
PHI_PRIOR_HIGH = float(np.sqrt(2.0))


@dataclass(frozen=True)
class Priors:
    sigma2_beta: float = 100.0
    a1: float = 2.0
    b1: float = 2.0
    a2: float = 2.0
    b2: float = 2.0
    eta_x2: float = 0.1
    eta_s2: float = 0.1

    def __post_init__(self):
        for name in ("sigma2_beta", "a1", "b1", "a2", "b2", "eta_x2", "eta_s2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class FitConfig:
    elbo_tol: float = 1e-2
    elbo_patience: int = 3
    max_outer_iters: int = 80
    warmup_iters: int = 10
    lr_X: float = 0.05
    lr_S: float = 0.05
    perm_inner_steps: int = 25
    mc_samples: int = 16
    moment_samples: int = 128
    phi_is_samples: int = 50
    tau0_X: float = 1.0
    tau0_S: float = 1.0
    tau_min: float = 0.05
    anneal_rate: float = 0.995
    seed: int = 0
    v_floor: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.tau_min < 1.0:
            raise ValueError("tau_min must be in (0,1)")
        if not 0.0 < self.anneal_rate < 1.0:
            raise ValueError("anneal_rate must be in (0,1)")
        for name in ("max_outer_iters", "perm_inner_steps", "mc_samples", "moment_samples",
                     "phi_is_samples", "elbo_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class PhiNodes:
    """Importance-sampling nodes for the range parameter, fixed per fit.

    Holds the node locations, R(phi_j)^{-1}, and log|R(phi_j)|, so the
    per-iteration reweighting only needs traces and quadratic forms.
    """

    def __init__(self, points: np.ndarray, n_nodes: int, rng: np.random.Generator):
        self.phis = rng.uniform(0.0, PHI_PRIOR_HIGH, size=n_nodes)
        n = len(points)
        self.Rinvs = np.empty((n_nodes, n, n))
        self.logdets = np.empty(n_nodes)
        eye = np.eye(n)
        for j, phi in enumerate(self.phis):
            R = covkernel.exp_correlation(points, phi)
            L = chol_factor(R + 1e-10 * eye)
            self.Rinvs[j] = chol_solve(L, eye)
            self.logdets[j] = log_det(L)

    @property
    def n_nodes(self) -> int:
        return len(self.phis)


class AdamState:
    """First/second-moment accumulators for one (M, V) parameter pair."""

    def __init__(self, shape):
        self.mM = np.zeros(shape)
        self.vM = np.zeros(shape)
        self.mV = np.zeros(shape)
        self.vV = np.zeros(shape)
        self.t = 0

    def step(self, grad_M, grad_V, lr, b1=0.9, b2=0.999, eps=1e-8):
        """Return ascent increments for M and V given their gradients."""
        self.t += 1
        self.mM = b1 * self.mM + (1 - b1) * grad_M
        self.vM = b2 * self.vM + (1 - b2) * grad_M**2
        self.mV = b1 * self.mV + (1 - b1) * grad_V
        self.vV = b2 * self.vV + (1 - b2) * grad_V**2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        dM = lr * (self.mM / c1) / (np.sqrt(self.vM / c2) + eps)
        dV = lr * (self.mV / c1) / (np.sqrt(self.vV / c2) + eps)
        return dM, dV


@dataclass
class VariationalState:
    mu_beta: float
    sigma2_beta_q: float
    mu_W: np.ndarray
    Sigma_W: np.ndarray
    la1: float
    lb1: float
    la2: float
    lb2: float
    ERinv: np.ndarray
    zetaX: RelaxedPermParams
    zetaS: RelaxedPermParams
    MstarX: np.ndarray
    VstarX: np.ndarray
    MstarS: np.ndarray
    VstarS: np.ndarray
    global_step: int = 0
    phi_nodes: Optional[PhiNodes] = None
    phi_weights: Optional[np.ndarray] = None
    E_logdet_R: float = 0.0
    adamX: Optional[AdamState] = None
    adamS: Optional[AdamState] = None

    def temperature(self, tau0: float, tau_min: float, anneal_rate: float) -> float:
        return max(tau_min, tau0 * anneal_rate**self.global_step)


@dataclass
class FitReport:
    beta_mean: float
    beta_var: float
    piX_hat: np.ndarray
    piS_hat: np.ndarray
    sigma2_hat: float
    tau2_hat: float
    phi_hat: float
    elbo_trace: list
    iterations: int
    converged: bool
    mu_W: Optional[np.ndarray] = None


def _block_view(v: np.ndarray, K: int, B: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(B, K)


def init_state(data: Dataset, priors: Priors, config: FitConfig, rng: np.random.Generator) -> VariationalState:
    """Start the covariate factor at a moment-matching guess, the rest neutral.

    The within-block cross-products sum_i Y_i X_i^T peak on the entries of
    the true covariate permutation, so their z-scores make a cheap logit
    initialization.  The latent-field factor starts identity-centered.
    """
    K, n = data.K, data.n
    eyeK = np.eye(K)
    C_YX = _block_view(data.Y, K, data.B).T @ _block_view(data.X, K, data.B)
    spread = C_YX.std()
    MX0 = (C_YX - C_YX.mean()) / spread if spread > 0 else eyeK.copy()
    zetaX = RelaxedPermParams(M=MX0, V=np.full((K, K), 0.1), temperature=config.tau0_X)
    zetaS = RelaxedPermParams(M=eyeK.copy(), V=np.full((K, K), 0.1), temperature=config.tau0_S)
    state = VariationalState(
        mu_beta=0.0,
        sigma2_beta_q=priors.sigma2_beta,
        mu_W=np.zeros(n),
        Sigma_W=np.eye(n),
        la1=priors.a1,
        lb1=priors.b1,
        la2=priors.a2,
        lb2=priors.b2,
        ERinv=np.eye(n),
        zetaX=zetaX,
        zetaS=zetaS,
        MstarX=eyeK.copy(),
        VstarX=eyeK.copy(),
        MstarS=eyeK.copy(),
        VstarS=eyeK.copy(),
    )
    state.MstarX, state.VstarX = permops.perm_moments(zetaX, config.moment_samples, rng)
    state.MstarS, state.VstarS = permops.perm_moments(zetaS, config.moment_samples, rng)
    state.adamX = AdamState((K, K))
    state.adamS = AdamState((K, K))
    state.phi_nodes = PhiNodes(data.points, config.phi_is_samples, rng)
    update_phi(state, data, priors, rng)
    return state


# ---------------------------------------------------------------------------
# closed-form coordinate updates (steps 1-4)


def update_beta(state: VariationalState, data: Dataset, priors: Priors):
    """Gaussian factor for the regression coefficient."""
    Xb = _block_view(data.X, data.K, data.B)
    Yb = _block_view(data.Y, data.K, data.B)
    muWb = _block_view(state.mu_W, data.K, data.B)
    if np.linalg.eigvalsh(0.5 * (state.VstarX + state.VstarX.T))[0] < -1e-8:
        raise ValueError("VstarX is not positive semidefinite")
    ratio2 = state.la2 / state.lb2
    quad = float(np.einsum("bi,ij,bj->", Xb, state.VstarX, Xb))
    var = 1.0 / (ratio2 * quad + 1.0 / priors.sigma2_beta)
    resid = Yb - muWb @ state.MstarS.T  # Y_i - Ms mu_Wi, rows are blocks
    lin = float(np.einsum("bi,ij,bj->", resid, state.MstarX, Xb))
    mean = var * ratio2 * lin
    state.mu_beta = mean
    state.sigma2_beta_q = var
    return mean, var


def update_W(state: VariationalState, data: Dataset, priors: Priors):
    """Gaussian factor for the stacked latent field."""
    K, B, n = data.K, data.B, data.n
    Xb = _block_view(data.X, K, B)
    Yb = _block_view(data.Y, K, B)
    ratio1 = state.la1 / state.lb1
    ratio2 = state.la2 / state.lb2
    precision = ratio1 * state.ERinv.copy()
    for b in range(B):
        sl = slice(b * K, (b + 1) * K)
        precision[sl, sl] += ratio2 * state.VstarS
    L = chol_factor(0.5 * (precision + precision.T))
    Sigma_W = chol_solve(L, np.eye(n))
    resid = Yb - state.mu_beta * (Xb @ state.MstarX.T)  # rows: Y_i - mu Mx X_i
    rhs = ratio2 * (resid @ state.MstarS).ravel()  # blockwise Ms^T resid_i
    mu_W = Sigma_W @ rhs
    state.Sigma_W = 0.5 * (Sigma_W + Sigma_W.T)
    state.mu_W = mu_W
    return mu_W, state.Sigma_W


def update_sigma2(state: VariationalState, data: Dataset, priors: Priors):
    """Inverse-Gamma factor for the partial-sill variance."""
    quad = float(state.mu_W @ state.ERinv @ state.mu_W)
    tr = float(np.sum(state.ERinv * state.Sigma_W.T))
    state.la1 = data.K * data.B / 2.0 + priors.a1
    state.lb1 = 0.5 * (tr + quad) + priors.b1
    return state.la1, state.lb1


def expected_residual_quad(state: VariationalState, data: Dataset) -> float:
    """Sum over blocks of the posterior-expected squared residual norm."""
    K, B = data.K, data.B
    Xb = _block_view(data.X, K, B)
    Yb = _block_view(data.Y, K, B)
    muWb = _block_view(state.mu_W, K, B)
    Mx, Vx = state.MstarX, state.VstarX
    Ms, Vs = state.MstarS, state.VstarS

    resid = Yb - state.mu_beta * (Xb @ Mx.T) - muWb @ Ms.T
    term_mean = float(np.sum(resid**2))
    gapX = Vx - Mx.T @ Mx
    term_betavar = state.mu_beta**2 * float(np.einsum("bi,ij,bj->", Xb, gapX, Xb))
    term_betavar += state.sigma2_beta_q * float(np.einsum("bi,ij,bj->", Xb, Vx, Xb))
    gapS = Vs - Ms.T @ Ms
    term_w = float(np.einsum("bi,ij,bj->", muWb, gapS, muWb))
    tr_term = 0.0
    for b in range(B):
        sl = slice(b * K, (b + 1) * K)
        tr_term += float(np.sum(Vs * state.Sigma_W[sl, sl].T))
    return term_mean + term_betavar + term_w + tr_term


def update_tau2(state: VariationalState, data: Dataset, priors: Priors):
    """Inverse-Gamma factor for the nugget variance."""
    quad = expected_residual_quad(state, data)
    lb2 = 0.5 * quad + priors.b2
    if lb2 <= 0:
        raise ValueError("negative Inverse-Gamma scale: inconsistent permutation moments")
    state.la2 = data.K * data.B / 2.0 + priors.a2
    state.lb2 = lb2
    return state.la2, state.lb2


# ---------------------------------------------------------------------------
# step 5: range-parameter factor by importance sampling


def phi_log_scores(state: VariationalState) -> np.ndarray:
    """Unnormalized log weight of each node under the current factors."""
    nodes = state.phi_nodes
    ratio1 = state.la1 / state.lb1
    quads = np.einsum("jab,ab->j", nodes.Rinvs, state.Sigma_W.T)
    quads += np.einsum("a,jab,b->j", state.mu_W, nodes.Rinvs, state.mu_W)
    return -0.5 * nodes.logdets - 0.5 * ratio1 * quads


def update_phi(state: VariationalState, data: Dataset, priors: Priors,
               rng: Optional[np.random.Generator] = None):
    """Reweight the fixed node set and refresh E[R(phi)^{-1}]."""
    if state.phi_nodes is None:
        if rng is None:
            raise ValueError("no phi nodes cached and no rng to draw them")
        state.phi_nodes = PhiNodes(data.points, 50, rng)
    scores = phi_log_scores(state)
    norm = logsumexp(scores)
    if not np.isfinite(norm):
        raise FloatingPointError(
            "all importance weights underflowed; weights must be normalized in log space"
        )
    w = np.exp(scores - norm)
    state.phi_weights = w
    state.ERinv = np.einsum("j,jab->ab", w, state.phi_nodes.Rinvs)
    state.E_logdet_R = float(w @ state.phi_nodes.logdets)
    return state.ERinv


# ---------------------------------------------------------------------------
# step 6: relaxed-permutation factors by stochastic gradient ascent


def _mixture_log_density(P: np.ndarray, eta2: float):
    """Sum of log[ 0.5 N(p;0,eta2) + 0.5 N(p;1,eta2) ] over the last two axes.

    Accepts a single matrix or a stack of them; returns a float or a vector.
    """
    a = -(P**2) / (2.0 * eta2)
    b = -((P - 1.0) ** 2) / (2.0 * eta2)
    lse = np.logaddexp(a, b)
    const = -0.5 * math.log(2.0 * math.pi * eta2) - math.log(2.0)
    K2 = P.shape[-1] * P.shape[-2]
    out = np.sum(lse, axis=(-2, -1)) + K2 * const
    return float(out) if np.ndim(out) == 0 else out


def _mixture_log_density_grad(P: np.ndarray, eta2: float) -> np.ndarray:
    a = -(P**2) / (2.0 * eta2)
    b = -((P - 1.0) ** 2) / (2.0 * eta2)
    m = np.maximum(a, b)
    na = np.exp(a - m)
    nb = np.exp(b - m)
    return (na * (-P) + nb * (1.0 - P)) / (eta2 * (na + nb))


def _data_grad_X(state: VariationalState, data: Dataset):
    """Closed-form d/dpi of the data term of ELBO(pi_X); returns a closure."""
    K, B = data.K, data.B
    Xb = _block_view(data.X, K, B)
    Yb = _block_view(data.Y, K, B)
    muWb = _block_view(state.mu_W, K, B)
    ratio2 = state.la2 / state.lb2
    mu, s2 = state.mu_beta, state.sigma2_beta_q
    C_YX = Yb.T @ Xb  # sum_i Y_i X_i^T
    A_XX = Xb.T @ Xb
    C_WX = muWb.T @ Xb

    D = state.MstarS @ C_WX

    def value(pi):
        t = (
            -2.0 * mu * np.sum(pi * C_YX, axis=(-2, -1))
            + (mu**2 + s2) * np.einsum("...ki,...kj,ij->...", pi, pi, A_XX)
            + 2.0 * mu * np.sum(pi * D, axis=(-2, -1))
        )
        return -0.5 * ratio2 * t

    def grad(pi):
        return ratio2 * (mu * C_YX - (mu**2 + s2) * pi @ A_XX - mu * D)

    return value, grad


def _data_grad_S(state: VariationalState, data: Dataset):
    """Closed-form d/dpi of the data term of ELBO(pi_S); returns a closure."""
    K, B = data.K, data.B
    Xb = _block_view(data.X, K, B)
    Yb = _block_view(data.Y, K, B)
    muWb = _block_view(state.mu_W, K, B)
    ratio2 = state.la2 / state.lb2
    mu = state.mu_beta
    C_YW = Yb.T @ muWb
    C_XW = Xb.T @ muWb
    A_WW = muWb.T @ muWb
    SW_sum = np.zeros((K, K))
    for b in range(B):
        sl = slice(b * K, (b + 1) * K)
        SW_sum += state.Sigma_W[sl, sl]

    D = state.MstarX @ C_XW
    A = A_WW + SW_sum

    def value(pi):
        t = (
            -2.0 * np.sum(pi * C_YW, axis=(-2, -1))
            + 2.0 * mu * np.sum(pi * D, axis=(-2, -1))
            + np.einsum("...ki,...kj,ji->...", pi, pi, A)
        )
        return -0.5 * ratio2 * t

    def grad(pi):
        return ratio2 * (C_YW - mu * D - pi @ A)

    return value, grad


def perm_elbo_and_grad(
    zeta: RelaxedPermParams,
    data_value,
    data_grad,
    eta2: float,
    noise: np.ndarray,
    sinkhorn_max_iters: int = permops.SINKHORN_MAX_ITERS,
    sinkhorn_tol: float = permops.SINKHORN_TOL,
):
    """MC estimate of the permutation-factor ELBO and its (M, V) gradient.

    `noise` is an (S, K, K) array of standard-normal draws (common random
    numbers for gradient checks).  Rounding is straight-through: only the
    tau * Psi pathway carries gradient.
    """
    tau = zeta.temperature
    K = zeta.M.shape[0]
    Mtil, sinkhorn_vjp = permops.sinkhorn_knopp_with_grad(
        permops.positivity(zeta.M), max_iters=sinkhorn_max_iters, tol=sinkhorn_tol
    )
    Psi = Mtil[None] + zeta.V[None] * noise
    rounded = np.stack([permops.perm_matrix(permops.hungarian_round(p)) for p in Psi])
    pi = tau * Psi + (1.0 - tau) * rounded
    value = float(np.mean(data_value(pi) + _mixture_log_density(pi, eta2)))
    G_psi = tau * (data_grad(pi) + _mixture_log_density_grad(pi, eta2))
    G_psi_mean = G_psi.mean(axis=0)
    grad_V = (G_psi * noise).mean(axis=0)
    # entropy of the factor: K^2 log(tau) + 0.5 sum log(2 pi e v^2)
    entropy = K * K * math.log(tau) + float(np.sum(0.5 * np.log(2.0 * math.pi * math.e * zeta.V**2)))
    value += entropy
    grad_V += 1.0 / zeta.V
    grad_M = sinkhorn_vjp(G_psi_mean) * permops.positivity(zeta.M)
    return value, grad_M, grad_V


def update_permutations(
    state: VariationalState,
    data: Dataset,
    priors: Priors,
    config: FitConfig,
    rng: np.random.Generator,
):
    """Interleaved gradient-ascent steps on both permutation factors."""
    K = data.K
    specs = [
        ("X", config.lr_X, config.tau0_X, priors.eta_x2),
        ("S", config.lr_S, config.tau0_S, priors.eta_s2),
    ]
    for _ in range(config.perm_inner_steps):
        for name, lr, tau0, eta2 in specs:
            zeta = state.zetaX if name == "X" else state.zetaS
            adam = state.adamX if name == "X" else state.adamS
            zeta.temperature = state.temperature(tau0, config.tau_min, config.anneal_rate)
            if name == "X":
                value_fn, grad_fn = _data_grad_X(state, data)
            else:
                value_fn, grad_fn = _data_grad_S(state, data)
            noise = rng.standard_normal((config.mc_samples, K, K))
            _, grad_M, grad_V = perm_elbo_and_grad(zeta, value_fn, grad_fn, eta2, noise)
            if not (np.all(np.isfinite(grad_M)) and np.all(np.isfinite(grad_V))):
                bad = np.argwhere(~np.isfinite(grad_M))
                raise FloatingPointError(f"non-finite permutation gradient at entry {bad[:1]}")
            dM, dV = adam.step(grad_M, grad_V, lr)
            zeta.M = zeta.M + dM
            zeta.V = np.maximum(zeta.V + dV, config.v_floor)
            state.global_step += 1
    state.zetaX.temperature = state.temperature(config.tau0_X, config.tau_min, config.anneal_rate)
    state.zetaS.temperature = state.temperature(config.tau0_S, config.tau_min, config.anneal_rate)
    state.MstarX, state.VstarX = permops.perm_moments(state.zetaX, config.moment_samples, rng)
    state.MstarS, state.VstarS = permops.perm_moments(state.zetaS, config.moment_samples, rng)
    return state.zetaX, state.zetaS


# ---------------------------------------------------------------------------
# the global objective


def compute_elbo(
    state: VariationalState,
    data: Dataset,
    priors: Priors,
    rng: np.random.Generator,
    mc_samples: int = 64,
) -> float:
    """Node-discretized ELBO with Monte-Carlo permutation-prior terms.

    The range-factor entropy and its expected log density cancel; what
    survives of the range parameter is the log normalizer over the fixed
    node set, which here appears as the weighted score plus categorical
    entropy (identical once the factor is at its coordinate optimum).
    """
    n = data.n
    K = data.K
    ratio1 = state.la1 / state.lb1
    ratio2 = state.la2 / state.lb2
    E_log_sigma2 = math.log(state.lb1) - digamma(state.la1)
    E_log_tau2 = math.log(state.lb2) - digamma(state.la2)

    # expected log likelihood of the outcomes
    elbo = -0.5 * n * _LOG_2PI - 0.5 * n * E_log_tau2
    elbo -= 0.5 * ratio2 * expected_residual_quad(state, data)

    # latent-field prior
    elbo += -0.5 * n * _LOG_2PI - 0.5 * n * E_log_sigma2
    scores = phi_log_scores(state)  # -0.5 logdet_j - 0.5 ratio1 * quad_j
    w = state.phi_weights
    elbo += float(w @ scores)
    # discrete uniform prior over the nodes
    elbo += -math.log(state.phi_nodes.n_nodes)

    # beta prior
    elbo += -0.5 * math.log(2.0 * math.pi * priors.sigma2_beta)
    elbo += -(state.mu_beta**2 + state.sigma2_beta_q) / (2.0 * priors.sigma2_beta)

    # inverse-gamma priors
    for a, b, la, lb, E_log in (
        (priors.a1, priors.b1, state.la1, state.lb1, E_log_sigma2),
        (priors.a2, priors.b2, state.la2, state.lb2, E_log_tau2),
    ):
        elbo += a * math.log(b) - gammaln(a) - (a + 1.0) * E_log - b * la / lb

    # permutation priors, Monte Carlo with caller-controlled randomness
    for zeta, eta2 in ((state.zetaX, priors.eta_x2), (state.zetaS, priors.eta_s2)):
        pis, _ = permops.sample_relaxed_batch(zeta, mc_samples, rng)
        elbo += float(np.mean(_mixture_log_density(pis, eta2)))

    # entropies
    sign, logdet_SW = np.linalg.slogdet(state.Sigma_W)
    if sign <= 0:
        raise FloatingPointError("Sigma_W lost positive definiteness")
    elbo += 0.5 * (n * _LOG_2PIE + logdet_SW)
    elbo += 0.5 * math.log(2.0 * math.pi * math.e * state.sigma2_beta_q)
    for la, lb in ((state.la1, state.lb1), (state.la2, state.lb2)):
        elbo += la + math.log(lb) + gammaln(la) - (1.0 + la) * digamma(la)
    elbo += float(-np.sum(np.where(w > 0, w * np.log(np.maximum(w, 1e-300)), 0.0)))
    for zeta in (state.zetaX, state.zetaS):
        elbo += K * K * math.log(zeta.temperature)
        elbo += float(np.sum(0.5 * np.log(2.0 * math.pi * math.e * zeta.V**2)))
    return float(elbo)


def extract_permutations(state: VariationalState):
    """Round the permutation-moment means to hard permutations."""
    piX = permops.hungarian_round(
        permops.sinkhorn_knopp(permops.positivity(state.MstarX))
    )
    piS = permops.hungarian_round(
        permops.sinkhorn_knopp(permops.positivity(state.MstarS))
    )
    return piX, piS


def _refine(state, data, priors, piX_hat, piS_hat, config):
    """Condition on the extracted hard permutations and re-run steps 1-5.

    Point-mass moments (E[pi] = P, E[pi^T pi] = I) remove the Monte-Carlo
    smear of the relaxed factors, which otherwise attenuates the
    regression-coefficient posterior.
    """
    K = data.K
    state.MstarX = permops.perm_matrix(piX_hat)
    state.VstarX = np.eye(K)
    state.MstarS = permops.perm_matrix(piS_hat)
    state.VstarS = np.eye(K)
    prev_mu = np.inf
    for _ in range(config.max_outer_iters):
        update_beta(state, data, priors)
        update_W(state, data, priors)
        update_sigma2(state, data, priors)
        update_tau2(state, data, priors)
        update_phi(state, data, priors)
        if abs(state.mu_beta - prev_mu) <= 1e-8 * max(1.0, abs(state.mu_beta)):
            break
        prev_mu = state.mu_beta


def fit(
    data: Dataset,
    priors: Priors = Priors(),
    config: FitConfig = FitConfig(),
    update_perms: bool = True,
) -> FitReport:
    """Run the full coordinate-ascent loop until the ELBO gain drops below tol.

    `update_perms=False` freezes the permutation factors at their
    identity-centered initialization (deterministic sub-algorithm).
    """
    if data.n != data.K * data.B:
        raise ValueError("dataset is not block-consistent")
    rng = np.random.default_rng(config.seed)
    elbo_seed = int(rng.integers(2**63))  # common random numbers across evaluations
    state = init_state(data, priors, config, rng)

    elbo_trace = []
    converged = False
    iterations = 0
    flat = 0  # consecutive iterations with gain below tolerance
    for t in range(config.max_outer_iters):
        update_beta(state, data, priors)
        update_W(state, data, priors)
        # variance factors are held at their priors during warmup so the
        # latent field cannot collapse before the permutations move
        if not (update_perms and t < config.warmup_iters):
            update_sigma2(state, data, priors)
            update_tau2(state, data, priors)
        update_phi(state, data, priors)
        if update_perms:
            update_permutations(state, data, priors, config, rng)
        elbo = compute_elbo(
            state, data, priors, np.random.default_rng(elbo_seed), config.moment_samples
        )
        if not np.isfinite(elbo):
            raise FloatingPointError(f"ELBO diverged at iteration {t}")
        elbo_trace.append(elbo)
        iterations = t + 1
        if t > 0 and abs(elbo_trace[-1] - elbo_trace[-2]) <= config.elbo_tol:
            flat += 1
            if flat >= config.elbo_patience:
                converged = True
                break
        else:
            flat = 0

    piX_hat, piS_hat = extract_permutations(state)
    if update_perms:
        _refine(state, data, priors, piX_hat, piS_hat, config)
    phi_hat = float(state.phi_weights @ state.phi_nodes.phis)
    return FitReport(
        beta_mean=state.mu_beta,
        beta_var=state.sigma2_beta_q,
        piX_hat=piX_hat,
        piS_hat=piS_hat,
        sigma2_hat=state.lb1 / (state.la1 - 1.0),
        tau2_hat=state.lb2 / (state.la2 - 1.0),
        phi_hat=phi_hat,
        elbo_trace=elbo_trace,
        iterations=iterations,
        converged=converged,
        mu_W=state.mu_W.copy(),
    )
