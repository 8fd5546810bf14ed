"""Weak-limit sticky HDP-HMM with scalar Gaussian emissions.

The sampler follows the blocked Gibbs scheme for the truncated sticky
HDP-HMM: forward-filter backward-sample the whole state sequence, draw the
auxiliary table counts with the self-transition override correction, then
resample the global weights, the transition rows and the per-state
Normal-Inverse-Gamma emission parameters.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .labels import Action, parse_action
from .trajectory import AngularSpeedSeries

logger = logging.getLogger(__name__)
_KAPPA_RAMP = 0.5   # fraction of burn-in over which kappa is phased in


@dataclass(frozen=True)
class EmissionPrior:
    """Normal-Inverse-Gamma prior: var ~ IG(shape, rate), mean | var ~ N(mean0, var / precision_scale)."""
    mean0: float = 0.0
    precision_scale: float = 0.1
    shape: float = 2.0
    rate: float = 0.02


@dataclass(frozen=True)
class HdpHmmConfig:
    truncation_L: int = 10
    gamma: float = 1.0
    alpha: float = 1.0
    kappa: float = 50.0
    emission_prior: EmissionPrior = field(default_factory=EmissionPrior)
    iterations: int = 500
    burn_in: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.truncation_L < 3:
            raise ValueError("truncation_L must be >= 3")
        if self.gamma <= 0 or self.alpha <= 0:
            raise ValueError("concentrations gamma and alpha must be > 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        p = self.emission_prior
        if p.precision_scale <= 0 or p.shape <= 0 or p.rate <= 0:
            raise ValueError("emission prior scale, shape and rate must be > 0")


@dataclass(frozen=True)
class ModelFit:
    beta: np.ndarray
    transition: np.ndarray
    emission_means: np.ndarray
    emission_vars: np.ndarray
    state_sequence: np.ndarray
    log_likelihood_trace: np.ndarray
    occupied_states: int
    arc_positions: np.ndarray | None = None
    initial_log_likelihood: float = float("nan")
    selected_iteration: int = -1

    @property
    def log_likelihood(self) -> float:
        return float(self.log_likelihood_trace[self.selected_iteration])

    def relabel_states(self, perm: Sequence[int]) -> "ModelFit":
        """Rename state ``j`` to ``perm[j]``; the model itself is unchanged."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return replace(
            self,
            beta=self.beta[inv],
            transition=self.transition[np.ix_(inv, inv)],
            emission_means=self.emission_means[inv],
            emission_vars=self.emission_vars[inv],
            state_sequence=perm[self.state_sequence],
        )


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    action: Action


@dataclass(frozen=True)
class ActionSequence:
    arc_positions: np.ndarray
    actions: tuple[Action, ...]
    segments: tuple[Segment, ...]

    def __len__(self):
        return len(self.actions)

    def action_at(self, arc) -> list[Action]:
        """Action in force at each arc position (right-open grid cells, clamped)."""
        idx = np.searchsorted(self.arc_positions, np.atleast_1d(arc), side="right") - 1
        idx = np.clip(idx, 0, len(self.actions) - 1)
        return [self.actions[i] for i in idx]

    @classmethod
    def from_actions(cls, arc_positions, actions: Sequence[Action]) -> "ActionSequence":
        arc = np.asarray(arc_positions, dtype=float)
        actions = tuple(actions)
        if arc.size != len(actions) or not actions:
            raise ValueError("arc_positions and actions must be non-empty and of equal length")
        segments = []
        start = 0
        for i in range(1, len(actions) + 1):
            if i == len(actions) or actions[i] != actions[start]:
                end = arc[i] if i < len(actions) else arc[-1]
                segments.append(Segment(float(arc[start]), float(end), actions[start]))
                start = i
        return cls(arc, actions, tuple(segments))


# -- sampling primitives --------------------------------------------------

def _dirichlet(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    """Dirichlet draw(s) along the last axis, stable for concentrations << 1.

    Uses Gamma(a) = Gamma(a + 1) * U**(1/a) in log space so small
    concentrations underflow to exact zeros instead of producing 0/0.
    """
    conc = np.maximum(np.asarray(conc, dtype=float), 1e-300)
    g = rng.standard_gamma(conc + 1.0)
    u = rng.random(conc.shape)
    logx = np.log(g) + np.log(u) / conc
    logx -= logx.max(axis=-1, keepdims=True)
    x = np.exp(logx)
    return x / x.sum(axis=-1, keepdims=True)


def _gauss_loglik(y: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    d = y[:, None] - means[None, :]
    return -0.5 * (np.log(2.0 * np.pi * variances)[None, :] + d * d / variances[None, :])


def _ffbs(loglik: np.ndarray, P: np.ndarray, p0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    T, L = loglik.shape
    lik = np.exp(loglik - loglik.max(axis=1, keepdims=True))
    alpha = np.empty((T, L))
    a = p0 * lik[0]
    for t in range(T):
        if t:
            a = (a @ P) * lik[t]
        s = a.sum()
        if not s > 0:
            # predictive mass sits only on states with underflowed likelihood
            a = lik[t].copy()
            s = a.sum()
        a = a / s
        alpha[t] = a
    u = rng.random(T)
    z = np.empty(T, dtype=np.int64)
    c = np.cumsum(alpha[-1])
    z[-1] = min(np.searchsorted(c, u[-1] * c[-1], side="right"), L - 1)
    for t in range(T - 2, -1, -1):
        w = alpha[t] * P[:, z[t + 1]]
        c = np.cumsum(w)
        if not c[-1] > 0:
            c = np.cumsum(alpha[t])
        z[t] = min(np.searchsorted(c, u[t] * c[-1], side="right"), L - 1)
    return z


def _transition_counts(z: np.ndarray, L: int) -> np.ndarray:
    n = np.zeros((L, L), dtype=np.int64)
    np.add.at(n, (z[:-1], z[1:]), 1)
    return n


def _sample_beta(rng, n, beta, cfg: HdpHmmConfig) -> np.ndarray:
    L = cfg.truncation_L
    conc = cfg.alpha * beta[None, :] + cfg.kappa * np.eye(L)
    m = np.zeros((L, L), dtype=np.int64)
    for j, k in zip(*np.nonzero(n)):
        c = conc[j, k]
        m[j, k] = np.count_nonzero(rng.random(n[j, k]) < c / (c + np.arange(n[j, k])))
    # override correction: remove tables created by the sticky bias
    rho = cfg.kappa / (cfg.alpha + cfg.kappa)
    diag = np.diag(m)
    p_override = rho / (rho + beta * (1.0 - rho)) if rho > 0 else np.zeros(L)
    w = rng.binomial(diag, np.clip(p_override, 0.0, 1.0))
    mbar = m.copy()
    mbar[np.diag_indices(L)] = diag - w
    return _dirichlet(rng, cfg.gamma / L + mbar.sum(axis=0))


def _sample_transitions(rng, n, beta, cfg: HdpHmmConfig) -> np.ndarray:
    L = cfg.truncation_L
    return _dirichlet(rng, cfg.alpha * beta[None, :] + cfg.kappa * np.eye(L) + n)


def _sample_emissions(rng, y, z, L, prior: EmissionPrior):
    means = np.empty(L)
    variances = np.empty(L)
    for k in range(L):
        yk = y[z == k]
        n = yk.size
        lam = prior.precision_scale + n
        if n:
            ybar = yk.mean()
            mu_n = (prior.precision_scale * prior.mean0 + n * ybar) / lam
            a_n = prior.shape + 0.5 * n
            b_n = (prior.rate + 0.5 * np.sum((yk - ybar) ** 2)
                   + 0.5 * prior.precision_scale * n * (ybar - prior.mean0) ** 2 / lam)
        else:
            mu_n, a_n, b_n = prior.mean0, prior.shape, prior.rate
        variances[k] = 1.0 / rng.gamma(a_n, 1.0 / b_n)
        means[k] = rng.normal(mu_n, np.sqrt(variances[k] / lam))
    return means, variances


def collapsed_log_likelihood(y, z, beta, cfg: HdpHmmConfig) -> float:
    """log p(y, z | beta) with transition rows and emission parameters integrated out."""
    L = cfg.truncation_L
    pr = cfg.emission_prior
    ll = float(np.log(max(beta[z[0]], 1e-300)))
    n = _transition_counts(z, L)
    conc = cfg.alpha * beta[None, :] + cfg.kappa * np.eye(L)
    conc = np.maximum(conc, 1e-300)
    rows = n.sum(axis=1) > 0
    ll += float(np.sum(gammaln(conc[rows].sum(axis=1)) - gammaln(conc[rows].sum(axis=1) + n[rows].sum(axis=1))))
    ll += float(np.sum(gammaln(conc[rows] + n[rows]) - gammaln(conc[rows])))
    for k in np.unique(z):
        yk = y[z == k]
        m = yk.size
        lam = pr.precision_scale + m
        ybar = yk.mean()
        a_n = pr.shape + 0.5 * m
        b_n = (pr.rate + 0.5 * np.sum((yk - ybar) ** 2)
               + 0.5 * pr.precision_scale * m * (ybar - pr.mean0) ** 2 / lam)
        ll += (-0.5 * m * np.log(2.0 * np.pi) + 0.5 * np.log(pr.precision_scale / lam)
               + pr.shape * np.log(pr.rate) - a_n * np.log(b_n) + gammaln(a_n) - gammaln(pr.shape))
    return float(ll)


def joint_log_likelihood(y, z, beta, P, means, variances) -> float:
    """log p(y, z | beta, P, emissions), with beta as the initial-state law."""
    with np.errstate(divide="ignore"):
        ll = np.log(beta[z[0]])
        ll += np.sum(np.log(P[z[:-1], z[1:]]))
    d = y - means[z]
    ll += np.sum(-0.5 * (np.log(2.0 * np.pi * variances[z]) + d * d / variances[z]))
    return float(ll)


# -- public API -----------------------------------------------------------

def fit(series: AngularSpeedSeries | np.ndarray, cfg: HdpHmmConfig = HdpHmmConfig()) -> ModelFit:
    """Run the blocked Gibbs sampler and return the best post-burn-in sample."""
    if isinstance(series, AngularSpeedSeries):
        y, arc = series.values, series.arc_positions
    else:
        y = np.asarray(series, dtype=float)
        arc = None
    if y.ndim != 1 or y.size < 10:
        raise ValueError(f"series must be 1-d with at least 10 samples, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")

    L = cfg.truncation_L
    rng = np.random.default_rng(cfg.seed)
    prior = cfg.emission_prior

    # start from a single occupied state; further states are opened by the sampler
    z = np.zeros(y.size, dtype=np.int64)
    n = _transition_counts(z, L)
    beta = _sample_beta(rng, n, np.full(L, 1.0 / L), cfg)
    P = _sample_transitions(rng, n, beta, cfg)
    means, variances = _sample_emissions(rng, y, z, L, prior)
    init_ll = collapsed_log_likelihood(y, z, beta, cfg)

    trace = np.empty(cfg.iterations)
    best = None
    ramp = max(1, int(_KAPPA_RAMP * cfg.burn_in))
    for it in range(cfg.iterations):
        # the sticky bias is phased in over the first half of burn-in
        step_cfg = replace(cfg, kappa=cfg.kappa * min(1.0, it / ramp))
        z = _ffbs(_gauss_loglik(y, means, variances), P, beta, rng)
        n = _transition_counts(z, L)
        beta = _sample_beta(rng, n, beta, step_cfg)
        P = _sample_transitions(rng, n, beta, step_cfg)
        means, variances = _sample_emissions(rng, y, z, L, prior)
        ll = collapsed_log_likelihood(y, z, beta, cfg)
        trace[it] = ll
        if it >= cfg.burn_in and (best is None or ll > best[0]):
            best = (ll, it, beta.copy(), P.copy(), means.copy(), variances.copy(), z.copy())
        if (it + 1) % 100 == 0:
            logger.debug("iter %d  loglik %.2f  occupied %d", it + 1, ll, np.unique(z).size)

    _, it, beta, P, means, variances, z = best
    return ModelFit(
        beta=beta, transition=P, emission_means=means, emission_vars=variances,
        state_sequence=z, log_likelihood_trace=trace,
        occupied_states=int(np.unique(z).size), arc_positions=arc,
        initial_log_likelihood=init_ll, selected_iteration=it,
    )


def decode(fit: ModelFit) -> np.ndarray:
    return fit.state_sequence


def semantic_relabel(fit: ModelFit, straight_band: float = 0.05, arc_positions=None) -> ActionSequence:
    """Map states to Left/Straight/Right by the sign and size of their mean angular speed.

    Positive angular speed is counter-clockwise, i.e. a left turn.
    """
    if straight_band <= 0:
        raise ValueError("straight_band must be positive")
    arc = arc_positions if arc_positions is not None else fit.arc_positions
    if arc is None:
        arc = np.arange(fit.state_sequence.size, dtype=float)
    mu = fit.emission_means
    state_action = np.where(mu > straight_band, 0, np.where(mu < -straight_band, 2, 1))
    lookup = (Action.LEFT, Action.STRAIGHT, Action.RIGHT)
    return ActionSequence.from_actions(arc, [lookup[state_action[s]] for s in fit.state_sequence])


def write_actions(path, seq: ActionSequence, segments_path=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("arc_position", "action"))
        for s, a in zip(seq.arc_positions, seq.actions):
            w.writerow((repr(float(s)), a.value))
    if segments_path is not None:
        with open(segments_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("start", "end", "action"))
            for seg in seq.segments:
                w.writerow((repr(seg.start), repr(seg.end), seg.action.value))


def read_actions(path) -> ActionSequence:
    arc, actions = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                arc.append(float(row[0]))
                actions.append(parse_action(row[1]))
    return ActionSequence.from_actions(arc, actions)
