"""Client-side local training for one communication round.

The proposed rule keeps two parameter sequences in lockstep: the current one,
started from the broadcast model ``omega_t``, and a shadow ("hat") one started
from the previous global model ``omega_tm1``. Each sequence carries a recursive
momentum estimator

    m_j = m_{j-1} + g(w_j; B_j) - g(w_{j-1}; B_j)

initialised with the full local gradient, and both are moved with one shared
step size ``k / (w + sum ||g||^2) ** (1/3)``.

Baseline rules (plain SGD, EMA momentum, FedProx proximal term) run through
the same state so the ablation grid can toggle mechanisms independently.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .datagen import ClientShard, Dataset, local_step_count, sample_batch, shard_batch
from .nummath import Batch, ModelSpec, axpy, eval_loss, grad, grad_norm_sq


@dataclass(frozen=True)
class LocalHyper:
    k: float = 0.1
    w: float = 1.0
    batch_size: int = 50
    epochs: int = 2
    adaptive_lr: bool = True
    momentum: bool = True
    local_mvr: bool = True
    local_momentum_beta: float = 0.1
    fedprox_mu: float = 0.0
    fixed_lr: float = 0.1

    def __post_init__(self):
        if not (self.k > 0 and self.w > 0):
            raise ValueError("k and w must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 <= self.local_momentum_beta <= 1:
            raise ValueError("local_momentum_beta must lie in [0, 1]")
        if self.fedprox_mu < 0:
            raise ValueError("fedprox_mu must be >= 0")
        if not self.fixed_lr > 0:
            raise ValueError("fixed_lr must be positive")


@dataclass(frozen=True)
class ClientRoundState:
    omega_cur: np.ndarray
    omega_hat: np.ndarray | None
    m_cur: np.ndarray
    m_hat: np.ndarray | None
    accum: float
    j: int
    omega_t_anchor: np.ndarray
    omega_tm1_anchor: np.ndarray | None
    # parameters before the latest move; None until the first move
    omega_prev: np.ndarray | None = None
    omega_hat_prev: np.ndarray | None = None
    lrs: tuple[float, ...] = ()

    @property
    def tracks_hat(self) -> bool:
        return self.omega_hat is not None


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    delta: np.ndarray
    # None when the shadow sequence was not run (no global variance reduction)
    delta_diff: np.ndarray | None
    local_loss: float
    steps_taken: int
    mean_lr: float
    lr_trace: tuple[float, ...]


def adaptive_lr(hyper: LocalHyper, accum: float) -> float:
    if not hyper.adaptive_lr:
        return hyper.fixed_lr
    if accum < 0:
        raise ValueError("accumulator must be >= 0")
    return hyper.k / float(np.cbrt(hyper.w + accum))


def _stoch_grad(spec, params, batch: Batch, anchor, mu: float) -> np.ndarray:
    g = grad(spec, params, batch)
    if mu:
        g += mu * (params - anchor)
    return g


def init_client_round(
    omega_t: np.ndarray,
    omega_tm1: np.ndarray | None,
    spec: ModelSpec,
    dataset: Dataset,
    shard: ClientShard,
    hyper: LocalHyper,
) -> ClientRoundState:
    """Start a round at ``omega_t`` (and ``omega_tm1`` for the shadow sequence).

    With ``local_mvr`` on, both estimators start at the full local gradient and
    the accumulator at its squared norm; otherwise estimators start at zero.
    """
    if shard.sample_count < 1:
        raise ValueError("empty shard")
    mu = hyper.fedprox_mu
    if hyper.local_mvr:
        full = shard_batch(dataset, shard)
        m_cur = _stoch_grad(spec, omega_t, full, omega_t, mu)
        m_hat = None if omega_tm1 is None else _stoch_grad(spec, omega_tm1, full, omega_tm1, mu)
        accum = grad_norm_sq(m_cur)
    else:
        m_cur = np.zeros_like(omega_t)
        m_hat = None if omega_tm1 is None else np.zeros_like(omega_t)
        accum = 0.0
    return ClientRoundState(
        omega_cur=omega_t,
        omega_hat=omega_tm1,
        m_cur=m_cur,
        m_hat=m_hat,
        accum=accum,
        j=1,
        omega_t_anchor=omega_t,
        omega_tm1_anchor=omega_tm1,
    )


def descend(state: ClientRoundState, hyper: LocalHyper, lr: float | None = None) -> ClientRoundState:
    """Move both sequences along their estimators with one shared step size."""
    eta = adaptive_lr(hyper, state.accum) if lr is None else lr
    hat = None
    if state.tracks_hat:
        hat = axpy(-eta, state.m_hat, state.omega_hat)
    return dataclasses.replace(
        state,
        omega_prev=state.omega_cur,
        omega_hat_prev=state.omega_hat,
        omega_cur=axpy(-eta, state.m_cur, state.omega_cur),
        omega_hat=hat,
        j=state.j + 1,
        lrs=state.lrs + (eta,),
    )


def mvr_step(
    state: ClientRoundState,
    spec: ModelSpec,
    dataset: Dataset,
    shard: ClientShard,
    hyper: LocalHyper,
    rng: np.random.Generator,
    lr: float | None = None,
) -> ClientRoundState:
    """One recursive-momentum step: refresh both estimators on a fresh batch, then move.

    ``lr`` overrides the step size (used by tests to freeze the iterate).
    """
    if state.omega_prev is None:
        raise ValueError("mvr_step needs a previous point; call descend after init_client_round")
    batch = sample_batch(dataset, shard, min(hyper.batch_size, shard.sample_count), rng)
    mu = hyper.fedprox_mu
    anchor = state.omega_t_anchor

    g_cur = _stoch_grad(spec, state.omega_cur, batch, anchor, mu)
    g_old = _stoch_grad(spec, state.omega_prev, batch, anchor, mu)
    m_cur = state.m_cur + (g_cur - g_old)

    m_hat = None
    if state.tracks_hat:
        anchor_hat = state.omega_tm1_anchor
        gh_cur = _stoch_grad(spec, state.omega_hat, batch, anchor_hat, mu)
        gh_old = _stoch_grad(spec, state.omega_hat_prev, batch, anchor_hat, mu)
        m_hat = state.m_hat + (gh_cur - gh_old)

    state = dataclasses.replace(state, m_cur=m_cur, m_hat=m_hat, accum=state.accum + grad_norm_sq(g_cur))
    return descend(state, hyper, lr)


def baseline_step(
    state: ClientRoundState,
    spec: ModelSpec,
    dataset: Dataset,
    shard: ClientShard,
    hyper: LocalHyper,
    rng: np.random.Generator,
) -> ClientRoundState:
    """Plain SGD, or EMA momentum ``m <- (1 - beta) m + beta g`` when ``hyper.momentum``."""
    batch = sample_batch(dataset, shard, min(hyper.batch_size, shard.sample_count), rng)
    mu = hyper.fedprox_mu
    beta = hyper.local_momentum_beta

    def update(m, g):
        return (1.0 - beta) * m + beta * g if hyper.momentum else g

    g_cur = _stoch_grad(spec, state.omega_cur, batch, state.omega_t_anchor, mu)
    m_hat = None
    if state.tracks_hat:
        gh = _stoch_grad(spec, state.omega_hat, batch, state.omega_tm1_anchor, mu)
        m_hat = update(state.m_hat, gh)
    state = dataclasses.replace(
        state,
        m_cur=update(state.m_cur, g_cur),
        m_hat=m_hat,
        accum=state.accum + grad_norm_sq(g_cur),
    )
    return descend(state, hyper)


def run_local_round(
    omega_t: np.ndarray,
    omega_tm1: np.ndarray | None,
    spec: ModelSpec,
    dataset: Dataset,
    shard: ClientShard,
    hyper: LocalHyper,
    rng: np.random.Generator,
) -> ClientReport:
    """Run ``kappa_i = max(1, E * N_i // B)`` parameter updates and package the report.

    Pass ``omega_tm1=None`` to skip the shadow sequence; ``delta_diff`` is then None.
    """
    kappa = local_step_count(hyper.epochs, shard.sample_count, hyper.batch_size)
    state = init_client_round(omega_t, omega_tm1, spec, dataset, shard, hyper)
    if hyper.local_mvr:
        state = descend(state, hyper)
        for _ in range(kappa - 1):
            state = mvr_step(state, spec, dataset, shard, hyper, rng)
    else:
        for _ in range(kappa):
            state = baseline_step(state, spec, dataset, shard, hyper, rng)

    delta = omega_t - state.omega_cur
    delta_diff = None
    if state.tracks_hat:
        delta_diff = delta - (omega_tm1 - state.omega_hat)
    local_loss = eval_loss(spec, state.omega_cur, shard_batch(dataset, shard)).loss
    return ClientReport(
        client_id=shard.client_id,
        delta=delta,
        delta_diff=delta_diff,
        local_loss=local_loss,
        steps_taken=len(state.lrs),
        mean_lr=float(np.mean(state.lrs)),
        lr_trace=state.lrs,
    )
