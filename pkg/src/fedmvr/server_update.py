"""Server side: participant sampling, aggregation rules and the global step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .local_update import ClientReport
from .nummath import DimensionError


@dataclass(frozen=True)
class ServerHyper:
    n_clients: int = 10
    participants: int = 5
    beta_mode: Literal["constant", "decaying"] = "constant"
    beta0: float = 0.9
    global_mvr: bool = True
    weighting: Literal["uniform", "samples"] = "uniform"

    def __post_init__(self):
        if not 1 <= self.participants <= self.n_clients:
            raise ValueError(f"need 1 <= participants ({self.participants}) <= n_clients ({self.n_clients})")
        if not 0 < self.beta0 <= 1:
            raise ValueError("beta0 must lie in (0, 1]")
        if self.beta_mode not in ("constant", "decaying"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.weighting not in ("uniform", "samples"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class ServerState:
    omega_t: np.ndarray
    omega_tm1: np.ndarray
    m_hat_prev: np.ndarray | None = None
    round: int = 1

    @classmethod
    def initial(cls, omega: np.ndarray) -> "ServerState":
        # before any round the previous model is the initial one
        return cls(omega_t=omega, omega_tm1=omega, m_hat_prev=None, round=1)


def sample_participants(hyper: ServerHyper, round: int, rng: np.random.Generator) -> list[int]:
    """``participants`` distinct client ids drawn uniformly, ascending.

    ``round`` is not mixed in here; callers derive ``rng`` per round.
    """
    n, r = hyper.n_clients, hyper.participants
    if r > n:
        raise ValueError(f"cannot sample {r} of {n} clients")
    return sorted(int(i) for i in rng.choice(n, size=r, replace=False))


def _sorted(reports: Sequence[ClientReport]) -> list[ClientReport]:
    if not reports:
        raise ValueError("no client reports to aggregate")
    out = sorted(reports, key=lambda r: r.client_id)
    d = out[0].delta.size
    for r in out:
        if r.delta.size != d:
            raise DimensionError(d, r.delta.size, what=f"delta of client {r.client_id}")
    return out


def _mean(vectors: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    acc = np.zeros_like(vectors[0])
    if weights is None:
        for v in vectors:
            acc += v
        return acc / len(vectors)
    for wt, v in zip(weights, vectors):
        acc += wt * v
    return acc


def aggregate_first(reports: Sequence[ClientReport]) -> np.ndarray:
    """Plain average of the client deltas."""
    return _mean([r.delta for r in _sorted(reports)])


def aggregate_mvr(reports: Sequence[ClientReport], m_hat_prev: np.ndarray, beta_t: float) -> np.ndarray:
    """Global momentum with the cross-round correction term.

    ``beta * mean(delta) + (1 - beta) * m_hat_prev + (1 - beta) * mean(delta_diff)``
    """
    if not 0 <= beta_t <= 1:
        raise ValueError("beta_t must lie in [0, 1]")
    reports = _sorted(reports)
    if m_hat_prev.size != reports[0].delta.size:
        raise DimensionError(reports[0].delta.size, m_hat_prev.size, what="m_hat_prev")
    if any(r.delta_diff is None for r in reports):
        raise ValueError("aggregate_mvr needs delta_diff from every client")
    mean_delta = _mean([r.delta for r in reports])
    mean_diff = _mean([r.delta_diff for r in reports])
    return beta_t * mean_delta + (1.0 - beta_t) * m_hat_prev + (1.0 - beta_t) * mean_diff


def fedavg_aggregate(reports: Sequence[ClientReport], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean of deltas; uniform ``1/R`` when ``weights`` is None.

    ``weights`` follow the (ascending client id) order of the sorted reports.
    """
    ordered = _sorted(reports)
    if weights is not None:
        if len(weights) != len(ordered):
            raise ValueError(f"{len(weights)} weights for {len(ordered)} reports")
        if not np.isclose(sum(weights), 1.0, rtol=0, atol=1e-12):
            raise ValueError("weights must sum to 1")
    return _mean([r.delta for r in ordered], weights)


def apply_global(state: ServerState, m_hat: np.ndarray) -> ServerState:
    if m_hat.shape != state.omega_t.shape:
        raise DimensionError(state.omega_t.size, m_hat.size, what="m_hat")
    return ServerState(
        omega_t=state.omega_t - m_hat,
        omega_tm1=state.omega_t,
        m_hat_prev=m_hat,
        round=state.round + 1,
    )


def beta_schedule(hyper: ServerHyper, round: int) -> float:
    if hyper.beta_mode == "constant":
        return hyper.beta0
    return min(1.0, hyper.beta0 * (2.0 / (round + 1)) ** (2.0 / 3.0))
