"""Round orchestration, evaluation and diagnostics.

Randomness is split per purpose from the master seed so that results never
depend on how client work is scheduled: participant sampling for round ``t``
uses ``default_rng([seed, 1, t])`` and client ``i``'s batches in round ``t``
use ``default_rng([seed, 2, t, i])``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .datagen import (
    ClientShard,
    Dataset,
    PartitionConfig,
    dirichlet_partition,
    gen_synthetic,
    load_mnist_idx,
    sample_batch,
    shard_batch,
)
from .local_update import ClientReport, run_local_round
from .nummath import LossReport, ModelSpec, eval_loss, grad, grad_norm_sq, init_params
from .server_update import (
    ServerState,
    aggregate_first,
    aggregate_mvr,
    apply_global,
    beta_schedule,
    fedavg_aggregate,
    sample_participants,
)

_INIT, _PARTICIPANTS, _CLIENT = 0, 1, 2
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    grad_norm_sq: float
    mean_lr: float
    participating: int
    floats_sent: int
    local_steps: int = 0  # cumulative over all rounds so far


@dataclass(frozen=True)
class AssumptionEstimate:
    L_hat: float
    sigma_hat: float
    G_hat: float
    global_var_hat: float


@dataclass(frozen=True)
class Problem:
    spec: ModelSpec
    train: Dataset
    test: Dataset
    shards: list[ClientShard]


def bundled_mnist_dir() -> Path:
    return Path(str(resources.files("fedmvr") / "data" / "mnist5k"))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_dir(directory, split: str) -> Dataset:
    directory = Path(directory) if directory else bundled_mnist_dir()
    images, labels = MNIST_FILES[split]
    return load_mnist_idx(_find(directory, images), _find(directory, labels))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    dc = cfg.data
    if dc.source == "mnist":
        train = load_mnist_dir(dc.mnist_dir, "train")
        test = load_mnist_dir(dc.mnist_dir, "test")
        if dc.train_limit:
            train = train.head(dc.train_limit)
        if dc.test_limit:
            test = test.head(dc.test_limit)
        return train, test
    full = gen_synthetic(cfg.seed, dc.synthetic_train + dc.synthetic_test, dc.synthetic_dim,
                         dc.synthetic_classes, dc.synthetic_noise)
    n = dc.synthetic_train
    train = Dataset(full.inputs[:n], full.labels[:n], full.num_classes)
    test = Dataset(full.inputs[n:], full.labels[n:], full.num_classes)
    return train, test


def build_problem(cfg: ExperimentConfig) -> Problem:
    train, test = load_data(cfg)
    spec = ModelSpec(cfg.model, train.input_dim, train.num_classes, cfg.hidden_dim, cfg.l2_lambda)
    shards = dirichlet_partition(train, PartitionConfig(cfg.n_clients, cfg.alpha, cfg.seed))
    return Problem(spec, train, test, shards)


def client_rng(seed: int, round: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _CLIENT, round, client_id])


def participant_rng(seed: int, round: int) -> np.random.Generator:
    return np.random.default_rng([seed, _PARTICIPANTS, round])


def initial_params(cfg: ExperimentConfig, spec: ModelSpec) -> np.ndarray:
    return init_params(spec, np.random.default_rng([cfg.seed, _INIT]))


def evaluate(spec: ModelSpec, params: np.ndarray, dataset: Dataset) -> LossReport:
    return eval_loss(spec, params, dataset.as_batch())


def run_experiment(
    cfg: ExperimentConfig,
    workers: int = 1,
    on_report: Callable[[int, ClientReport], None] | None = None,
    problem: Problem | None = None,
    on_round: Callable[[int, ServerState], None] | None = None,
) -> list[RoundMetrics]:
    """Run ``cfg.rounds`` communication rounds and return the evaluated metrics.

    ``workers`` sets how many clients train concurrently; it never changes the
    output. ``on_report(round, report)`` sees every client report in client-id
    order, and ``on_round(round, state)`` sees the server state after each
    global update.
    """
    problem = problem or build_problem(cfg)
    spec, train = problem.spec, problem.train
    local, server = cfg.local, cfg.server
    state = ServerState.initial(initial_params(cfg, spec))
    uplink_vectors = 2 if server.global_mvr else 1
    metrics: list[RoundMetrics] = []
    local_steps = 0

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            try:
                chosen = sample_participants(server, t, participant_rng(cfg.seed, t))
                omega_tm1 = state.omega_tm1 if server.global_mvr else None

                def work(cid: int, t=t, state=state, omega_tm1=omega_tm1) -> ClientReport:
                    return run_local_round(state.omega_t, omega_tm1, spec, train, problem.shards[cid],
                                           local, client_rng(cfg.seed, t, cid))

                reports = list(pool.map(work, chosen)) if pool else [work(c) for c in chosen]
                reports.sort(key=lambda r: r.client_id)
                if on_report:
                    for rep in reports:
                        on_report(t, rep)

                if server.global_mvr and state.m_hat_prev is None:
                    m_hat = aggregate_first(reports)
                elif server.global_mvr:
                    m_hat = aggregate_mvr(reports, state.m_hat_prev, beta_schedule(server, t))
                else:
                    weights = None
                    if server.weighting == "samples":
                        sizes = [problem.shards[r.client_id].sample_count for r in reports]
                        weights = [n / sum(sizes) for n in sizes]
                    m_hat = fedavg_aggregate(reports, weights)
                state = apply_global(state, m_hat)
                if on_round:
                    on_round(t, state)
                local_steps += sum(r.steps_taken for r in reports)

                if t % cfg.eval_every == 0:
                    tr = evaluate(spec, state.omega_t, train)
                    te = evaluate(spec, state.omega_t, problem.test)
                    metrics.append(RoundMetrics(
                        round=t,
                        train_loss=tr.loss,
                        train_acc=tr.accuracy,
                        test_loss=te.loss,
                        test_acc=te.accuracy,
                        grad_norm_sq=grad_norm_sq(grad(spec, state.omega_t, train.as_batch())),
                        mean_lr=float(np.mean([r.mean_lr for r in reports])),
                        participating=len(reports),
                        floats_sent=uplink_vectors * spec.dim * len(reports),
                        local_steps=local_steps,
                    ))
            except ExperimentError:
                raise
            except Exception as exc:
                raise ExperimentError(f"round {t}: {type(exc).__name__}: {exc}") from exc
    finally:
        if pool:
            pool.shutdown()
    return metrics


def rounds_to_threshold(metrics: Sequence[RoundMetrics], field: str, threshold: float) -> int | None:
    """First round whose ``grad_norm_sq`` is <= threshold (or ``test_acc`` >= threshold)."""
    if field not in ("grad_norm_sq", "test_acc"):
        raise ValueError(f"unsupported field {field!r}")
    for m in metrics:
        value = getattr(m, field)
        if (value <= threshold) if field == "grad_norm_sq" else (value >= threshold):
            return m.round
    return None


def probe_assumptions(
    spec: ModelSpec,
    dataset: Dataset,
    shards: Sequence[ClientShard],
    n_pairs: int,
    rng: np.random.Generator,
    batch_size: int = 50,
    n_batches: int = 8,
    pair_distance: float = 0.1,
    power_iters: int = 10,
) -> AssumptionEstimate:
    """Empirical smoothness, local variance, gradient bound and client dispersion.

    Points are drawn from the model's initialisation distribution. Each point is
    paired with a neighbour ``pair_distance`` away along the direction of largest
    gradient change, found by ``power_iters`` rounds of power iteration on
    gradient differences from a random start. Random directions alone would
    almost never line up with the top curvature in high dimension.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    full = dataset.as_batch()
    local_batches = [shard_batch(dataset, s) for s in shards]
    L_hat = sigma_sq = G_hat = 0.0
    dispersion = []
    for _ in range(n_pairs):
        x = init_params(spec, rng)
        gx = grad(spec, x, full)
        u = rng.normal(size=x.size)
        for _ in range(power_iters):
            step = grad(spec, x + pair_distance * u / np.linalg.norm(u), full) - gx
            if not np.any(step):
                break
            u = step
        y = x + pair_distance * u / np.linalg.norm(u)
        L_hat = max(L_hat, float(np.linalg.norm(gx - grad(spec, y, full)) / np.linalg.norm(x - y)))
        per_client = []
        for shard, local in zip(shards, local_batches):
            g_local = grad(spec, x, local)
            per_client.append(grad_norm_sq(g_local - gx))
            b = min(batch_size, shard.sample_count)
            devs = []
            for _ in range(n_batches):
                g_b = grad(spec, x, sample_batch(dataset, shard, b, rng))
                G_hat = max(G_hat, float(np.abs(g_b).max()))
                devs.append(grad_norm_sq(g_b - g_local))
            sigma_sq = max(sigma_sq, float(np.mean(devs)))
        dispersion.append(np.mean(per_client))
    return AssumptionEstimate(L_hat, float(np.sqrt(sigma_sq)), G_hat, float(np.mean(dispersion)))
