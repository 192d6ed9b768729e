"""Round-by-round orchestration and metric recording.

One thread owns the round state; client work items may be fanned out to a
thread pool but every reduction runs in ascending client-id order, so the
recorded trajectory is byte-identical whether clients run sequentially or in
parallel.  Full-batch measurement oracles (loss, gradient norms, consistency)
run outside the training path and never perturb the trajectory.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .algorithms import (
    ROUND_FUNCTIONS,
    AlgoParams,
    DivergenceError,
    EtaBoundReport,
    MimHyper,
    init_round_state,
    validate_eta_l,
)
from .analysis import (
    MetricRow,
    VerifierState,
    compute_u,
    local_consistency,
    verify_delta_recursion,
    verify_u_update,
)
from .objectives import (
    FederatedProblem,
    PartitionSpec,
    csv_problem,
    global_gradient,
    global_loss,
    logreg_problem,
    mlp_problem,
    quadratic_problem,
)
from .vectors import PURPOSE_DATA, PURPOSE_SAMPLING, RngStream, derive_rng, l2_norm_sq

PROBLEM_KINDS = ("quadratic", "logreg", "mlp", "csv")
SWEEP_AXES = ("s_participate", "k_local", "eta_l", "concentration", "alpha_beta", "algorithm")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class ProblemConfig:
    kind: str = "quadratic"
    n_clients: int = 10
    dim: int = 10
    heterogeneity: float = 1.0
    concentration: Optional[float] = None  # None = IID split
    sigma_l: float = 0.1
    batch_size: int = 20
    samples_per_client: int = 50
    weight_decay: float = 1e-3
    mlp_hidden: int = 8
    csv_path: Optional[str] = None
    label_column: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemConfig = ProblemConfig()
    algorithm: str = "fedmim"
    hyper: MimHyper = MimHyper()
    params: AlgoParams = AlgoParams()
    rounds: int = 1
    master_seed: int = 0
    metric_every: int = 1
    verify: bool = False
    out_dir: str = "runs"
    workers: int = 1
    corrupt_delta: float = 0.0  # fault injection for the verification self-test

    def validated(self) -> "RunConfig":
        if self.algorithm not in ROUND_FUNCTIONS:
            raise ConfigError(f"unknown algorithm '{self.algorithm}' (choose from {sorted(ROUND_FUNCTIONS)})")
        if self.problem.kind not in PROBLEM_KINDS:
            raise ConfigError(f"unknown problem kind '{self.problem.kind}' (choose from {PROBLEM_KINDS})")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.metric_every < 1:
            raise ConfigError("metric_every must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not (1 <= self.hyper.s_participate <= self.problem.n_clients):
            raise ConfigError("s_participate must be in [1, n_clients]")
        if self.problem.kind == "csv" and not self.problem.csv_path:
            raise ConfigError("csv problems need csv_path")
        if self.problem.kind == "csv" and not self.problem.label_column:
            raise ConfigError("csv problems need label_column")
        return self


@dataclass
class RunRecord:
    """Everything one training run produced, cheap enough to keep in memory."""

    config: RunConfig
    rows: list = field(default_factory=list)
    final_x: Optional[np.ndarray] = None
    final_loss: Optional[float] = None
    round_wall_ms: list = field(default_factory=list)  # excluded from determinism guarantees
    status: str = "completed"
    diverged_round: Optional[int] = None
    eta_bound: Optional[EtaBoundReport] = None
    max_residual_delta: Optional[float] = None
    max_residual_u: Optional[float] = None
    wall_ms_total: float = 0.0


def sample_clients(n_clients: int, s_participate: int, rng: RngStream) -> list:
    """Uniform sample of S distinct client ids, returned sorted.

    Partial Fisher-Yates over the id range, so every client is selected with
    probability S/N and pairs with probability S(S-1)/(N(N-1)).
    """
    if not (1 <= s_participate <= n_clients):
        raise ConfigError(f"cannot sample {s_participate} of {n_clients} clients")
    gen = rng.generator
    ids = list(range(n_clients))
    for i in range(s_participate):
        j = i + int(gen.integers(n_clients - i))
        ids[i], ids[j] = ids[j], ids[i]
    return sorted(ids[:s_participate])


def build_problem(cfg: ProblemConfig, master_seed: int) -> FederatedProblem:
    """Materialize the configured problem from the data-synthesis stream."""
    rng = derive_rng(master_seed, 0, 0, PURPOSE_DATA)
    spec = PartitionSpec(cfg.n_clients, cfg.concentration)
    if cfg.kind == "quadratic":
        return quadratic_problem(cfg.n_clients, cfg.dim, cfg.heterogeneity, rng, sigma_l=cfg.sigma_l)
    if cfg.kind == "logreg":
        return logreg_problem(cfg.n_clients, cfg.dim, cfg.samples_per_client, spec, rng,
                              weight_decay=cfg.weight_decay)
    if cfg.kind == "mlp":
        return mlp_problem(cfg.n_clients, (cfg.dim, cfg.mlp_hidden, 1), spec, rng,
                           samples_per_client=cfg.samples_per_client)
    if cfg.kind == "csv":
        return csv_problem(cfg.csv_path, cfg.label_column, spec, rng, weight_decay=cfg.weight_decay)
    raise ConfigError(f"unknown problem kind '{cfg.kind}'")


def _eta_bound_report(config: RunConfig, problem: FederatedProblem) -> Optional[EtaBoundReport]:
    if problem.smoothness_L is None:
        return None
    return validate_eta_l(config.hyper.eta_l, problem.smoothness_L,
                          config.hyper.k_local, config.hyper.A)


def run_training(config: RunConfig, problem: Optional[FederatedProblem] = None) -> RunRecord:
    """Execute the configured number of rounds, recording metrics on cadence.

    ``problem`` can be passed in to reuse one dataset across runs (sweeps,
    seed studies); by default it is synthesized from the master seed.
    """
    config = config.validated()
    if problem is None:
        problem = build_problem(config.problem, config.master_seed)
    record = RunRecord(config=config, eta_bound=_eta_bound_report(config, problem))
    executor = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    started = time.perf_counter()
    try:
        # overflow is detected explicitly after every local step; keep numpy quiet
        with np.errstate(over="ignore", invalid="ignore"):
            _train_loop(config, problem, record, executor)
    finally:
        if executor is not None:
            executor.shutdown()
        record.wall_ms_total = (time.perf_counter() - started) * 1000.0
    return record


def _train_loop(config: RunConfig, problem: FederatedProblem, record: RunRecord, executor) -> None:
    hyper = config.hyper
    round_fn = ROUND_FUNCTIONS[config.algorithm]
    state = init_round_state(np.zeros(problem.dim), hyper.J)
    track_identities = config.verify and config.algorithm == "fedmim"
    verifier = VerifierState(u=state.x.copy()) if track_identities else None
    root = RngStream(config.master_seed)

    for t in range(config.rounds):
        round_started = time.perf_counter()
        sampled = sample_clients(problem.num_clients, hyper.s_participate,
                                 derive_rng(config.master_seed, t, 0, PURPOSE_SAMPLING))
        prev = state
        try:
            state, art = round_fn(
                prev, problem, hyper, sampled, root,
                batch_size=config.problem.batch_size,
                collect_grads=track_identities,
                executor=executor,
                params=config.params,
            )
        except DivergenceError:
            record.status = f"diverged at round {t + 1}"
            record.diverged_round = t + 1
            record.final_x = prev.x
            record.final_loss = global_loss(problem, prev.x)
            return
        if config.corrupt_delta != 0.0:
            history = (state.delta_history[0] + config.corrupt_delta,) + state.delta_history[1:]
            state = replace(state, delta_history=history)

        res_delta = res_u = None
        u_next = None
        if verifier is not None:
            res_delta = verify_delta_recursion(
                state.delta_history[0], art.grad_sum, prev.delta_history,
                hyper.alpha, art.eta_l, hyper.s_participate, hyper.k_local)
            u_next = compute_u(state.x, state.delta_history, hyper.alpha, hyper.k_local)
            res_u = verify_u_update(verifier.u, u_next, art.grad_sum,
                                    art.eta_l, hyper.s_participate, hyper.k_local)
            verifier.u = u_next
            verifier.max_residual_delta = max(verifier.max_residual_delta, res_delta)
            verifier.max_residual_u = max(verifier.max_residual_u, res_u)

        record.round_wall_ms.append((time.perf_counter() - round_started) * 1000.0)

        if (t + 1) % config.metric_every == 0:
            grad = global_gradient(problem, state.x)
            grad_at_u = None
            if config.algorithm == "fedmim":
                u_row = u_next if u_next is not None else compute_u(
                    state.x, state.delta_history, hyper.alpha, hyper.k_local)
                grad_at_u = l2_norm_sq(global_gradient(problem, u_row))
            record.rows.append(MetricRow(
                round=t + 1,
                loss=global_loss(problem, state.x),
                grad_norm_sq=l2_norm_sq(grad),
                grad_norm_sq_at_u=grad_at_u,
                consistency=local_consistency(art.local_finals, state.x),
                delta_norm_sq=l2_norm_sq(state.delta_history[0]),
                residual_delta=res_delta,
                residual_u=res_u,
                eta_l=art.eta_l,
            ))

    record.final_x = state.x
    record.final_loss = global_loss(problem, state.x)
    if verifier is not None:
        record.max_residual_delta = verifier.max_residual_delta
        record.max_residual_u = verifier.max_residual_u


def parse_axis_value(axis: str, value):
    """Coerce a sweep value (possibly a CLI string) to the axis' native type."""
    if axis in ("s_participate", "k_local"):
        return int(value)
    if axis == "eta_l":
        return float(value)
    if axis == "concentration":
        if isinstance(value, str) and value.strip().lower() == "iid":
            return None
        return float(value) if value is not None else None
    if axis == "alpha_beta":
        if isinstance(value, str):
            parts = value.split("|")
            if len(parts) != 2:
                raise ConfigError("alpha_beta values look like 'a0,a1|b0,b1'")
            alpha = tuple(float(v) for v in parts[0].split(",") if v.strip())
            beta = tuple(float(v) for v in parts[1].split(",") if v.strip())
            return alpha, beta
        return value
    if axis == "algorithm":
        return str(value)
    raise ConfigError(f"unknown sweep axis '{axis}' (choose from {SWEEP_AXES})")


def apply_axis(config: RunConfig, axis: str, value) -> RunConfig:
    value = parse_axis_value(axis, value)
    if axis in ("s_participate", "k_local", "eta_l"):
        return replace(config, hyper=replace(config.hyper, **{axis: value}))
    if axis == "concentration":
        return replace(config, problem=replace(config.problem, concentration=value))
    if axis == "alpha_beta":
        alpha, beta = value
        return replace(config, hyper=replace(config.hyper, alpha=alpha, beta=beta))
    if axis == "algorithm":
        return replace(config, algorithm=value)
    raise ConfigError(f"unknown sweep axis '{axis}'")


def run_sweep(base: RunConfig, axis: str, values) -> list:
    """Independent runs along one axis, all sharing the base master seed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis '{axis}' (choose from {SWEEP_AXES})")
    if not values:
        raise ConfigError("sweep needs at least one value")
    records = []
    for value in values:
        cfg = apply_axis(base, axis, value).validated()
        records.append(run_training(cfg))
    return records
