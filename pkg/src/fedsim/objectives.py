"""Federated problem construction: per-client loss/gradient oracles.

Three synthetic problem families with progressively weaker structure:

* quadratics with known optimum, smoothness and PL constants,
* two-blob binary logistic regression with an analytic smoothness bound,
* a small two-layer tanh network (non-convex, no constants).

Plus Dirichlet label-skew partitioning and CSV ingestion for tabular data.
All randomness flows through :class:`~fedsim.vectors.RngStream`; objectives
are immutable after construction and never store generator state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .vectors import ParamVector, RngStream

DEFAULT_SIGMA_L = 0.1
DEFAULT_WEIGHT_DECAY = 1e-3


class PartitionError(ValueError):
    """A client ended up with zero samples."""


class CsvFormatError(ValueError):
    """Malformed CSV input, with row/column location where known."""


class ClientObjective:
    """Loss/gradient oracle for one client's local objective.

    Finite-sum objectives expose ``batch_gradient`` over explicit sample
    indices; ``sample_count == 0`` marks a population objective (noise model
    instead of minibatching).
    """

    sample_count: int = 0

    def loss(self, x: ParamVector) -> float:
        raise NotImplementedError

    def full_gradient(self, x: ParamVector) -> ParamVector:
        raise NotImplementedError

    def batch_gradient(self, x: ParamVector, indices: np.ndarray) -> ParamVector:
        raise NotImplementedError

    def stochastic_gradient(self, x: ParamVector, batch_size: int, rng: RngStream) -> ParamVector:
        """Gradient on a uniformly drawn batch (without replacement).

        ``batch_size >= sample_count`` selects every sample in index order,
        which makes the result bit-identical to ``full_gradient``.
        """
        n = self.sample_count
        if batch_size <= 0 or batch_size >= n:
            return self.full_gradient(x)
        idx = np.sort(rng.generator.choice(n, size=batch_size, replace=False))
        return self.batch_gradient(x, idx)


class QuadraticClient(ClientObjective):
    """f_i(x) = 0.5 (x - b)^T H (x - b) with optional additive gradient noise.

    A population objective (sample_count == 0): the stochastic gradient is the
    exact gradient plus zero-mean Gaussian noise with E||noise||^2 equal to
    ``noise_sigma**2``, so the bounded-variance constant is a direct knob.
    ``noise_sigma == 0`` makes stochastic and full gradients identical.
    """

    sample_count = 0

    def __init__(self, hessian: np.ndarray, center: np.ndarray, noise_sigma: float = 0.0):
        self.hessian = np.asarray(hessian, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)
        self.noise_sigma = float(noise_sigma)
        d = self.center.shape[0]
        if self.hessian.shape != (d, d):
            raise ValueError(f"hessian shape {self.hessian.shape} does not match center dim {d}")

    def loss(self, x: ParamVector) -> float:
        r = x - self.center
        return 0.5 * float(r @ self.hessian @ r)

    def full_gradient(self, x: ParamVector) -> ParamVector:
        return self.hessian @ (x - self.center)

    def stochastic_gradient(self, x: ParamVector, batch_size: int, rng: RngStream) -> ParamVector:
        return self.noisy_gradient(x, rng.generator)

    def noisy_gradient(self, x: ParamVector, gen: np.random.Generator) -> ParamVector:
        g = self.full_gradient(x)
        if self.noise_sigma > 0.0:
            d = g.shape[0]
            g = g + (self.noise_sigma / np.sqrt(d)) * gen.standard_normal(d)
        return g


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LogisticClient(ClientObjective):
    """L2-regularized binary logistic regression on the client's samples.

    loss(w) = mean_s [ log(1 + e^{z_s}) - y_s z_s ] + 0.5 * lam * ||w||^2
    with z = X w and labels y in {0, 1}.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, weight_decay: float = DEFAULT_WEIGHT_DECAY):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.weight_decay = float(weight_decay)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features/labels shape mismatch")
        self.sample_count = self.features.shape[0]
        self._all = np.arange(self.sample_count)

    def loss(self, x: ParamVector) -> float:
        z = self.features @ x
        data = float(np.mean(np.logaddexp(0.0, z) - self.labels * z))
        return data + 0.5 * self.weight_decay * float(x @ x)

    def batch_gradient(self, x: ParamVector, indices: np.ndarray) -> ParamVector:
        xb = self.features[indices]
        z = xb @ x
        r = _sigmoid(z) - self.labels[indices]
        return xb.T @ r / len(indices) + self.weight_decay * x

    def full_gradient(self, x: ParamVector) -> ParamVector:
        return self.batch_gradient(x, self._all)

    def smoothness_bound(self) -> float:
        gram_top = float(np.linalg.eigvalsh(self.features.T @ self.features)[-1])
        return 0.25 * gram_top / self.sample_count + self.weight_decay


class MlpClient(ClientObjective):
    """Two-layer tanh network with squared loss, hand-coded backprop.

    Parameters are packed flat as [W1 (h,d), b1 (h), W2 (o,h), b2 (o)].
    """

    def __init__(self, features: np.ndarray, targets: np.ndarray, widths: tuple[int, int, int]):
        self.features = np.asarray(features, dtype=np.float64)
        self.targets = np.atleast_2d(np.asarray(targets, dtype=np.float64).T).T
        d_in, hidden, d_out = widths
        if self.features.shape[1] != d_in or self.targets.shape[1] != d_out:
            raise ValueError("data shape does not match widths")
        self.widths = (d_in, hidden, d_out)
        self.sample_count = self.features.shape[0]
        self._all = np.arange(self.sample_count)

    @property
    def dim(self) -> int:
        d, h, o = self.widths
        return h * d + h + o * h + o

    def unpack(self, x: ParamVector):
        d, h, o = self.widths
        i = 0
        w1 = x[i:i + h * d].reshape(h, d); i += h * d
        b1 = x[i:i + h]; i += h
        w2 = x[i:i + o * h].reshape(o, h); i += o * h
        b2 = x[i:i + o]
        return w1, b1, w2, b2

    def _forward(self, x: ParamVector, indices: np.ndarray):
        w1, b1, w2, b2 = self.unpack(x)
        xb = self.features[indices]
        a1 = np.tanh(xb @ w1.T + b1)
        out = a1 @ w2.T + b2
        return xb, a1, out, w2

    def loss(self, x: ParamVector) -> float:
        _, _, out, _ = self._forward(x, self._all)
        r = out - self.targets
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))

    def batch_gradient(self, x: ParamVector, indices: np.ndarray) -> ParamVector:
        xb, a1, out, w2 = self._forward(x, indices)
        r = (out - self.targets[indices]) / len(indices)
        g_w2 = r.T @ a1
        g_b2 = r.sum(axis=0)
        dz1 = (r @ w2) * (1.0 - a1 * a1)
        g_w1 = dz1.T @ xb
        g_b1 = dz1.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def full_gradient(self, x: ParamVector) -> ParamVector:
        return self.batch_gradient(x, self._all)


class EpochSampler:
    """Minibatch index stream: each epoch is a fresh shuffle of all samples.

    Batches may straddle epoch boundaries so every sample is touched exactly
    once per epoch.  ``batch_size <= 0`` or >= n yields the full index range
    in natural order (full batch, no generator draws).
    """

    def __init__(self, n: int, batch_size: int, gen: np.random.Generator):
        self.n = n
        self.batch_size = batch_size if 0 < batch_size < n else n
        self.gen = gen
        self._queue = np.empty(0, dtype=np.intp)

    def next_batch(self) -> np.ndarray:
        if self.batch_size >= self.n:
            return np.arange(self.n)
        while self._queue.size < self.batch_size:
            self._queue = np.concatenate([self._queue, self.gen.permutation(self.n)])
        batch = self._queue[: self.batch_size]
        self._queue = self._queue[self.batch_size:]
        return np.sort(batch)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a labeled sample set across clients.

    ``concentration is None`` means a random equal (IID) split; otherwise it
    is the Dirichlet concentration controlling label skew (smaller = more
    skewed).  ``labels`` is filled in by whoever owns the dataset.
    """

    num_clients: int
    concentration: Optional[float] = None
    labels: Optional[np.ndarray] = None

    @property
    def iid(self) -> bool:
        return self.concentration is None


@dataclass(frozen=True)
class PartitionResult:
    client_indices: list  # one sorted int array per client
    class_values: Optional[np.ndarray] = None
    class_proportions: Optional[np.ndarray] = None  # (num_classes, num_clients), final accepted draw


@dataclass
class FederatedProblem:
    """N client objectives plus whatever closed-form constants are known."""

    clients: list
    dim: int
    known_optimum: Optional[ParamVector] = None
    smoothness_L: Optional[float] = None
    pl_mu: Optional[float] = None
    dissimilarity: Optional[tuple[float, float]] = None
    partition: Optional[PartitionResult] = None

    @property
    def num_clients(self) -> int:
        return len(self.clients)


def global_loss(problem: FederatedProblem, x: ParamVector) -> float:
    """f(x) = (1/N) sum_i f_i(x), full-batch, fixed client order."""
    return sum(c.loss(x) for c in problem.clients) / problem.num_clients


def global_gradient(problem: FederatedProblem, x: ParamVector) -> ParamVector:
    acc = problem.clients[0].full_gradient(x).copy()
    for c in problem.clients[1:]:
        acc += c.full_gradient(x)
    return acc / problem.num_clients


def _largest_remainder_counts(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that track fractional quotas."""
    base = np.floor(quotas).astype(int)
    short = total - int(base.sum())
    if short > 0:
        frac = quotas - np.floor(quotas)
        order = np.argsort(-frac, kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(spec: PartitionSpec, rng: RngStream) -> PartitionResult:
    """Assign samples to clients, per-class, by Dirichlet-drawn proportions.

    For every class the label mass over clients is drawn from
    Dirichlet(concentration); samples are dealt out with largest-remainder
    rounding so counts are conserved exactly.  An IID spec gives a random
    equal split.  Retries with fresh draws (up to 10) if any client ends up
    empty, then raises :class:`PartitionError`.
    """
    if spec.labels is None:
        raise ValueError("partition spec has no labels")
    labels = np.asarray(spec.labels)
    n, num_clients = labels.shape[0], spec.num_clients
    if n < num_clients:
        raise PartitionError(f"{n} samples cannot cover {num_clients} clients")
    gen = rng.generator

    if spec.iid:
        perm = gen.permutation(n)
        sizes = np.full(num_clients, n // num_clients)
        sizes[: n % num_clients] += 1
        splits = np.split(perm, np.cumsum(sizes)[:-1])
        return PartitionResult([np.sort(s) for s in splits])

    if spec.concentration <= 0:
        raise ValueError("Dirichlet concentration must be positive")
    class_values = np.unique(labels)
    for _ in range(10):
        assigned = [[] for _ in range(num_clients)]
        proportions = np.empty((len(class_values), num_clients))
        for ci, cls in enumerate(class_values):
            idx = gen.permutation(np.flatnonzero(labels == cls))
            p = gen.dirichlet(np.full(num_clients, float(spec.concentration)))
            proportions[ci] = p
            counts = _largest_remainder_counts(p * len(idx), len(idx))
            start = 0
            for client, cnt in enumerate(counts):
                assigned[client].append(idx[start:start + cnt])
                start += cnt
        parts = [np.sort(np.concatenate(a)) if a else np.empty(0, dtype=np.intp) for a in assigned]
        if all(p.size > 0 for p in parts):
            return PartitionResult(parts, class_values, proportions)
    raise PartitionError("a client received no samples after 10 redraws")


def quadratic_problem_from(
    hessians: Sequence[np.ndarray],
    centers: Sequence[np.ndarray],
    sigma_l: float = 0.0,
) -> FederatedProblem:
    """Assemble a quadratic problem from explicit (H_i, b_i), deriving constants.

    known_optimum solves (sum H_i) x = sum H_i b_i; smoothness is the largest
    client Hessian eigenvalue; the PL constant is the smallest eigenvalue of
    the averaged Hessian.
    """
    clients = [QuadraticClient(h, b, sigma_l) for h, b in zip(hessians, centers)]
    dim = clients[0].center.shape[0]
    h_sum = np.sum([c.hessian for c in clients], axis=0)
    rhs = np.sum([c.hessian @ c.center for c in clients], axis=0)
    x_star = np.linalg.solve(h_sum, rhs)
    smooth = max(float(np.linalg.eigvalsh(c.hessian)[-1]) for c in clients)
    mu = float(np.linalg.eigvalsh(h_sum / len(clients))[0])
    assert mu > 0, "averaged Hessian is not positive definite"
    return FederatedProblem(clients, dim, known_optimum=x_star, smoothness_L=smooth, pl_mu=mu)


def quadratic_problem(
    n_clients: int,
    dim: int,
    heterogeneity: float,
    rng: RngStream,
    sigma_l: float = DEFAULT_SIGMA_L,
    eig_range: tuple[float, float] = (0.5, 2.0),
) -> FederatedProblem:
    """Random SPD quadratics with centers spread proportionally to ``heterogeneity``."""
    if n_clients < 1 or dim < 1:
        raise ValueError("need n_clients >= 1 and dim >= 1")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be nonnegative")
    gen = rng.generator
    hessians, centers = [], []
    for _ in range(n_clients):
        q, _ = np.linalg.qr(gen.standard_normal((dim, dim)))
        eigs = gen.uniform(eig_range[0], eig_range[1], size=dim)
        h = (q * eigs) @ q.T
        h = 0.5 * (h + h.T)
        assert np.linalg.eigvalsh(h)[0] > 0, "drawn client Hessian is not positive definite"
        hessians.append(h)
        centers.append(heterogeneity * gen.standard_normal(dim))
    return quadratic_problem_from(hessians, centers, sigma_l)


def _two_blob_dataset(n: int, dim: int, gen: np.random.Generator, class_sep: float = 2.0):
    """Balanced two-class Gaussian blobs along a random unit direction."""
    labels = np.zeros(n, dtype=np.intp)
    labels[n // 2:] = 1
    labels = labels[gen.permutation(n)]
    direction = gen.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    shift = (labels[:, None] - 0.5) * class_sep * direction
    features = gen.standard_normal((n, dim)) + shift
    return features, labels


def logreg_problem(
    n_clients: int,
    dim: int,
    samples_per_client: int,
    partition: PartitionSpec,
    rng: RngStream,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    class_sep: float = 2.0,
) -> FederatedProblem:
    """Synthetic two-blob logistic regression split across clients.

    ``samples_per_client`` fixes the average client size (total n_clients *
    samples_per_client samples); the actual per-client counts follow the
    partition spec.  The smoothness constant is the analytic bound
    max_i [ lambda_max(X_i^T X_i) / (4 n_i) + weight_decay ].
    """
    if samples_per_client < 1:
        raise ValueError("samples_per_client must be >= 1")
    gen = rng.generator
    features, labels = _two_blob_dataset(n_clients * samples_per_client, dim, gen, class_sep)
    part = dirichlet_partition(replace(partition, num_clients=n_clients, labels=labels), rng)
    clients = [LogisticClient(features[idx], labels[idx], weight_decay) for idx in part.client_indices]
    smooth = max(c.smoothness_bound() for c in clients)
    return FederatedProblem(clients, dim, smoothness_L=smooth, partition=part)


def mlp_problem(
    n_clients: int,
    widths: tuple[int, int, int],
    partition: PartitionSpec,
    rng: RngStream,
    samples_per_client: int = 30,
    class_sep: float = 2.0,
) -> FederatedProblem:
    """Two-layer tanh regression onto {0,1} blob labels; no known constants."""
    d_in, hidden, d_out = widths
    if d_out != 1:
        raise ValueError("only scalar-output networks are supported")
    gen = rng.generator
    features, labels = _two_blob_dataset(n_clients * samples_per_client, d_in, gen, class_sep)
    part = dirichlet_partition(replace(partition, num_clients=n_clients, labels=labels), rng)
    clients = [
        MlpClient(features[idx], labels[idx].astype(np.float64), (d_in, hidden, d_out))
        for idx in part.client_indices
    ]
    return FederatedProblem(clients, clients[0].dim, partition=part)


def ingest_csv(path: str, label_column: str):
    """Read a numeric-feature CSV with a header row.

    Returns ``(labels, features)``: integer class labels (sorted unique
    values mapped to 0..C-1) and per-column standardized features
    (zero-variance columns map to all zeros).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise CsvFormatError(f"label column '{label_column}' not found in header {header}")
        label_idx = header.index(label_column)
        raw_labels: list[str] = []
        rows: list[list[float]] = []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(f"row {rownum} has {len(row)} fields, expected {len(header)}")
            feats = []
            for col, cell in enumerate(row):
                if col == label_idx:
                    raw_labels.append(cell.strip())
                    continue
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"non-numeric value '{cell.strip()}' at row {rownum}, column '{header[col]}'"
                    ) from None
            rows.append(feats)
    if not rows:
        raise CsvFormatError("no data rows")
    features = np.asarray(rows, dtype=np.float64)
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    features = np.where(sd > 0, (features - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    uniq = sorted(set(raw_labels), key=lambda v: (0, float(v)) if _is_number(v) else (1, v))
    mapping = {v: i for i, v in enumerate(uniq)}
    labels = np.array([mapping[v] for v in raw_labels], dtype=np.intp)
    return labels, features


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def csv_problem(
    path: str,
    label_column: str,
    partition: PartitionSpec,
    rng: RngStream,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
) -> FederatedProblem:
    """Logistic regression over an ingested two-class CSV dataset."""
    labels, features = ingest_csv(path, label_column)
    if len(np.unique(labels)) != 2:
        raise CsvFormatError("logistic objective needs exactly 2 label classes")
    part = dirichlet_partition(replace(partition, labels=labels), rng)
    clients = [LogisticClient(features[idx], labels[idx], weight_decay) for idx in part.client_indices]
    smooth = max(c.smoothness_bound() for c in clients)
    return FederatedProblem(clients, features.shape[1], smoothness_L=smooth, partition=part)


def estimate_dissimilarity(problem: FederatedProblem, probe_points: Sequence[ParamVector]):
    """Fit the smallest (G, B) with mean_i ||grad_i||^2 <= G^2 + B^2 ||grad f||^2.

    Fits the upper envelope of the probe scatter: among all lines
    G^2 + B^2 * a lying on or above every probe (nonnegative coefficients),
    the one with least total slack.  That optimum touches two points of the
    upper convex hull, so it is found exactly by pair enumeration.
    Diagnostic only: finite probes cannot certify the bound globally.
    """
    if len(probe_points) < 2:
        raise ValueError("need at least 2 probe points")
    a = np.empty(len(probe_points))
    y = np.empty(len(probe_points))
    for p, x in enumerate(probe_points):
        grads = [c.full_gradient(x) for c in problem.clients]
        mean_grad = np.mean(grads, axis=0)
        a[p] = float(mean_grad @ mean_grad)
        y[p] = float(np.mean([g @ g for g in grads]))

    def slack(g_sq: float, b_sq: float) -> float:
        return float(np.sum(g_sq + b_sq * a - y))

    # flat envelope through the highest point is always feasible
    best = (float(np.max(y)), 0.0)
    best_slack = slack(*best)
    for p in range(len(a)):
        for q in range(p + 1, len(a)):
            da = a[p] - a[q]
            if abs(da) < 1e-30:
                continue
            b_sq = (y[p] - y[q]) / da
            if b_sq <= 0:
                continue
            g_sq = max(0.0, float(np.max(y - b_sq * a)))
            cand = slack(g_sq, b_sq)
            if cand < best_slack - 1e-15 * (1.0 + abs(best_slack)):
                best, best_slack = (g_sq, b_sq), cand
    return float(np.sqrt(best[0])), float(np.sqrt(best[1]))
