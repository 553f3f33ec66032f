"""Episodic training: support sampling, all-pairs relation loss, Adam updates."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import mse_pair_loss
from .model import GRN, GrnConfig, ProtocolError, compute_prototypes
from .optim import Adam


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class SupportSet:
    """``indices[k]`` are the dataset rows drawn for class ``k``."""

    indices: np.ndarray  # (K, n)

    @property
    def n(self) -> int:
        return self.indices.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.indices.ravel()

    @property
    def labels(self) -> np.ndarray:
        k, n = self.indices.shape
        return np.repeat(np.arange(k), n)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    epochs: int = 0
    seed: int = 0
    n_shots: int = 0
    pairs_per_epoch: int = 0
    wall_time_s: float = 0.0
    stopped: str = ""

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_loss"] = self.final_loss
        return d


@dataclass
class FitResult:
    model: GRN
    prototypes: np.ndarray
    report: TrainReport
    support: SupportSet


def sample_support(labels, n, seed, n_classes=None) -> SupportSet:
    """Draw ``n`` distinct trials per class, uniformly, reproducibly for ``seed``."""
    labels = np.asarray(labels)
    n_classes = n_classes or int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_classes):
        pool = np.flatnonzero(labels == k)
        if len(pool) < n:
            raise ProtocolError(f"class {k} has {len(pool)} trials, {n} requested")
        if n == len(pool):
            rows.append(pool)
        else:
            rows.append(np.sort(rng.choice(pool, size=n, replace=False)))
    return SupportSet(np.array(rows))


def all_pairs(n):
    """Every ordered pair ``(i, j)`` including ``i == j``, row-major."""
    return np.repeat(np.arange(n), n), np.tile(np.arange(n), n)


def pair_loss_and_grads(model: GRN, x, y, pairs=None):
    """Summed pair loss over ``pairs`` (default: all ordered pairs) and its gradient.

    Returns ``(per_pair_losses, grads, embeddings)``. Runs the network in train
    mode, so batch-norm running statistics advance by one step.
    """
    y = np.asarray(y)
    emb, enc_cache = model.encode_forward(x, "train")
    qi, pj = pairs if pairs is not None else all_pairs(len(y))
    r, rel_cache = model.relation_forward(emb, emb, qi, pj, "train")
    losses, d_r = mse_pair_loss(r, y[qi] == y[pj])
    d_q, d_p, grads = model.relation_backward(d_r, rel_cache)
    grads.update(model.encode_backward(d_q + d_p, enc_cache))
    return losses, grads, emb


def train_epoch(model: GRN, x, y, adam: Adam, pairs=None, epoch=0) -> float:
    """One sweep over the support pairs and one Adam step; returns the mean pair loss."""
    losses, grads, emb = pair_loss_and_grads(model, x, y, pairs)
    bad = np.flatnonzero(~np.isfinite(losses))
    if len(bad):
        qi, pj = pairs if pairs is not None else all_pairs(len(y))
        k = bad[0]
        raise TrainingDiverged(f"epoch {epoch}: non-finite loss {losses[k]} at pair ({qi[k]}, {pj[k]})")
    adam.step(model.params, grads)
    return float(losses.mean())


def fit(
    x,
    y,
    config: GrnConfig | None = None,
    seed: int = 0,
    max_epochs: int = 300,
    target_loss: float = 1e-3,
    lr: float = 1e-3,
    pairs_per_epoch: int | None = None,
    episode_shots: int | None = None,
) -> tuple[GRN, np.ndarray, TrainReport]:
    """Train a fresh GRN on a support set ``(x, y)``.

    Stops once the mean pair loss drops below ``target_loss`` or after
    ``max_epochs``. Two seeded options bound the cost of large supports:
    ``episode_shots`` trains each epoch on that many trials per class drawn
    from the support, and ``pairs_per_epoch`` keeps a random subset of the
    ordered pairs. Afterwards the batch-norm statistics are frozen from the
    whole support set and the prototypes are recomputed in eval mode.
    """
    config = config or GrnConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n_shots = len(y) // config.n_classes
    if episode_shots is not None and not 1 <= episode_shots <= n_shots:
        raise ProtocolError(f"episode_shots must be in [1, {n_shots}], got {episode_shots}")
    episodic = episode_shots is not None and episode_shots < n_shots
    n_ep = episode_shots * config.n_classes if episodic else len(y)
    model = GRN(config, seed=seed)
    adam = Adam(lr=lr)
    rng = np.random.default_rng([seed, 1])
    report = TrainReport(seed=seed, n_shots=n_shots, pairs_per_epoch=min(pairs_per_epoch or n_ep**2, n_ep**2))
    t0 = time.perf_counter()
    above = 0
    for epoch in range(max_epochs):
        xe, ye = x, y
        if episodic:
            rows = sample_support(y, episode_shots, rng, config.n_classes).flat
            xe, ye = x[rows], y[rows]
        pairs = None
        if pairs_per_epoch and pairs_per_epoch < n_ep**2:
            flat = np.sort(rng.choice(n_ep**2, size=pairs_per_epoch, replace=False))
            pairs = (flat // n_ep, flat % n_ep)
        loss = train_epoch(model, xe, ye, adam, pairs, epoch)
        report.losses.append(loss)
        report.epochs = epoch + 1
        above = above + 1 if loss > 10 * report.losses[0] else 0
        if above >= 20:
            report.stopped = "diverged"
            report.wall_time_s = time.perf_counter() - t0
            raise TrainingDiverged(f"loss above 10x its initial value for 20 epochs (epoch {epoch})", report)
        if loss < target_loss:
            report.stopped = "target"
            break
    else:
        report.stopped = "max_epochs"
    report.wall_time_s = time.perf_counter() - t0
    model.freeze_statistics(x, y)
    prototypes = compute_prototypes(model.encode(x, "eval"), y, config.n_classes)
    return model, prototypes, report
