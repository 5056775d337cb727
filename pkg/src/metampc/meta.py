"""MAML pre-training of the sequence model.

Weights may be stacked along a member axis; every member then runs the same
procedure on the same task stream, which is how an ensemble is meta-trained
from several initialisations at once.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import seqmodel
from .seqmodel import ModelConfig, ModelWeights
from .tasks import FourierActionSpec, GeneratorConfig, ParamRanges, TaskDataset, generate_tasks

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class MetaConfig:
    K_inner: int = 3
    alpha: float = 1e-2
    beta: float = 0.1
    tasks_per_batch: int = 8
    episodes: int = 2000
    support_fraction: float = 0.5
    second_order: bool = False
    clip_norm: float = 10.0
    # Episodes from this index on use the exact second-order gradient.
    second_order_from: int | None = None

    def __post_init__(self):
        if self.K_inner < 0:
            raise ValueError("K_inner must be >= 0")
        if self.alpha <= 0 or self.beta < 0:
            raise ValueError("alpha must be > 0 and beta >= 0")
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError("support_fraction must lie in (0, 1)")
        if self.tasks_per_batch < 1:
            raise ValueError("tasks_per_batch must be >= 1")
        if self.second_order_from is not None and self.second_order_from < 0:
            raise ValueError("second_order_from must be >= 0")

    def for_episode(self, episode: int) -> "MetaConfig":
        """The configuration in force at ``episode``."""
        if self.second_order_from is not None and episode >= self.second_order_from:
            return dataclasses.replace(self, second_order=True)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetaConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


class MetaTrainingError(FloatingPointError):
    pass


def _support(task: TaskDataset, fraction: float):
    (xs, ys), _ = task.split(fraction)
    if len(xs) == 0:
        raise ValueError("task has an empty support split")
    return xs, ys


def inner_adapt(theta: ModelWeights, task: TaskDataset, K_inner: int, alpha: float,
                support_fraction: float = 0.5) -> ModelWeights:
    """``K_inner`` plain gradient steps on the task's support split."""
    xs, ys = _support(task, support_fraction)
    weights = theta
    for _ in range(K_inner):
        _, g = seqmodel.loss_and_grad(weights, xs, ys)
        weights = weights.axpy(-alpha, g)
    return weights


def clip_by_norm(grad: ModelWeights, max_norm: float) -> ModelWeights:
    """Scale each member's gradient so its global norm is at most ``max_norm``."""
    norm = grad.norm()
    scale = np.minimum(1.0, max_norm / np.maximum(norm, 1e-300))
    return grad.map(lambda a: a * _expand(scale, a))


def _expand(values, like):
    values = np.asarray(values)
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def _first_order(theta: ModelWeights, tasks: Sequence[TaskDataset], config: MetaConfig):
    if config.K_inner == 0:
        # No adaptation: the meta-loss is the plain loss on the pooled data.
        xs = np.concatenate([t.windows for t in tasks])
        ys = np.concatenate([t.targets for t in tasks])
        return seqmodel.loss_and_grad(theta, xs, ys)
    total_loss, total_grad = 0.0, seqmodel.zeros_like(theta)
    for task in tasks:
        adapted = inner_adapt(theta, task, config.K_inner, config.alpha, config.support_fraction)
        _, (xq, yq) = task.split(config.support_fraction)
        value, g = seqmodel.loss_and_grad(adapted, xq, yq)
        total_loss = total_loss + value
        total_grad = total_grad.axpy(1.0, g)
    count = len(tasks)
    return total_loss / count, total_grad.map(lambda a: a / count)


def _tensor_loss(params, config, windows, targets):
    y = seqmodel.forward_tensor(params, config, windows)
    r = y - targets
    return (r * r).mean()


def second_order_meta_loss(theta: ModelWeights, tasks: Sequence[TaskDataset], config: MetaConfig,
                           with_grad: bool = True):
    """Meta-loss differentiated through the inner updates (single model only)."""
    if theta.members is not None:
        raise ValueError("second-order meta-gradients are computed per member; pass unstacked weights")
    names = seqmodel.PARAM_NAMES
    leaves = {k: ad.leaf(theta.params[k]) for k in names}
    total = None
    for task in tasks:
        params = dict(leaves)
        if config.K_inner == 0:
            xq, yq = task.windows, task.targets
        else:
            xs, ys = _support(task, config.support_fraction)
            _, (xq, yq) = task.split(config.support_fraction)
            for _ in range(config.K_inner):
                inner = _tensor_loss(params, theta.config, xs, ys)
                grads = ad.grad(inner, [params[k] for k in names], create_graph=True)
                params = {k: params[k] - config.alpha * g for k, g in zip(names, grads)}
        query = _tensor_loss(params, theta.config, xq, yq)
        total = query if total is None else total + query
    total = total * (1.0 / len(tasks))
    if not with_grad:
        return float(total.data)
    grads = ad.grad(total, [leaves[k] for k in names])
    return float(total.data), ModelWeights({k: g.data for k, g in zip(names, grads)}, theta.config)


def meta_gradient(theta: ModelWeights, tasks: Sequence[TaskDataset], config: MetaConfig):
    """Return ``(meta_loss, meta_gradient)`` for a batch of tasks."""
    if not tasks:
        raise ValueError("meta batch is empty")
    if not config.second_order:
        return _first_order(theta, tasks, config)
    if theta.members is None:
        return second_order_meta_loss(theta, tasks, config)
    results = [second_order_meta_loss(theta.member(i), tasks, config) for i in range(theta.members)]
    return (np.array([r[0] for r in results]),
            ModelWeights.stack([r[1] for r in results]))


def meta_step(theta: ModelWeights, tasks: Sequence[TaskDataset], config: MetaConfig) -> ModelWeights:
    _, g = meta_gradient(theta, tasks, config)
    return theta.axpy(-config.beta, clip_by_norm(g, config.clip_norm))


# task sources ----------------------------------------------------------------

class OnlineTaskSource:
    """Fresh tasks per episode; task ``i`` always comes from the same stream."""

    def __init__(self, ranges: ParamRanges, spec: FourierActionSpec, config: GeneratorConfig, seed: int):
        self.ranges, self.spec, self.config, self.seed = ranges, spec, config, seed

    def __call__(self, episode: int, size: int) -> list[TaskDataset]:
        return generate_tasks(self.ranges, self.spec, self.config, self.seed,
                              range(episode * size, (episode + 1) * size))

    def describe(self) -> dict:
        return {"kind": "online", "seed": self.seed, "ranges": self.ranges.to_dict(),
                "generator": dataclasses.asdict(self.config),
                "actions": {k: v for k, v in dataclasses.asdict(self.spec).items() if k != "coefficients"}}


class PoolTaskSource:
    """Sample task batches (without replacement within a batch) from a fixed pool."""

    def __init__(self, tasks: Sequence[TaskDataset], seed: int):
        if not tasks:
            raise ValueError("task pool is empty")
        self.tasks, self.seed = list(tasks), seed

    def __call__(self, episode: int, size: int) -> list[TaskDataset]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, episode]))
        index = rng.choice(len(self.tasks), size=min(size, len(self.tasks)), replace=False)
        return [self.tasks[i] for i in index]

    def describe(self) -> dict:
        return {"kind": "pool", "seed": self.seed, "tasks": len(self.tasks)}


# pre-training ------------------------------------------------------------------

@dataclasses.dataclass
class PretrainResult:
    final: ModelWeights
    best: ModelWeights
    best_episode: int
    best_loss: float
    history: list = dataclasses.field(default_factory=list)  # (episode, meta_loss, wall_ms)


def pretrain(config: MetaConfig, source: Callable[[int, int], list[TaskDataset]],
             init: ModelWeights, callback: Callable | None = None) -> PretrainResult:
    """Run ``config.episodes`` meta-steps from ``init``.

    The reported meta-loss is the pre-update loss of each episode's batch,
    averaged over members.  ``best`` is the iterate with the lowest such loss.
    """
    theta = init.copy()
    best, best_loss, best_episode = theta.copy(), np.inf, -1
    history = []
    for episode in range(config.episodes):
        start = time.perf_counter()
        tasks = source(episode, config.tasks_per_batch)
        loss, g = meta_gradient(theta, tasks, config.for_episode(episode))
        value = float(np.mean(loss))
        if not np.isfinite(value) or not g.all_finite():
            for task in tasks:
                log.error("task params in failing batch: %s", task.params.to_json())
            raise MetaTrainingError(f"non-finite meta-loss at episode {episode}")
        if value < best_loss:
            best, best_loss, best_episode = theta.copy(), value, episode
        theta = theta.axpy(-config.beta, clip_by_norm(g, config.clip_norm))
        wall_ms = (time.perf_counter() - start) * 1e3
        history.append((episode, value, wall_ms))
        if callback is not None:
            callback(episode, value, theta)
    return PretrainResult(theta, best, best_episode, float(best_loss), history)


def write_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "meta_loss", "wall_ms"])
        for episode, loss, wall_ms in history:
            writer.writerow([episode, repr(float(loss)), f"{wall_ms:.3f}"])


def read_log(path) -> list[tuple[int, float, float]]:
    with open(path) as fh:
        return [(int(r["episode"]), float(r["meta_loss"]), float(r["wall_ms"])) for r in csv.DictReader(fh)]


def save_result(result: PretrainResult, out_dir, meta_config: MetaConfig, source_info: dict,
                seeds: Sequence[int] | None = None) -> None:
    """Write final and best checkpoints (as ensemble directories) plus the CSV log."""
    from .ensemble import Ensemble  # local import: ensemble depends on this module's outputs only

    os.makedirs(out_dir, exist_ok=True)
    extra = {"meta_config": meta_config.to_dict(), "source": source_info}
    for name, weights in (("final", result.final), ("best", result.best)):
        Ensemble.from_weights(weights, seeds=seeds).save(os.path.join(out_dir, name), extra=extra)
    write_log(os.path.join(out_dir, "train_log.csv"), result.history)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump({"best_episode": result.best_episode, "best_loss": result.best_loss,
                   "final_loss": result.history[-1][1] if result.history else None},
                  fh, indent=2, sort_keys=True)


def init_ensemble_weights(model_config: ModelConfig, seeds: Sequence[int]) -> ModelWeights:
    """Independent initialisations, one per seed, stacked on the member axis."""
    return ModelWeights.stack([seqmodel.init_weights(model_config, np.random.default_rng(s)) for s in seeds])
