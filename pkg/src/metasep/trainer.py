"""Joint, MAML, and FOMAML training loops plus one-shot adaptation.

The meta objective is the sum over a task batch of each task's query loss
evaluated at parameters adapted by exactly one inner gradient step on that
task's support mixture. MAML differentiates through the adaptation (the
adapted parameters stay graph expressions of the initialization), FOMAML
severs that dependence by re-leafing the adapted values, and joint training
skips adaptation entirely, pooling support and query mixtures as ordinary
supervised data.

Anything with ``support_loss`` / ``query_loss`` methods over parameter
tensors can be trained; separation tasks are one such adapter, and the test
suite uses scalar quadratic tasks to pin the meta-gradient algebra against
closed forms.
"""

from __future__ import annotations

import json
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from . import taskgen
from .autodiff import ParamVector, Tensor
from .model import SeparatorConfig

MODES = ("joint", "maml", "fomaml")


class TrainingDiverged(RuntimeError):
    pass


class TaskLoss(Protocol):
    def support_loss(self, params: Mapping[str, Tensor]) -> Tensor: ...

    def query_loss(self, params: Mapping[str, Tensor]) -> Tensor: ...


@dataclass
class TrainConfig:
    mode: str = "fomaml"
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    epochs: int = 100
    meta_batch: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    noise: bool = False
    seed: int = 0
    outer_optimizer: str = "adam"   # "sgd" keeps the outer update linear in the
                                    # gradient for finite-difference checks
    dev_eval_tasks: int = 8         # cap on dev tasks scored per epoch

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "joint" and self.inner_lr <= 0:
            raise ValueError("meta modes need a positive inner learning rate")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown outer optimizer {self.outer_optimizer!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), step=0)


def adam_update(theta: ParamVector, grad_vec: ParamVector, state: AdamState,
                lr: float, weight_decay: float = 0.0, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> tuple[ParamVector, AdamState]:
    """Bias-corrected Adam with weight decay decoupled from the moments."""
    g = grad_vec.values
    if not np.all(np.isfinite(g)):
        raise TrainingDiverged("non-finite gradient passed to the optimizer")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new_values = theta.values - lr * m_hat / (np.sqrt(v_hat) + eps) \
        - lr * weight_decay * theta.values
    return theta.replace(new_values), AdamState(m=m, v=v, step=step)


def sgd_update(theta: ParamVector, grad_vec: ParamVector, lr: float,
               weight_decay: float = 0.0) -> ParamVector:
    if not np.all(np.isfinite(grad_vec.values)):
        raise TrainingDiverged("non-finite gradient passed to the optimizer")
    return theta.replace(theta.values - lr * grad_vec.values
                         - lr * weight_decay * theta.values)


# ---------------------------------------------------------------------------
# separation tasks as trainable losses


class SeparationTask:
    """Loss adapter over one meta task: uPIT losses of the separator."""

    def __init__(self, task: taskgen.MetaTask, config: SeparatorConfig,
                 noisy: bool = False):
        self.task = task
        self.config = config
        self.name = f"{task.accent}/{'+'.join(task.speakers)}"
        self._support = task.support_pair(noisy=noisy)
        self._queries = task.query_pairs(noisy=noisy)

    def support_loss(self, params: Mapping[str, Tensor]) -> Tensor:
        return model_mod.mixture_loss_tensors(self._support, params, self.config)

    def query_loss(self, params: Mapping[str, Tensor]) -> Tensor:
        terms = [model_mod.mixture_loss_tensors(q, params, self.config)
                 for q in self._queries]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scalar_mul(1.0 / len(terms), total)

    def pooled_loss(self, params: Mapping[str, Tensor]) -> Tensor:
        """Mean uPIT loss over support and query mixtures together."""
        pairs = [self._support] + self._queries
        terms = [model_mod.mixture_loss_tensors(p, params, self.config) for p in pairs]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scalar_mul(1.0 / len(terms), total)

    def query_si_snri(self, params: ParamVector) -> float:
        vals = [model_mod.evaluate_si_snri(q, params, self.config) for q in self._queries]
        return float(np.mean(vals))

    def support_loss_value(self, params: ParamVector) -> float:
        with ad.no_grad():
            return self.support_loss(_const_tensors(params)).item()


def _const_tensors(theta: ParamVector) -> "OrderedDict[str, Tensor]":
    return OrderedDict((n, ad.tensor(theta.view(n))) for n in theta.names())


def _task_name(task) -> str:
    return getattr(task, "name", task.__class__.__name__)


def _check_finite(loss: Tensor, task, phase: str) -> None:
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"{phase} loss is non-finite for task {_task_name(task)}")


# ---------------------------------------------------------------------------
# inner loop and meta gradients


@dataclass
class AdaptedParams:
    """One-step-adapted parameters plus the leaves they were derived from."""

    prime: "OrderedDict[str, Tensor]"
    leaves: "OrderedDict[str, Tensor]"
    support_loss: float

    def to_vector(self, like: ParamVector) -> ParamVector:
        return like.flatten_named({n: t.data for n, t in self.prime.items()})


def inner_adapt(theta: ParamVector, task: TaskLoss, alpha: float,
                create_graph: bool = True) -> AdaptedParams:
    """One support gradient step; the result stays differentiable in theta
    when create_graph is set (the second-order path), and is re-leafed
    otherwise (the first-order path)."""
    leaves = theta.to_leaves()
    loss = task.support_loss(leaves)
    _check_finite(loss, task, "support")
    grads = ad.grad(loss, list(leaves.values()), create_graph=create_graph)
    if create_graph:
        prime = OrderedDict(
            (n, ad.sub(leaf, ad.scalar_mul(alpha, g)))
            for (n, leaf), g in zip(leaves.items(), grads))
    else:
        prime = OrderedDict(
            (n, ad.tensor(leaf.data - alpha * g.data, requires_grad=True))
            for (n, leaf), g in zip(leaves.items(), grads))
    return AdaptedParams(prime=prime, leaves=leaves, support_loss=loss.item())


def _meta_task_gradient(theta: ParamVector, task: TaskLoss, alpha: float,
                        second_order: bool) -> tuple[np.ndarray, float]:
    adapted = inner_adapt(theta, task, alpha, create_graph=second_order)
    q_loss = task.query_loss(adapted.prime)
    _check_finite(q_loss, task, "query")
    wrt = adapted.leaves if second_order else adapted.prime
    grads = ad.grad(q_loss, list(wrt.values()))
    flat = theta.flatten_named({n: g.data for n, g in zip(wrt, grads)})
    return flat.values, q_loss.item()


def meta_gradient_maml(theta: ParamVector, tasks: Sequence[TaskLoss],
                       alpha: float) -> ParamVector:
    """Exact gradient of the summed query losses through each adaptation."""
    total = np.zeros_like(theta.values)
    for task in tasks:
        g, _ = _meta_task_gradient(theta, task, alpha, second_order=True)
        total += g
    return theta.replace(total)


def meta_gradient_fomaml(theta: ParamVector, tasks: Sequence[TaskLoss],
                         alpha: float) -> ParamVector:
    """Query gradients at the adapted parameters, adaptation treated as
    constant in theta."""
    total = np.zeros_like(theta.values)
    for task in tasks:
        g, _ = _meta_task_gradient(theta, task, alpha, second_order=False)
        total += g
    return theta.replace(total)


def query_pool_gradient(theta: ParamVector, tasks: Sequence[TaskLoss]) -> ParamVector:
    """Sum over tasks of the query-loss gradient at theta, no adaptation."""
    total = np.zeros_like(theta.values)
    for task in tasks:
        leaves = theta.to_leaves()
        loss = task.query_loss(leaves)
        _check_finite(loss, task, "query")
        grads = ad.grad(loss, list(leaves.values()))
        total += theta.flatten_named({n: g.data for n, g in zip(leaves, grads)}).values
    return theta.replace(total)


def _joint_gradient(theta: ParamVector, tasks: Sequence["SeparationTask"]) -> tuple[np.ndarray, float]:
    total = np.zeros_like(theta.values)
    losses = []
    for task in tasks:
        leaves = theta.to_leaves()
        loss = task.pooled_loss(leaves)
        _check_finite(loss, task, "pooled")
        grads = ad.grad(loss, list(leaves.values()))
        total += theta.flatten_named({n: g.data for n, g in zip(leaves, grads)}).values
        losses.append(loss.item())
    return total, float(np.mean(losses))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ParamVector
    log: list[dict] = field(default_factory=list)
    aborted: bool = False
    reason: str | None = None
    checkpoint_path: Path | None = None


def train(task_sets: Sequence[taskgen.AccentTaskSet], train_config: TrainConfig,
          model_config: SeparatorConfig, dev_sets: Sequence[taskgen.AccentTaskSet] = (),
          out_dir=None, init: ParamVector | None = None) -> TrainResult:
    """Run the configured mode over the training task sets.

    One epoch is ceil(total tasks / meta_batch) sampled batches for every
    mode. Divergence aborts with the last finite parameters. When out_dir is
    given, the checkpoint and a JSON-lines log are written there.
    """
    if not task_sets or not any(ts.tq for ts in task_sets):
        raise ValueError("training needs at least one task")
    cfg = train_config
    theta = init if init is not None else model_mod.init_params(model_config, cfg.seed)
    state = AdamState.zeros(theta.dim)
    total_tasks = sum(ts.tq for ts in task_sets)
    batches_per_epoch = math.ceil(total_tasks / cfg.meta_batch)
    adapters: dict[int, SeparationTask] = {}

    def adapter(task: taskgen.MetaTask) -> SeparationTask:
        key = id(task)
        if key not in adapters:
            adapters[key] = SeparationTask(task, model_config, noisy=cfg.noise)
        return adapters[key]

    dev_tasks = [t for ts in dev_sets for t in ts.tasks][:cfg.dev_eval_tasks]

    log: list[dict] = []
    result = TrainResult(params=theta, log=log)
    for epoch in range(cfg.epochs):
        t_start = time.perf_counter()
        epoch_losses = []
        for b in range(batches_per_epoch):
            batch_seed = int(taskgen._child_rng(cfg.seed, "epoch", epoch, "batch", b)
                             .integers(2 ** 62))
            batch = taskgen.sample_task_batch(
                task_sets, min(cfg.meta_batch, total_tasks), seed=batch_seed)
            tasks = [adapter(t) for t in batch]
            try:
                if cfg.mode == "joint":
                    grad_vals, batch_loss = _joint_gradient(theta, tasks)
                else:
                    second = cfg.mode == "maml"
                    grad_vals = np.zeros_like(theta.values)
                    q_losses = []
                    for task in tasks:
                        g, ql = _meta_task_gradient(theta, task, cfg.inner_lr,
                                                    second_order=second)
                        grad_vals += g
                        q_losses.append(ql)
                    batch_loss = float(np.mean(q_losses))
                grad_vec = theta.replace(grad_vals)
                if cfg.outer_optimizer == "adam":
                    theta, state = adam_update(theta, grad_vec, state, cfg.outer_lr,
                                               cfg.weight_decay, cfg.adam_beta1,
                                               cfg.adam_beta2, cfg.adam_eps)
                else:
                    theta = sgd_update(theta, grad_vec, cfg.outer_lr, cfg.weight_decay)
            except TrainingDiverged as err:
                result.aborted = True
                result.reason = f"epoch {epoch} batch {b}: {err}"
                result.params = theta
                _write_outputs(result, cfg, model_config, task_sets, out_dir)
                return result
            epoch_losses.append(batch_loss)

        dev_score = None
        if dev_tasks:
            dev_score = float(np.mean([adapter(t).query_si_snri(theta)
                                       for t in dev_tasks]))
        log.append({
            "epoch": epoch,
            "mode": cfg.mode,
            "train_loss": float(np.mean(epoch_losses)),
            "dev_si_snri": dev_score,
            "wall_seconds": time.perf_counter() - t_start,
        })
        result.params = theta

    _write_outputs(result, cfg, model_config, task_sets, out_dir)
    return result


def _write_outputs(result: TrainResult, cfg: TrainConfig,
                   model_config: SeparatorConfig,
                   task_sets, out_dir) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {
        "mode": cfg.mode,
        "train_config": cfg.to_dict(),
        "train_accents": sorted(ts.accent for ts in task_sets),
        "config_hash": model_mod.config_hash(model_config, cfg.to_dict()),
        "aborted": result.aborted,
    }
    ckpt = out_dir / "checkpoint.msep"
    model_mod.save_checkpoint(ckpt, result.params, model_config, extra)
    result.checkpoint_path = ckpt
    with open(out_dir / "train_log.jsonl", "w") as f:
        for row in result.log:
            f.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# one-shot adaptation (meta testing inner step)


@dataclass
class AdaptResult:
    adapted: ParamVector
    support_loss_pre: float
    support_loss_post: float
    query_si_snri_pre: float
    query_si_snri_post: float


def finetune_adapt(theta: ParamVector, task: taskgen.MetaTask, beta_ft: float,
                   model_config: SeparatorConfig, noisy: bool = False) -> AdaptResult:
    """One plain gradient step on the support mixture, scored on the queries."""
    sep = SeparationTask(task, model_config, noisy=noisy)
    pre_snri = sep.query_si_snri(theta)
    adapted_expr = inner_adapt(theta, sep, beta_ft, create_graph=False)
    adapted = adapted_expr.to_vector(theta)
    return AdaptResult(
        adapted=adapted,
        support_loss_pre=adapted_expr.support_loss,
        support_loss_post=sep.support_loss_value(adapted),
        query_si_snri_pre=pre_snri,
        query_si_snri_post=sep.query_si_snri(adapted),
    )
