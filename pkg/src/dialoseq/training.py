"""Optimization engine: weighted task sampling, inverse-sqrt schedule, Adam,
early stopping on mean validation perplexity, and the four regimes
(single-task, multi-task, multi-task-then-fine-tune, leave-one-out).

Batches are homogeneous: every batch is drawn from a single task, sampled
with probability proportional to its weight. Early stopping counts
consecutive non-improving evaluations and stops once the count reaches
`patience`; the returned checkpoint is always the best one ever observed.

The step log is a CSV with columns (step, task, lr, loss, grad_norm); audit
tests key on the task column.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import bpe, kernels
from . import model as model_mod
from . import tensor as T
from .corpus import ImageFeatureStore, TaskSpec, flatten_task, load_episodes
from .errors import ConfigError, NumericError
from .model import ModelConfig, TransformerSeq2Seq
from .tensor import Tensor

REGIMES = ("single", "mt", "mt_ft", "loo")

ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    warmup_steps: int = 100
    max_steps: int = 2000
    batch_size: int = 32
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 200
    patience: int = 3
    regime: str = "single"
    task_weights: dict[str, float] = field(default_factory=dict)
    fine_tune_task: str | None = None
    held_out_task: str | None = None

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got '{self.regime}'")
        if any(w < 0 for w in self.task_weights.values()):
            raise ConfigError("task weights must be non-negative")


@dataclass
class TaskData:
    spec: TaskSpec
    train: list
    valid: list


def prepare_tasks(
    registry: dict[str, TaskSpec],
    vocab: bpe.Vocabulary,
    store: ImageFeatureStore | None = None,
    truncate: int = 1024,
    use_knowledge: bool = True,
    use_image: bool = True,
) -> dict[str, TaskData]:
    """Load and flatten train/valid splits for every task in the registry."""
    tasks = {}
    for name, spec in registry.items():
        for split in ("train", "valid"):
            if split not in spec.splits:
                raise ConfigError(f"task '{name}' is missing its {split} split")
        kw = dict(store=store, truncate=truncate,
                  use_knowledge=use_knowledge, use_image=use_image)
        tasks[name] = TaskData(
            spec=spec,
            train=flatten_task(load_episodes(spec.splits["train"], spec), vocab, spec, **kw),
            valid=flatten_task(load_episodes(spec.splits["valid"], spec), vocab, spec, **kw),
        )
    return tasks


# ------------------------------------------------------------- optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int = 0):
        self.m = m
        self.v = v
        self.t = t

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS,
              clip: float | None = None) -> float:
    """One Adam update with bias correction; returns the pre-clip grad norm."""
    grads = [p.grad for p in params.values()]
    for name, p in params.items():
        if not np.isfinite(p.grad.sum()):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    norm = clip_global_norm(grads, clip or 0.0)
    state.t += 1
    for name, p in params.items():
        kernels.adam_update(p.data, p.grad, state.m[name], state.v[name],
                            lr, betas[0], betas[1], eps, state.t)
    return norm


# ------------------------------------------------------------- schedule


def lr_at(step: int, config: TrainConfig) -> float:
    """Inverse-sqrt schedule with linear warmup; peak = base_lr at warmup."""
    if step < 1:
        raise ConfigError(f"lr_at: step must be >= 1, got {step}")
    w = config.warmup_steps
    return config.base_lr * min(step / w, math.sqrt(w / step))


def sample_task(weights: dict[str, float], rng: np.random.Generator) -> str:
    active = [(name, w) for name, w in weights.items() if w > 0]
    total = sum(w for _, w in active)
    if total <= 0:
        raise ConfigError("sample_task: no task has positive weight")
    r = rng.random() * total
    acc = 0.0
    for name, w in active:
        acc += w
        if r < acc:
            return name
    return active[-1][0]


# ------------------------------------------------------------ checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    vocab_hash: str
    params: dict[str, np.ndarray]
    moments: AdamState
    step: int
    best: dict
    train_config: dict

    def build_model(self, seed: int = 0) -> TransformerSeq2Seq:
        m = TransformerSeq2Seq(self.model_config, vocab_hash=self.vocab_hash, seed=seed)
        m.set_params(self.params)
        return m

    def save(self, path, config_echo: str = ""):
        m = self.build_model()
        model_mod.save_checkpoint(
            path, m, moments={"m": self.moments.m, "v": self.moments.v},
            step=self.step,
            best=dict(self.best, optimizer_t=self.moments.t, train_config=self.train_config),
            config_echo=config_echo,
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = model_mod.load_checkpoint(path)
        best = dict(data.best or {})
        t = best.pop("optimizer_t", 0)
        train_config = best.pop("train_config", {})
        moments = (AdamState(data.moments["m"], data.moments["v"], t)
                   if data.moments else None)
        return cls(data.model_config, data.vocab_hash, data.params, moments,
                   data.step, best, train_config)


def task_ppl(model: TransformerSeq2Seq, examples: list) -> float:
    total, count = model.nll_sums(examples)
    if count == 0:
        raise ConfigError("validation split has no target tokens")
    mean = total / count
    return math.exp(mean) if mean < 700 else math.inf


# ---------------------------------------------------------- core loop


def _snapshot(model, state, step, best) -> Checkpoint:
    return Checkpoint(
        model_config=model.config, vocab_hash=model.vocab_hash,
        params=model.copy_params(), moments=state.copy(),
        step=step, best=best, train_config={},
    )


def _train_loop(tasks: dict[str, TaskData], model: TransformerSeq2Seq,
                config: TrainConfig, weights: dict[str, float],
                objective_tasks: list[str], step_log: list,
                state: AdamState | None = None,
                baseline_eval: bool = False) -> Checkpoint:
    config.validate()
    active = {n: w for n, w in weights.items() if w > 0}
    if not active:
        raise ConfigError("no active task (all weights zero or no tasks)")
    for name in active:
        if not tasks[name].train:
            raise ConfigError(f"task '{name}' has no training examples")

    rng = np.random.default_rng(config.seed)
    model.rng = np.random.default_rng(config.seed + 1)
    state = state or AdamState.for_params(model.params)

    def evaluate() -> tuple[float, dict[str, float]]:
        per_task = {n: task_ppl(model, tasks[n].valid) for n in objective_tasks}
        return sum(per_task.values()) / len(per_task), per_task

    best: Checkpoint | None = None
    best_obj = math.inf
    bad_evals = 0
    if baseline_eval:
        obj, per_task = evaluate()
        best_obj = obj
        best = _snapshot(model, state, 0, {"objective": obj, "per_task": per_task, "step": 0})

    step = 0
    try:
        for step in range(1, config.max_steps + 1):
            task = sample_task(active, rng)
            pool = tasks[task].train
            idx = rng.integers(0, len(pool), size=min(config.batch_size, len(pool)))
            batch = [pool[i] for i in idx]
            model.zero_grads()
            loss = model.batch_nll(batch, training=True)
            T.backward(loss)
            lr = lr_at(step, config)
            norm = adam_step(model.params, state, lr, clip=config.grad_clip)
            step_log.append((step, task, lr, float(loss.data), norm))

            if step % config.eval_every == 0:
                obj, per_task = evaluate()
                if obj < best_obj:
                    best_obj = obj
                    best = _snapshot(model, state, step,
                                     {"objective": obj, "per_task": per_task, "step": step})
                    bad_evals = 0
                else:
                    bad_evals += 1
                if bad_evals >= config.patience:
                    break
    except NumericError as e:
        raise NumericError(f"training diverged at step {step}: {e}") from e

    if best is None:  # max_steps below eval_every: evaluate the final state
        obj, per_task = evaluate()
        best = _snapshot(model, state, step,
                         {"objective": obj, "per_task": per_task, "step": step})
    best.train_config = asdict(config)
    return best


# ------------------------------------------------------------- regimes


def train(tasks: dict[str, TaskData], model: TransformerSeq2Seq,
          config: TrainConfig, step_log: list | None = None,
          resume: Checkpoint | None = None) -> Checkpoint:
    """Weighted multi-task training (a single task is the one-entry case).

    Early stopping tracks the mean validation PPL over all active tasks.
    Passing `resume` restores parameters and optimizer moments first; two
    resumes from the same checkpoint and seed produce identical trajectories.
    """
    weights = config.task_weights or {n: 1.0 for n in tasks}
    unknown = set(weights) - set(tasks)
    if unknown:
        raise ConfigError(f"weights refer to unknown tasks: {sorted(unknown)}")
    log = step_log if step_log is not None else []
    active_names = sorted(n for n, w in weights.items() if w > 0)
    state = None
    if resume is not None:
        model.set_params(resume.params)
        state = resume.moments.copy()
    return _train_loop(tasks, model, config, weights, active_names, log, state=state)


def fine_tune(checkpoint: Checkpoint, task: str, tasks: dict[str, TaskData],
              config: TrainConfig, vocab: bpe.Vocabulary | None = None,
              step_log: list | None = None) -> Checkpoint:
    """Continue a checkpoint on one task with fresh scheduler/optimizer state.

    The inherited model is evaluated before any step, so the result can never
    be worse than the starting point on that task's validation PPL.
    """
    if task not in tasks:
        raise ConfigError(f"fine-tune task '{task}' not in task set")
    if vocab is not None and checkpoint.vocab_hash and \
            checkpoint.vocab_hash != vocab.content_hash():
        raise ConfigError(
            "checkpoint was trained with a different vocabulary "
            f"(hash {checkpoint.vocab_hash[:12]}… != {vocab.content_hash()[:12]}…)"
        )
    if config.max_steps == 0:
        return checkpoint
    model = checkpoint.build_model(seed=config.seed)
    log = step_log if step_log is not None else []
    return _train_loop(tasks, model, config, {task: 1.0}, [task], log,
                       baseline_eval=True)


@dataclass
class LeaveOneOutResult:
    checkpoint: Checkpoint
    held_out_task: str
    held_out_ppl: float


def leave_one_out(tasks: dict[str, TaskData], held_out: str,
                  model: TransformerSeq2Seq, config: TrainConfig,
                  step_log: list | None = None) -> LeaveOneOutResult:
    """Multi-task training on everything except held_out; zero-shot eval on it."""
    if held_out not in tasks:
        raise ConfigError(f"held-out task '{held_out}' not in task set")
    weights = {n: config.task_weights.get(n, 1.0) for n in tasks if n != held_out}
    if not weights:
        raise ConfigError("leave-one-out needs at least one remaining task to train on")
    log = step_log if step_log is not None else []
    cfg = replace(config, task_weights=weights)
    ck = _train_loop(tasks, model, cfg, weights, sorted(weights), log)
    leaked = [row for row in log if row[1] == held_out]
    assert not leaked, f"held-out task '{held_out}' appeared in {len(leaked)} training batches"
    best_model = ck.build_model()
    ppl = task_ppl(best_model, tasks[held_out].valid)
    return LeaveOneOutResult(checkpoint=ck, held_out_task=held_out, held_out_ppl=ppl)


def write_step_log(path, rows: list):
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,task,lr,loss,grad_norm\n")
        for step, task, lr, loss, norm in rows:
            f.write(f"{step},{task},{lr:.8g},{loss:.8g},{norm:.8g}\n")


def read_step_log(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "step,task,lr,loss,grad_norm":
            raise ConfigError(f"{path}: unexpected step-log header: {header}")
        for line in f:
            step, task, lr, loss, norm = line.strip().split(",")
            rows.append((int(step), task, float(lr), float(loss), float(norm)))
    return rows
