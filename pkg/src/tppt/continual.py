"""Class-incremental training: task splits, exemplar replay, and the task loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from tppt import autodiff as ad
from tppt.encoders import DualEncoder
from tppt.errors import ContractError, NumericalError
from tppt.evaluation import MetricsLog, class_means, pairwise_diversity, representation_drift
from tppt.objectives import PrototypeSet, composite_loss
from tppt.prompt_pool import PromptPool, expand_for_task, make_pool
from tppt.synthdata import SynthDataset

log = logging.getLogger(__name__)

MODES = ("tppt-v", "tppt-vt", "ce-only", "zero-shot", "joint")


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 64
    epochs: int = 10
    lr: float = 0.1
    momentum: float = 0.9
    length_v: int = 4
    length_t: int = 4
    depth_v: int = 12
    depth_t: int = 12
    prompts_per_task: int = 10
    exemplars_per_class: int = 20
    alpha: float = 1.0
    tau: float = 0.07
    n_tasks: int = 10
    affinity_bias_init: float = 0.0
    clip_norm: float | None = 0.3

    def validate(self) -> None:
        for name in ("batch_size", "epochs", "length_v", "length_t", "depth_v", "depth_t",
                     "prompts_per_task", "exemplars_per_class", "n_tasks"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be at least 1")
        if self.lr <= 0 or self.tau <= 0:
            raise ContractError("lr and tau must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Task:
    task_id: int
    classes: list[int]
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    class_order: list[int]
    seed: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


def split_tasks(dataset: SynthDataset, n_tasks: int, seed: int) -> TaskStream:
    """Permute the classes with ``seed`` and cut them into equal contiguous groups."""
    C = dataset.n_classes
    if n_tasks < 1 or C % n_tasks:
        raise ContractError(f"{C} classes cannot be split into {n_tasks} equal tasks")
    order = np.random.default_rng([seed, 11]).permutation(C)
    tasks = []
    for t, group in enumerate(order.reshape(n_tasks, -1)):
        classes = [int(c) for c in group]
        tasks.append(Task(t, classes,
                          np.flatnonzero(np.isin(dataset.train.labels, classes)),
                          np.flatnonzero(np.isin(dataset.test.labels, classes))))
    return TaskStream(tasks, [int(c) for c in order], seed)


def select_exemplars(features: np.ndarray, k: int) -> np.ndarray:
    """Greedy herding without replacement; returns positions into ``features``.

    Each step adds the candidate whose inclusion brings the running mean of the
    chosen set closest to the class mean.  Ties go to the lowest index.
    """
    feats = np.asarray(features, dtype=np.float64)
    if k < 1:
        raise ContractError("k must be at least 1")
    n = len(feats)
    if n == 0:
        raise ContractError("cannot select exemplars from an empty class")
    mu = feats.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    for step in range(min(k, n)):
        cand = (running[None, :] + feats) / (step + 1)
        dist = np.linalg.norm(mu[None, :] - cand, axis=1)
        dist[~available] = np.inf
        j = int(np.argmin(dist))
        chosen.append(j)
        available[j] = False
        running += feats[j]
    return np.array(chosen, dtype=np.int64)


@dataclass
class ReplayBuffer:
    """Up to ``k`` stored training examples (as indices into the train split) per class."""

    k: int
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, class_id: int, indices: np.ndarray) -> None:
        if class_id in self.exemplars:
            raise ContractError(f"class {class_id} already has exemplars")
        if len(indices) > self.k:
            raise ContractError(f"{len(indices)} exemplars exceed the per-class budget {self.k}")
        self.exemplars[int(class_id)] = np.asarray(indices, dtype=np.int64)

    @property
    def classes(self) -> list[int]:
        return list(self.exemplars)

    def indices(self) -> np.ndarray:
        if not self.exemplars:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(list(self.exemplars.values()))

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())


@dataclass
class TrainState:
    encoder: DualEncoder
    dataset: SynthDataset
    mode: str
    hp: Hyperparams
    seed: int
    pool: PromptPool | None = None
    next_task: int = 0
    train_query: np.ndarray | None = None
    test_query: np.ndarray | None = None
    template_protos: np.ndarray | None = None
    optimizer: ad.OptimizerState | None = None
    classes: list[int] = field(default_factory=list)
    loss_curve: list[dict] = field(default_factory=list)

    @property
    def objective(self) -> str:
        return "tppt-vt" if self.mode == "tppt-vt" else "tppt-v"

    @property
    def use_tpcl(self) -> bool:
        return self.mode != "ce-only"

    @property
    def seen_classes(self) -> list[int]:
        return list(self.classes)

    def prototypes(self, classes) -> PrototypeSet:
        classes = [int(c) for c in classes]
        if self.mode == "tppt-vt":
            w = self.encoder.encode_text(self.dataset.texts[classes],
                                         self.pool.text.layer_prompts(classes))
            return PrototypeSet(np.array(classes), w)
        return PrototypeSet(np.array(classes), ad.Tensor(self.template_protos[classes]))

    def embed(self, images: np.ndarray, query: np.ndarray) -> ad.Tensor:
        if self.pool is None:
            return self.encoder.encode_image(images)
        prompts, _ = self.pool.instance_prompts(query)
        return self.encoder.encode_image(images, prompts)


def init_state(encoder: DualEncoder, dataset: SynthDataset, mode: str, hp: Hyperparams,
               seed: int) -> TrainState:
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if not encoder.frozen:
        raise ContractError("continual learning needs a frozen encoder")
    hp.validate()
    depth = encoder.cfg.depth
    state = TrainState(encoder, dataset, mode, hp, seed)
    state.train_query = encoder.query_features(dataset.train.images)
    state.test_query = encoder.query_features(dataset.test.images)
    with ad.no_grad():
        state.template_protos = encoder.encode_text(dataset.texts).data
    if mode != "zero-shot":
        state.pool = make_pool(min(hp.depth_v, depth), hp.length_v, encoder.cfg.model_dim,
                               depth_t=min(hp.depth_t, depth), length_t=hp.length_t,
                               with_text=(mode == "tppt-vt"), bias_init=hp.affinity_bias_init)
    else:
        state.pool = None
    return state


def train_task(state: TrainState, task: Task, buffer: ReplayBuffer) -> tuple[TrainState, ReplayBuffer]:
    """Expand prompts for ``task``, train on task data plus replay, then add exemplars."""
    hp, ds = state.hp, state.dataset
    if task.task_id != state.next_task:
        raise ContractError(f"task {task.task_id} out of order; expected {state.next_task}")
    if set(task.classes) & set(state.classes):
        raise ContractError(f"task {task.task_id} repeats already seen classes")
    state.classes.extend(int(c) for c in task.classes)
    if state.pool is not None:
        expand_for_task(state.pool, task.task_id, task.classes, hp.prompts_per_task, state.seed)
        _fit(state, task, buffer)
    for c in task.classes:
        members = task.train_idx[ds.train.labels[task.train_idx] == c]
        chosen = select_exemplars(state.train_query[members], hp.exemplars_per_class)
        buffer.add(c, members[chosen])
    state.next_task += 1
    return state, buffer


def _fit(state: TrainState, task: Task, buffer: ReplayBuffer) -> None:
    hp, ds, enc = state.hp, state.dataset, state.encoder
    seen = state.seen_classes
    idx = np.concatenate([task.train_idx, buffer.indices()])
    n = len(idx)
    per_epoch = math.ceil(n / hp.batch_size)
    params = state.pool.trainable()
    state.optimizer = ad.make_optimizer(params, hp.lr, hp.epochs * per_epoch, hp.momentum,
                                           clip_norm=hp.clip_norm)
    rng = np.random.default_rng([state.seed, task.task_id, 3])
    fixed = None if state.mode == "tppt-vt" else state.prototypes(seen)
    for epoch in range(hp.epochs):
        order = idx[rng.permutation(n)]
        for s in range(0, n, hp.batch_size):
            batch = order[s:s + hp.batch_size]
            for p in params:
                p.grad = None
            z = state.embed(ds.train.images[batch], state.train_query[batch])
            protos = fixed if fixed is not None else state.prototypes(seen)
            br = composite_loss(state.objective, z, protos, ds.train.labels[batch],
                                alpha=hp.alpha, tau=hp.tau, use_tpcl=state.use_tpcl)
            if not np.isfinite(br.total.data).all():
                raise NumericalError(f"non-finite loss at task {task.task_id}, epoch {epoch}, "
                                     f"step {state.optimizer.step}: {br.as_dict()}")
            br.total.backward()
            ad.sgd_step(params, [p.grad for p in params], state.optimizer)
            state.loss_curve.append({"task": task.task_id, "epoch": epoch,
                                     "step": state.optimizer.step, **br.as_dict()})
    for p in params:
        p.grad = None


def evaluate_stage(state: TrainState, stream: TaskStream, stage: int,
                   batch_size: int = 256) -> tuple[list[float], float, dict[int, np.ndarray]]:
    """Per-task accuracies, pooled accuracy, and class means after ``stage``."""
    ds = state.dataset
    seen = state.seen_classes
    test_idx = np.concatenate([stream.tasks[t].test_idx for t in range(stage + 1)])
    with ad.no_grad():
        w = state.prototypes(seen).matrix.data
        emb = np.concatenate([
            state.embed(ds.test.images[test_idx[i:i + batch_size]],
                        state.test_query[test_idx[i:i + batch_size]]).data
            for i in range(0, len(test_idx), batch_size)])
    pred = np.asarray(seen)[np.argmax(emb @ w.T, axis=1)]
    labels = ds.test.labels[test_idx]
    correct = pred == labels
    row = []
    for t in range(stage + 1):
        mask = np.isin(labels, stream.tasks[t].classes)
        row.append(float(correct[mask].mean()))
    return row, float(correct.mean()), class_means(emb, labels, seen)


def task_train_accuracy(state: TrainState, task: Task, batch_size: int = 256) -> tuple[float, float]:
    """Training-set accuracy on ``task`` among seen classes: prompted vs. zero-shot."""
    ds = state.dataset
    idx = task.train_idx
    seen = np.asarray(state.seen_classes)
    with ad.no_grad():
        w = state.prototypes(seen).matrix.data
        emb = np.concatenate([
            state.embed(ds.train.images[idx[i:i + batch_size]], state.train_query[idx[i:i + batch_size]]).data
            for i in range(0, len(idx), batch_size)])
    labels = ds.train.labels[idx]
    prompted = float((seen[np.argmax(emb @ w.T, axis=1)] == labels).mean())
    plain = state.train_query[idx] @ state.template_protos[seen].T
    zero_shot = float((seen[np.argmax(plain, axis=1)] == labels).mean())
    return prompted, zero_shot


def run_stream(encoder: DualEncoder, dataset: SynthDataset, mode: str, hp: Hyperparams,
               seed: int, config_echo: dict | None = None) -> tuple[MetricsLog, TrainState, ReplayBuffer]:
    """Train through every task, evaluating on all seen test data after each one."""
    if mode == "joint":
        hp = Hyperparams(**{**hp.to_dict(), "n_tasks": 1})
    state = init_state(encoder, dataset, mode, hp, seed)
    stream = split_tasks(dataset, hp.n_tasks, seed)
    buffer = ReplayBuffer(hp.exemplars_per_class)
    mlog = MetricsLog(seed=seed, mode=mode, config=config_echo or {"hyperparams": hp.to_dict()})
    mlog.task_classes = [list(t.classes) for t in stream]
    previous = None
    for task in stream:
        train_task(state, task, buffer)
        row, acc, means = evaluate_stage(state, stream, task.task_id)
        drift = representation_drift(means, previous) if previous is not None else None
        div = pairwise_diversity(means) if len(means) >= 2 else None
        mlog.add_stage(row, acc, drift, div)
        if task.task_id == 0 and state.pool is not None:
            prompted, zero_shot = task_train_accuracy(state, task)
            mlog.extra["task1_train_accuracy"] = prompted
            mlog.extra["task1_zero_shot_train_accuracy"] = zero_shot
        log.info("seed %d %s task %d: acc %.4f drift %s diversity %s", seed, mode, task.task_id + 1,
                 acc, "-" if drift is None else f"{drift:.4f}", "-" if div is None else f"{div:.4f}")
        previous = means
    mlog.loss_curve = _epoch_means(state.loss_curve)
    return mlog, state, buffer


def _epoch_means(curve: list[dict]) -> list[dict]:
    out: dict[tuple[int, int], list[dict]] = {}
    for rec in curve:
        out.setdefault((rec["task"], rec["epoch"]), []).append(rec)
    return [{"task": t, "epoch": e,
             **{k: float(np.mean([r[k] for r in recs])) for k in ("total", "ce", "tpcl", "div")}}
            for (t, e), recs in out.items()]
