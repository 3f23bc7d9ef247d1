"""Incremental instance-conditioned visual prompts and per-class text prompts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tppt import autodiff as ad
from tppt.autodiff import Tensor
from tppt.errors import ContractError, GraphError

INIT_SCALE = 0.02


@dataclass
class TaskChunk:
    """Parameters introduced by one task: components and affinity-head columns."""

    task_id: int
    components: Tensor  # [depth, P, L, D]
    head_w: Tensor  # [depth, query_dim, P]
    head_b: Tensor  # [depth, P]

    def tensors(self) -> list[Tensor]:
        return [self.components, self.head_w, self.head_b]


@dataclass
class VisualPromptPool:
    depth: int
    length: int
    dim: int
    query_dim: int
    bias_init: float = 0.0
    chunks: list[TaskChunk] = field(default_factory=list)

    @property
    def size(self) -> int:
        """Number of prompt components M (identical at every layer)."""
        return sum(c.components.shape[1] for c in self.chunks)

    @property
    def task_boundaries(self) -> list[int]:
        """Cumulative component counts; task ``i`` owns ``[b[i-1], b[i])``."""
        return list(np.cumsum([c.components.shape[1] for c in self.chunks]).tolist())

    def trainable(self) -> list[Tensor]:
        return [t for c in self.chunks for t in c.tensors() if t.requires_grad]

    def expand(self, task_id: int, prompts_per_task: int, seed: int) -> None:
        if task_id != len(self.chunks):
            raise ContractError(f"task {task_id} is not the next task (expected {len(self.chunks)})")
        if prompts_per_task < 1:
            raise ContractError("prompts_per_task must be at least 1")
        for c in self.chunks:
            for t in c.tensors():
                t.requires_grad = False
                t.grad = None
        rng = np.random.default_rng([seed, task_id, 1])
        d, P = self.depth, prompts_per_task
        comps = Tensor(rng.normal(0.0, INIT_SCALE, (d, P, self.length, self.dim)),
                       requires_grad=True, name=f"visual.t{task_id}.components")
        w = Tensor(rng.normal(0.0, INIT_SCALE, (d, self.query_dim, P)),
                   requires_grad=True, name=f"visual.t{task_id}.head_w")
        b = Tensor(np.full((d, P), self.bias_init), requires_grad=True,
                   name=f"visual.t{task_id}.head_b")
        self.chunks.append(TaskChunk(task_id, comps, w, b))

    def affinities(self, query) -> Tensor:
        """Raw affine affinities alpha, shape [depth, N, M]."""
        q = ad.as_tensor(query)
        if q.ndim == 1:
            q = ad.reshape(q, (1, -1))
        if q.ndim != 2 or q.shape[1] != self.query_dim:
            raise GraphError(f"query must be [N, {self.query_dim}], got {q.shape}")
        if not self.chunks:
            raise ContractError("prompt pool is empty; expand it for a task first")
        w = ad.concat([c.head_w for c in self.chunks], axis=2)
        b = ad.concat([c.head_b for c in self.chunks], axis=1)
        return ad.reshape(q, (1, *q.shape)) @ w + ad.reshape(b, (self.depth, 1, -1))

    def instance_prompts(self, query) -> tuple[list[Tensor], Tensor]:
        """Per-layer aggregated prompts ``sum_m alpha_l^m P_l^m`` and the alphas."""
        alpha = self.affinities(query)
        comps = ad.concat([c.components for c in self.chunks], axis=1)
        M = comps.shape[1]
        flat = ad.reshape(comps, (self.depth, M, self.length * self.dim))
        agg = ad.reshape(alpha @ flat, (self.depth, alpha.shape[1], self.length, self.dim))
        return [agg[l] for l in range(self.depth)], alpha

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for c in self.chunks:
            out[f"t{c.task_id}.components"] = c.components.data.copy()
            out[f"t{c.task_id}.head_w"] = c.head_w.data.copy()
            out[f"t{c.task_id}.head_b"] = c.head_b.data.copy()
        return out


@dataclass
class TextualPromptSet:
    """One prompt stack ``[depth, L, D]`` per seen class; all stay trainable."""

    depth: int
    length: int
    dim: int
    prompts: dict[int, Tensor] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return list(self.prompts)

    def add_classes(self, classes, seed: int, task_id: int) -> None:
        classes = [int(c) for c in classes]
        clash = [c for c in classes if c in self.prompts]
        if clash or len(set(classes)) != len(classes):
            raise ContractError(f"duplicate class ids {clash or classes}")
        rng = np.random.default_rng([seed, task_id, 2])
        for c in classes:
            self.prompts[c] = Tensor(rng.normal(0.0, INIT_SCALE, (self.depth, self.length, self.dim)),
                                     requires_grad=True, name=f"text.class{c}")

    def trainable(self) -> list[Tensor]:
        return list(self.prompts.values())

    def layer_prompts(self, classes) -> list[Tensor]:
        """Stack the prompts of ``classes`` into per-layer ``[C, L, D]`` tensors."""
        missing = [int(c) for c in classes if int(c) not in self.prompts]
        if missing:
            raise ContractError(f"no textual prompt for classes {missing}")
        stacked = ad.stack([self.prompts[int(c)] for c in classes], axis=1)  # [depth, C, L, D]
        return [stacked[l] for l in range(self.depth)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"class{c}": t.data.copy() for c, t in self.prompts.items()}


@dataclass
class PromptPool:
    visual: VisualPromptPool
    text: TextualPromptSet | None = None
    classes: list[int] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.visual.chunks)

    def trainable(self) -> list[Tensor]:
        params = self.visual.trainable()
        if self.text is not None:
            params += self.text.trainable()
        return params

    def instance_prompts(self, query) -> tuple[list[Tensor], Tensor]:
        return self.visual.instance_prompts(query)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"visual.{k}": v for k, v in self.visual.arrays().items()}
        if self.text is not None:
            out.update({f"text.{k}": v for k, v in self.text.arrays().items()})
        return out

    def metadata(self) -> dict:
        return {
            "depth_v": self.visual.depth, "length_v": self.visual.length,
            "dim": self.visual.dim, "task_boundaries": self.visual.task_boundaries,
            "classes": list(self.classes),
            "depth_t": self.text.depth if self.text else None,
            "length_t": self.text.length if self.text else None,
        }


def make_pool(depth_v: int, length_v: int, dim: int, *, depth_t: int = 0, length_t: int = 0,
              with_text: bool = False, bias_init: float = 0.0) -> PromptPool:
    if depth_v < 1 or length_v < 1:
        raise ContractError("visual prompt depth and length must be positive")
    visual = VisualPromptPool(depth_v, length_v, dim, dim, bias_init=bias_init)
    text = None
    if with_text:
        if depth_t < 1 or length_t < 1:
            raise ContractError("textual prompt depth and length must be positive")
        text = TextualPromptSet(depth_t, length_t, dim)
    return PromptPool(visual, text)


def expand_for_task(pool: PromptPool, task_id: int, new_classes, prompts_per_task: int,
                    seed: int) -> PromptPool:
    """Grow the pool for the next task, freezing everything earlier tasks own."""
    new_classes = [int(c) for c in new_classes]
    if len(set(new_classes)) != len(new_classes) or set(new_classes) & set(pool.classes):
        raise ContractError(f"duplicate class ids in {new_classes}")
    pool.visual.expand(task_id, prompts_per_task, seed)
    if pool.text is not None:
        pool.text.add_classes(new_classes, seed, task_id)
    pool.classes.extend(new_classes)
    return pool


def instance_prompts(pool: PromptPool, query) -> tuple[list[Tensor], Tensor]:
    return pool.instance_prompts(query)
