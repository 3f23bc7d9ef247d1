"""Miniature CLIP-style dual encoder with deep prompt slots.

Both towers share one pre-LN transformer implementation.  Token layout is
``[cls, prompt_1..prompt_L, content...]``; at every prompted layer the ``L``
prompt positions are overwritten with that layer's prompt before the layer
runs.  Read-out is the class token, layer-normed, projected and L2-normalised.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from tppt import autodiff as ad
from tppt.autodiff import Tensor
from tppt.errors import ContractError, GraphError, PretrainingError

log = logging.getLogger(__name__)

TEMPERATURE = 0.07


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    model_dim: int = 32
    heads: int = 4
    mlp_dim: int = 64
    max_tokens: int = 16
    image_token_dim: int = 8
    vocab_size: int = 23
    temperature: float = TEMPERATURE

    def validate(self) -> None:
        if self.depth < 1:
            raise ContractError("depth must be at least 1")
        if self.model_dim % self.heads:
            raise ContractError("model_dim must be divisible by heads")
        if min(self.model_dim, self.heads, self.mlp_dim, self.max_tokens) < 1:
            raise ContractError("encoder sizes must be positive")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


PromptSpec = Sequence["Tensor | np.ndarray"] | None


class TransformerTower:
    """One encoder tower.  ``params`` is an ordered name -> Tensor mapping."""

    def __init__(self, cfg: EncoderConfig, kind: str, rng: np.random.Generator):
        if kind not in ("image", "text"):
            raise ValueError(kind)
        self.cfg = cfg
        self.kind = kind
        D, H = cfg.model_dim, cfg.mlp_dim
        p: dict[str, Tensor] = {}

        def init(name, *shape, scale=None):
            std = scale if scale is not None else 1.0 / math.sqrt(shape[0])
            p[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        def const(name, value, *shape):
            p[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

        if kind == "image":
            init("embed_w", cfg.image_token_dim, D)
            const("embed_b", 0.0, D)
        else:
            init("token_embedding", cfg.vocab_size, D, scale=1.0)
        init("cls", D, scale=1.0)
        init("pos", cfg.max_tokens, D, scale=0.1)
        for l in range(cfg.depth):
            const(f"l{l}.ln1_g", 1.0, D)
            const(f"l{l}.ln1_b", 0.0, D)
            init(f"l{l}.w_qkv", D, 3 * D)
            const(f"l{l}.b_qkv", 0.0, 3 * D)
            init(f"l{l}.w_o", D, D, scale=0.5 / math.sqrt(D))
            const(f"l{l}.b_o", 0.0, D)
            const(f"l{l}.ln2_g", 1.0, D)
            const(f"l{l}.ln2_b", 0.0, D)
            init(f"l{l}.w_fc1", D, H)
            const(f"l{l}.b_fc1", 0.0, H)
            init(f"l{l}.w_fc2", H, D, scale=0.5 / math.sqrt(H))
            const(f"l{l}.b_fc2", 0.0, D)
        const("ln_post_g", 1.0, D)
        const("ln_post_b", 0.0, D)
        init("proj", D, D)
        self.params = p

    def embed(self, tokens: np.ndarray) -> Tensor:
        p = self.params
        if self.kind == "image":
            x = np.asarray(tokens, dtype=np.float64)
            if x.ndim != 3 or x.shape[-1] != self.cfg.image_token_dim:
                raise GraphError(f"image tokens must be [N, S, {self.cfg.image_token_dim}], got {x.shape}")
            return Tensor(x) @ p["embed_w"] + p["embed_b"]
        ids = np.asarray(tokens)
        if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
            raise GraphError(f"text tokens must be an integer [N, S] array, got {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise GraphError("text token id outside vocabulary")
        return ad.take(p["token_embedding"], ids)

    def _block(self, h: Tensor, l: int) -> Tensor:
        p, cfg = self.params, self.cfg
        N, S, D = h.shape
        nh, dh = cfg.heads, cfg.model_dim // cfg.heads
        x = ad.layer_norm(h, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
        qkv = (x @ p[f"l{l}.w_qkv"] + p[f"l{l}.b_qkv"]).reshape((N, S, 3, nh, dh))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # [3, N, nh, S, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax((q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
        o = ad.transpose(att @ v, (0, 2, 1, 3)).reshape((N, S, D))
        h = h + (o @ p[f"l{l}.w_o"] + p[f"l{l}.b_o"])
        x = ad.layer_norm(h, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        x = ad.gelu(x @ p[f"l{l}.w_fc1"] + p[f"l{l}.b_fc1"]) @ p[f"l{l}.w_fc2"] + p[f"l{l}.b_fc2"]
        return h + x

    def __call__(self, tokens: np.ndarray, layer_prompts: PromptSpec = None) -> Tensor:
        cfg, p = self.cfg, self.params
        x = self.embed(tokens)
        N, S, D = x.shape
        if S + 1 > cfg.max_tokens:
            raise GraphError(f"sequence of {S} tokens exceeds max_tokens={cfg.max_tokens}")
        prompts = _check_prompts(layer_prompts, N, D, cfg.depth)
        cls = ad.broadcast_to(ad.reshape(p["cls"], (1, 1, D)), (N, 1, D))
        h = ad.concat([cls, x], axis=1) + p["pos"][: S + 1]
        L = prompts[0].shape[-2] if prompts else 0
        for l in range(cfg.depth):
            if l < len(prompts):
                tail = h[:, 1 + L:] if l > 0 else h[:, 1:]
                h = ad.concat([h[:, :1], prompts[l], tail], axis=1)
            h = self._block(h, l)
        out = ad.layer_norm(h[:, 0], p["ln_post_g"], p["ln_post_b"]) @ p["proj"]
        return ad.l2_normalize(out, axis=-1)


def _check_prompts(layer_prompts: PromptSpec, N: int, D: int, depth: int) -> list[Tensor]:
    if layer_prompts is None:
        return []
    prompts = [ad.as_tensor(t) for t in layer_prompts]
    if len(prompts) > depth:
        raise ContractError(f"{len(prompts)} prompted layers requested but encoder depth is {depth}")
    if not prompts:
        return []
    L = prompts[0].shape[-2] if prompts[0].ndim >= 2 else -1
    out = []
    for l, t in enumerate(prompts):
        if t.ndim == 2:
            t = ad.broadcast_to(ad.reshape(t, (1, *t.shape)), (N, *t.shape))
        if t.ndim != 3 or t.shape[0] != N or t.shape[1] != L or t.shape[2] != D or L < 1:
            raise GraphError(f"layer {l + 1} prompt has shape {t.shape}; expected [{L}, {D}] or [{N}, {L}, {D}]")
        out.append(t)
    return out


class DualEncoder:
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.image = TransformerTower(cfg, "image", rng)
        self.text = TransformerTower(cfg, "text", rng)
        self.temperature = cfg.temperature
        self.frozen = False

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"image.{k}": v for k, v in self.image.params.items()}
        out.update({f"text.{k}": v for k, v in self.text.params.items()})
        return out

    def freeze(self) -> "DualEncoder":
        for t in self.named_parameters().values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise ContractError("parameter names in checkpoint do not match the encoder")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ContractError(f"checkpoint array {k} has shape {arrays[k].shape}, expected {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def encode_image(self, image_tokens, layer_prompts: PromptSpec = None) -> Tensor:
        tokens = np.asarray(image_tokens, dtype=np.float64)
        return self.image(tokens[None] if tokens.ndim == 2 else tokens, layer_prompts)

    def encode_text(self, text_tokens, layer_prompts: PromptSpec = None) -> Tensor:
        tokens = np.asarray(text_tokens)
        return self.text(tokens[None] if tokens.ndim == 1 else tokens, layer_prompts)

    def query_features(self, image_tokens, batch_size: int = 256) -> np.ndarray:
        """Unprompted frozen image features q(x), computed without a tape."""
        tokens = np.asarray(image_tokens, dtype=np.float64)
        chunks = [self.encode_image(tokens[i:i + batch_size]).data
                  for i in range(0, len(tokens), batch_size)]
        return np.concatenate(chunks, axis=0)


def zero_shot_accuracy(enc: DualEncoder, images: np.ndarray, labels: np.ndarray,
                       texts: np.ndarray, classes: Sequence[int] | None = None) -> float:
    """Accuracy of the class-probability rule with unprompted template prototypes.

    ``texts[c]`` holds the template for class ``c``.  Only ``classes`` compete.
    """
    classes = np.arange(len(texts)) if classes is None else np.asarray(classes)
    protos = enc.encode_text(texts[classes]).data
    feats = enc.query_features(images)
    pred = classes[np.argmax(feats @ protos.T, axis=1)]
    return float((pred == labels).mean())


def clip_loss(z: Tensor, w: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE for matched rows of ``z`` and ``w``."""
    logits = (z @ ad.swapaxes(w, 0, 1)) * (1.0 / temperature)
    n = z.shape[0]
    eye = np.eye(n)
    rows = -(ad.log_softmax(logits, axis=1) * eye).sum() * (1.0 / n)
    cols = -(ad.log_softmax(logits, axis=0) * eye).sum() * (1.0 / n)
    return (rows + cols) * 0.5


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    batch_classes: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0


def pretrain_dual_encoder(dataset, cfg: EncoderConfig, seed: int = 0,
                          pretrain: PretrainConfig | None = None,
                          split: str = "pretrain") -> tuple[DualEncoder, dict]:
    """Contrastively pretrain both towers, freeze them, and verify zero-shot skill.

    Each step draws one example from each of ``batch_classes`` distinct classes
    so no caption is duplicated inside a batch.  Returns the frozen encoder
    and a log with the loss trace and held-out zero-shot accuracy.
    """
    pretrain = pretrain or PretrainConfig(seed=seed)
    data = getattr(dataset, split)
    if data is None or len(data) == 0:
        data = dataset.train
    enc = DualEncoder(cfg, seed=seed)
    params = list(enc.named_parameters().values())
    n_classes = dataset.n_classes
    by_class = [np.flatnonzero(data.labels == c) for c in range(n_classes)]
    if any(len(ix) == 0 for ix in by_class):
        raise ContractError("pretraining data must cover every class")
    rng = np.random.default_rng(pretrain.seed + 7919 * seed)
    state = ad.make_optimizer(params, pretrain.lr, pretrain.steps, pretrain.momentum)
    losses = []
    k = min(pretrain.batch_classes, n_classes)
    if n_classes > 1:
        for _ in range(pretrain.steps):
            classes = np.sort(rng.choice(n_classes, size=k, replace=False))
            idx = np.array([by_class[c][rng.integers(len(by_class[c]))] for c in classes])
            for t in params:
                t.grad = None
            z = enc.encode_image(data.images[idx])
            w = enc.encode_text(dataset.texts[classes])
            loss = clip_loss(z, w, enc.temperature)
            loss.backward()
            ad.sgd_step(params, [t.grad for t in params], state)
            losses.append(loss.item())
    enc.freeze()
    acc = zero_shot_accuracy(enc, dataset.test.images, dataset.test.labels, dataset.texts)
    chance = 1.0 / n_classes
    log.info("pretraining done: zero-shot held-out accuracy %.4f (chance %.4f)", acc, chance)
    if n_classes > 1 and acc <= chance:
        raise PretrainingError(f"zero-shot accuracy {acc:.4f} does not beat chance {chance:.4f}")
    return enc, {"losses": losses, "zero_shot_accuracy": acc, "chance": chance}
