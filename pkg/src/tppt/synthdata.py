"""Synthetic paired image/text data with controllable class structure.

Images are sequences of continuous token vectors (class centroid tokens plus
Gaussian noise); captions are integer sequences made of a template shared by
all classes followed by one class-specific token id.

Besides the train/test splits used for continual learning, ``generate`` also
emits a ``pretrain`` split for backbone pretraining.  Pretraining images are
drawn around the raw centroids, while the downstream splits are displaced by a
per-class offset of scale ``domain_shift``, so the frozen backbone transfers
imperfectly and prompt tuning has something to learn.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from tppt.errors import ContractError


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 20
    train_per_class: int = 50
    test_per_class: int = 20
    pretrain_per_class: int = 100
    n_image_tokens: int = 6
    token_dim: int = 8
    template_len: int = 3
    sigma_between: float = 1.0
    sigma_within: float = 0.6
    domain_shift: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ContractError("n_classes must be at least 2")
        if not self.sigma_between > self.sigma_within > 0:
            raise ContractError("need sigma_between > sigma_within > 0")
        if self.domain_shift < 0:
            raise ContractError("domain_shift must be non-negative")
        for name in ("train_per_class", "test_per_class", "n_image_tokens", "token_dim",
                     "template_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be at least 1")
        if self.pretrain_per_class < 0:
            raise ContractError("pretrain_per_class must be non-negative")

    @property
    def vocab_size(self) -> int:
        return self.template_len + self.n_classes

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    images: np.ndarray  # [n, n_image_tokens, token_dim]
    labels: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Split":
        return Split(self.images[index], self.labels[index])


@dataclass
class SynthDataset:
    config: SynthConfig
    centroids: np.ndarray  # [n_classes, n_image_tokens, token_dim]
    texts: np.ndarray  # [n_classes, template_len + 1] int64
    train: Split
    test: Split
    pretrain: Split = field(default=None)  # type: ignore[assignment]

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def class_text(self, classes) -> np.ndarray:
        return self.texts[np.asarray(classes, dtype=np.int64)]


def class_template(cfg: SynthConfig, class_id: int) -> np.ndarray:
    """Shared template ids ``0..template_len-1`` followed by the class token."""
    return np.concatenate([np.arange(cfg.template_len), [cfg.template_len + class_id]]).astype(np.int64)


def generate(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.n_image_tokens, cfg.token_dim)
    centroids = rng.normal(0.0, cfg.sigma_between, size=(cfg.n_classes, *shape))
    offsets = rng.normal(0.0, cfg.domain_shift, size=(cfg.n_classes, *shape)) if cfg.domain_shift else 0.0

    def draw(per_class: int, centre: np.ndarray) -> Split:
        labels = np.repeat(np.arange(cfg.n_classes), per_class)
        noise = rng.normal(0.0, cfg.sigma_within, size=(len(labels), *shape))
        return Split(centre[labels] + noise, labels.astype(np.int64))

    downstream = centroids + offsets
    train = draw(cfg.train_per_class, downstream)
    test = draw(cfg.test_per_class, downstream)
    pretrain = draw(cfg.pretrain_per_class, centroids)
    texts = np.stack([class_template(cfg, c) for c in range(cfg.n_classes)])
    return SynthDataset(cfg, centroids, texts, train, test, pretrain)


def nearest_mean_accuracy(ds: SynthDataset) -> float:
    """Nearest-class-mean classifier on raw tokens: fit on train, score on test."""
    flat_train = ds.train.images.reshape(len(ds.train), -1)
    means = np.stack([flat_train[ds.train.labels == c].mean(axis=0) for c in range(ds.n_classes)])
    flat_test = ds.test.images.reshape(len(ds.test), -1)
    d2 = ((flat_test[:, None, :] - means[None]) ** 2).sum(-1)
    return float((d2.argmin(axis=1) == ds.test.labels).mean())
