"""Classification rule and training losses.

Embeddings and prototypes are unit vectors, so cosine similarity is the dot
product.  ``labels`` passed to the losses index rows of the prototype matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tppt import autodiff as ad
from tppt.autodiff import Tensor
from tppt.errors import ContractError

MODES = ("tppt-v", "tppt-vt")


@dataclass
class PrototypeSet:
    classes: np.ndarray  # seen class ids, row order
    matrix: Tensor  # [C, D] unit rows

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.classes):
            raise ContractError("prototype matrix must have one row per class")
        if len(set(self.classes.tolist())) != len(self.classes):
            raise ContractError("prototype classes must be distinct")

    def __len__(self) -> int:
        return len(self.classes)

    def rows(self, labels) -> np.ndarray:
        """Map class ids to row indices; unknown ids are a contract error."""
        lookup = {int(c): i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(y)] for y in np.asarray(labels).reshape(-1)], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"label {exc.args[0]} is not in the prototype set") from None


def _check_unit(x: Tensor, what: str, tol: float = 1e-6) -> None:
    n = np.linalg.norm(x.data, axis=-1)
    if not np.all(np.abs(n - 1.0) <= tol):
        raise ContractError(f"{what} rows must be unit-norm")


def similarity_logits(z, protos, tau: float) -> Tensor:
    w = protos.matrix if isinstance(protos, PrototypeSet) else ad.as_tensor(protos)
    z = ad.as_tensor(z)
    if w.shape[0] < 1:
        raise ContractError("empty prototype set")
    _check_unit(z, "embedding")
    _check_unit(w, "prototype")
    return (z @ ad.swapaxes(w, 0, 1)) * (1.0 / tau)


def class_probabilities(z, protos, tau: float) -> Tensor:
    """p(c | x_i) = softmax_c(cos(z_i, w_c) / tau), shape [N, C]."""
    return ad.softmax(similarity_logits(z, protos, tau), axis=1)


def _label_rows(labels, C: int) -> np.ndarray:
    rows = np.asarray(labels, dtype=np.int64).reshape(-1)
    if rows.size and (rows.min() < 0 or rows.max() >= C):
        raise ContractError("label outside the prototype set")
    return rows


def ce_loss(probs, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    probs = ad.as_tensor(probs)
    rows = _label_rows(labels, probs.shape[1])
    picked = probs[np.arange(len(rows)), rows]
    return -ad.log(picked).mean()


def ce_from_logits(logits: Tensor, labels) -> Tensor:
    """Same value as ``ce_loss(softmax(logits))``, computed via log-softmax."""
    rows = _label_rows(labels, logits.shape[1])
    logp = ad.log_softmax(logits, axis=1)
    return -logp[np.arange(len(rows)), rows].mean()


def tpcl_loss(z, protos, labels, tau: float) -> Tensor:
    """Prototype-to-batch contrastive loss.

    For every seen class c, a softmax over the batch of cos(w_c, z_i)/tau; the
    negative log-mass on samples labelled c is summed and divided by C.
    Samples of other classes only enter through the denominators.
    """
    logits = similarity_logits(z, protos, tau)  # [N, C]
    N, C = logits.shape
    rows = _label_rows(labels, C)
    if N < 1:
        raise ContractError("batch must be non-empty")
    logp = ad.log_softmax(ad.swapaxes(logits, 0, 1), axis=1)  # [C, N]
    return -logp[rows, np.arange(N)].sum() * (1.0 / C)


def div_loss(prototypes) -> Tensor:
    """log sum over ordered pairs m != n of exp(-||w_m - w_n||^2)."""
    w = prototypes.matrix if isinstance(prototypes, PrototypeSet) else ad.as_tensor(prototypes)
    C = w.shape[0]
    if C < 2:
        raise ContractError("diversity loss needs at least two prototypes")
    diff = ad.reshape(w, (C, 1, -1)) - ad.reshape(w, (1, C, -1))
    d2 = (diff * diff).sum(axis=-1)
    m, n = np.nonzero(~np.eye(C, dtype=bool))
    return ad.logsumexp(-d2[m, n], axis=0)


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    tpcl: float
    div: float
    alpha: float

    def as_dict(self) -> dict:
        return {"total": self.total.item(), "ce": self.ce, "tpcl": self.tpcl,
                "div": self.div, "alpha": self.alpha}


def composite_loss(mode: str, z, protos: PrototypeSet, labels, alpha: float = 1.0,
                   tau: float = 0.07, use_tpcl: bool = True,
                   text_prompted: bool | None = None) -> LossBreakdown:
    """CE + TPCL, plus ``alpha`` times the diversity loss in ``tppt-vt`` mode.

    ``labels`` are class ids; they are mapped onto prototype rows here.
    ``use_tpcl=False`` gives the cross-entropy-only ablation.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    if mode == "tppt-vt" and text_prompted is False:
        raise ContractError("tppt-vt needs prototypes from the prompted text encoder")
    rows = protos.rows(labels)
    logits = similarity_logits(z, protos, tau)
    ce = ce_from_logits(logits, rows)
    total = ce
    tpcl_val = div_val = 0.0
    if use_tpcl:
        tp = tpcl_loss(z, protos, rows, tau)
        total = total + tp
        tpcl_val = tp.item()
    if mode == "tppt-vt" and len(protos) >= 2:
        dv = div_loss(protos)
        div_val = dv.item()
        if alpha:
            total = total + dv * alpha
    return LossBreakdown(total, ce.item(), tpcl_val, div_val, alpha)
