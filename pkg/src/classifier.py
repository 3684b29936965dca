"""
Classifier heads: cosine prototypes (default) and a linear ablation head,
minibatch logit masking and the masked cross-entropy loss.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from errors import ConfigError, ContractError, LabelError
from ndgrad import (
    TapeGraph, Tensor, Var, add_bias, l2_normalize_rows, masked_cross_entropy,
    matmul, scale, transpose,
)
from prng import Xoshiro256

NORM_EPS = 1e-8


class CosineHead:
    """z_c = cos(g, c_c) / tau with one learnable prototype row per class"""

    kind = "cosine"

    def __init__(self, num_classes: int, dim: int, rng: Xoshiro256, tau: float = 0.1):
        if tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {tau}", key="tau")
        raw = rng.normal((num_classes, dim))
        raw /= np.sqrt((raw * raw).sum(axis=1, keepdims=True))
        self.prototypes = Tensor(raw)
        self.tau = tau
        self.num_classes = num_classes

    def parameters(self) -> Dict[str, Tensor]:
        return {"head.prototypes": self.prototypes}


class LinearHead:
    """z = g W^T + b"""

    kind = "linear"

    def __init__(self, num_classes: int, dim: int, rng: Xoshiro256):
        self.weight = Tensor(rng.normal((num_classes, dim), 1.0 / np.sqrt(dim)))
        self.bias = Tensor(np.zeros(num_classes))
        self.num_classes = num_classes

    def parameters(self) -> Dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


@dataclass
class LogitMask:
    """allowed[c] is True where m_c = 0; False stands for the -inf entries"""

    allowed: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf)


def cosine_logits(g: Var, head: CosineHead) -> Var:
    tape = g.tape
    prototypes = tape.param(head.prototypes, "head.prototypes")
    cos = matmul(l2_normalize_rows(g, NORM_EPS), transpose(l2_normalize_rows(prototypes, NORM_EPS)))
    return scale(cos, 1.0 / head.tau)


def linear_logits(g: Var, head: LinearHead) -> Var:
    tape = g.tape
    weight = tape.param(head.weight, "head.weight")
    bias = tape.param(head.bias, "head.bias")
    return add_bias(matmul(g, transpose(weight)), bias)


def head_logits(g: Var, head) -> Var:
    if head.kind == "cosine":
        return cosine_logits(g, head)
    return linear_logits(g, head)


def make_mask(labels: Iterable[int], num_classes: int) -> LogitMask:
    labels = [int(y) for y in labels]
    if not labels:
        raise ContractError("cannot build a logit mask from an empty label set")
    allowed = np.zeros(num_classes, dtype=bool)
    for y in labels:
        if y < 0 or y >= num_classes:
            raise LabelError(f"label {y} outside 0..{num_classes - 1}")
        allowed[y] = True
    return LogitMask(allowed)


def masked_ce_loss(z: Var, mask: Optional[LogitMask], labels: Sequence[int]) -> Var:
    """Cross-entropy restricted to unmasked classes; mask=None is plain cross-entropy"""
    num_classes = z.shape[1]
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"labels must lie in 0..{num_classes - 1}")
    allowed = np.ones(num_classes, dtype=bool) if mask is None else mask.allowed
    if not np.all(allowed[y]):
        raise ContractError("batch label is masked out; the mask was built from a different batch")
    return masked_cross_entropy(z, allowed, y)


def masked_softmax(z: np.ndarray, mask: Optional[LogitMask]) -> np.ndarray:
    """Class probabilities under the mask; masked classes get exactly 0"""
    z = np.asarray(z, dtype=np.float64)
    allowed = np.ones(z.shape[-1], dtype=bool) if mask is None else mask.allowed
    probs = np.zeros_like(z)
    zz = z[..., allowed]
    e = np.exp(zz - zz.max(axis=-1, keepdims=True))
    probs[..., allowed] = e / e.sum(axis=-1, keepdims=True)
    return probs


def predict(g, head) -> np.ndarray:
    """Argmax over all classes (no masking at inference); ties go to the lowest index"""
    if not isinstance(g, Var):
        g = TapeGraph(record=False).const(g)
    elif g.tape.record:
        g = TapeGraph(record=False).const(g.data)
    z = head_logits(g, head).data
    return np.argmax(z, axis=1)


def prototype_norms(head) -> np.ndarray:
    """L2 norm of each class's prototype (cosine) or weight row (linear)"""
    rows = head.prototypes.data if head.kind == "cosine" else head.weight.data
    return np.sqrt((rows * rows).sum(axis=1))


def weight_norm_rows(head, step: int, first_seen: Dict[int, int]) -> List[dict]:
    """
    Rows for the weight-norm CSV. `first_seen` maps class -> step and is kept
    in insertion (first-seen) order; never-seen classes follow with -1.
    """
    norms = prototype_norms(head)
    seen = list(first_seen)
    unseen = [c for c in range(len(norms)) if c not in first_seen]
    rows = []
    for c in seen + unseen:
        rows.append({
            "step": step,
            "class_id": c,
            "first_seen_step": first_seen.get(c, -1),
            "norm": float(norms[c]),
        })
    return rows
