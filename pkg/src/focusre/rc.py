"""Relation-classification head: a two-layer perceptron over the [CLS] vector."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, add, getitem, log_softmax, matmul, reshape, softmax, tanh


class RcHead:
    def __init__(self, d_model: int, n_relations: int, rng: np.random.Generator,
                 d_hidden: int | None = None, init_std: float = 0.02):
        d_hidden = d_hidden or d_model
        self.d_model = d_model
        self.n_relations = n_relations
        self.params = {
            "rc.w1": Tensor(rng.normal(0.0, init_std, (d_model, d_hidden)), requires_grad=True),
            "rc.b1": Tensor(np.zeros(d_hidden), requires_grad=True),
            "rc.w2": Tensor(rng.normal(0.0, init_std, (d_hidden, n_relations)), requires_grad=True),
            "rc.b2": Tensor(np.zeros(n_relations), requires_grad=True),
        }

    def logits(self, H: Tensor) -> Tensor:
        """Relation logits from row 0 ([CLS]) of each encoder output."""
        if H.shape[-1] != self.d_model:
            raise ShapeError(f"rc_forward: expected width {self.d_model}, got {H.shape}")
        cls = getitem(H, (..., 0, slice(None)))
        p = self.params
        hidden = tanh(add(matmul(_as_matrix(cls), p["rc.w1"]), p["rc.b1"]))
        out = add(matmul(hidden, p["rc.w2"]), p["rc.b2"])
        return out if cls.ndim == 2 else getitem(out, 0)

    def forward(self, H: Tensor) -> Tensor:
        return softmax(self.logits(H))

    def predict(self, H: Tensor) -> np.ndarray:
        return np.argmax(self.logits(H).data, axis=-1)


def _as_matrix(x: Tensor) -> Tensor:
    return x if x.ndim == 2 else reshape(x, (1, x.shape[0]))


def rc_loss(logits: Tensor, gold) -> Tensor:
    """Cross-entropy ``-log softmax(logits)[gold]``, per instance for batched logits.

    Takes logits rather than probabilities so the log-softmax is computed
    stably; the value equals ``-log p[gold]`` exactly.
    """
    gold = np.asarray(gold, dtype=np.int64)
    n = logits.shape[-1]
    if (gold < 0).any() or (gold >= n).any():
        raise ValueError(f"rc_loss: relation label outside [0, {n})")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        return -getitem(logp, int(gold))
    return -getitem(logp, (np.arange(logits.shape[0]), gold))
