"""Shared task-representation encoder.

``N`` post-LN transformer layers.  The first ``N - K`` run under the
all-visible mask (padding aside) and produce a context representation that
both tasks share; the last ``K`` run under whatever task mask the caller
supplies.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .masks import build_mask_all, compose_padding
from .tensor import ShapeError, Tensor


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 4
    k_focus: int = 2
    max_len: int = 128
    activation: str = "gelu"
    dropout: float = 0.0
    ln_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if not 0 <= self.k_focus <= self.n_layers:
            raise ValueError(f"need 0 <= K <= N, got K={self.k_focus}, N={self.n_layers}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


_ACTIVATIONS = {"gelu": T.gelu, "tanh": T.tanh}


def padding_masks(T_len: int, valid_lens) -> np.ndarray:
    """All-visible ``(B, T, T)`` masks composed with each row's padding."""
    base = build_mask_all(T_len)
    return np.stack([compose_padding(base, int(v)) for v in valid_lens])


class Encoder:
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        c = config
        std = c.init_std

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value, dtype=np.float64), requires_grad=True)

        params = {
            "embed.token": normal(c.vocab_size, c.d_model),
            "embed.position": normal(c.max_len, c.d_model),
        }
        for i in range(c.n_layers):
            pre = f"layer{i}."
            for name in ("q", "k", "v", "o"):
                params[pre + f"attn.w{name}"] = normal(c.d_model, c.d_model)
                params[pre + f"attn.b{name}"] = const(0.0, c.d_model)
            params[pre + "ln1.gamma"] = const(1.0, c.d_model)
            params[pre + "ln1.beta"] = const(0.0, c.d_model)
            params[pre + "ff.w1"] = normal(c.d_model, c.d_ff)
            params[pre + "ff.b1"] = const(0.0, c.d_ff)
            params[pre + "ff.w2"] = normal(c.d_ff, c.d_model)
            params[pre + "ff.b2"] = const(0.0, c.d_model)
            params[pre + "ln2.gamma"] = const(1.0, c.d_model)
            params[pre + "ln2.beta"] = const(0.0, c.d_model)
        self.params: dict[str, Tensor] = params
        self.dropout_rng: np.random.Generator | None = None

    # -- pieces -------------------------------------------------------------

    def embed(self, token_ids) -> Tensor:
        """Token plus learned position embedding, ``(B, T, d)`` for ``(B, T)`` ids."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            return T.getitem(self.embed(ids[None]), 0)
        length = ids.shape[-1]
        if length > self.config.max_len:
            raise ValueError(f"sequence of {length} tokens exceeds max_len={self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise KeyError(f"token id outside vocabulary of size {self.config.vocab_size}")
        tok = T.embedding(self.params["embed.token"], ids)
        pos = T.embedding(self.params["embed.position"], np.arange(length))
        return T.add(tok, pos)

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.config.dropout
        if rate == 0.0 or self.dropout_rng is None:
            return x
        keep = (self.dropout_rng.random(x.shape) >= rate) / (1.0 - rate)
        return T.mul(x, keep)

    def attention(self, H: Tensor, mask: np.ndarray, layer: int) -> Tensor:
        p, c = self.params, self.config
        pre = f"layer{layer}.attn."
        B, L, d = H.shape
        h, dk = c.n_heads, c.d_k

        def heads(name):
            proj = T.add(T.matmul(H, p[pre + "w" + name]), p[pre + "b" + name])
            return T.transpose(T.reshape(proj, (B, L, h, dk)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        weights = T.masked_softmax(scores, mask[:, None])
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
        return T.add(T.matmul(ctx, p[pre + "wo"]), p[pre + "bo"])

    def feed_forward(self, H: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"layer{layer}.ff."
        act = _ACTIVATIONS[self.config.activation]
        inner = act(T.add(T.matmul(H, p[pre + "w1"]), p[pre + "b1"]))
        return T.add(T.matmul(inner, p[pre + "w2"]), p[pre + "b2"])

    def layer(self, H: Tensor, mask: np.ndarray, layer: int) -> Tensor:
        """One block: ``LN(H + MHSA(H))`` followed by ``LN(H' + FFN(H'))``."""
        p, eps = self.params, self.config.ln_eps
        pre = f"layer{layer}."
        if H.ndim != 3 or H.shape[-1] != self.config.d_model:
            raise ShapeError(f"encoder_layer: expected (B, T, {self.config.d_model}), got {H.shape}")
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, (H.shape[0], *mask.shape))
        if mask.shape != (H.shape[0], H.shape[1], H.shape[1]):
            raise ShapeError(f"encoder_layer: mask {mask.shape} does not fit input {H.shape}")
        attn = self._dropout(self.attention(H, mask, layer))
        H1 = T.layer_norm(T.add(H, attn), p[pre + "ln1.gamma"], p[pre + "ln1.beta"], eps)
        ff = self._dropout(self.feed_forward(H1, layer))
        return T.layer_norm(T.add(H1, ff), p[pre + "ln2.gamma"], p[pre + "ln2.beta"], eps)

    # -- full passes ----------------------------------------------------------

    def context(self, token_ids, valid_lens=None) -> Tensor:
        """Representation after the first ``N - K`` layers (shared by every task)."""
        ids = np.asarray(token_ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        valid = [ids.shape[1]] * ids.shape[0] if valid_lens is None else list(valid_lens)
        H = self.embed(ids)
        mask = padding_masks(ids.shape[1], valid)
        for i in range(self.config.n_layers - self.config.k_focus):
            H = self.layer(H, mask, i)
        return T.getitem(H, 0) if single else H

    def focus(self, H: Tensor, task_mask: np.ndarray) -> Tensor:
        """Run the last ``K`` layers under ``task_mask`` (already padding-composed)."""
        single = H.ndim == 2
        if single:
            H = T.reshape(H, (1, *H.shape))
            task_mask = np.asarray(task_mask)[None]
        start = self.config.n_layers - self.config.k_focus
        for i in range(start, self.config.n_layers):
            H = self.layer(H, task_mask, i)
        return T.getitem(H, 0) if single else H

    def encode(self, token_ids, task_mask: np.ndarray, valid_lens=None) -> Tensor:
        """Full pass: context layers, then task-focused layers."""
        return self.focus(self.context(token_ids, valid_lens), task_mask)
