"""Linear-chain CRF tagging head.

Transitions are an ``(n_tags + 1, n_tags)`` matrix; the last row scores the
move out of a synthetic START state into the first tag.  There is no STOP
state.  Batched inputs are ``(B, T, n_tags)`` emissions plus a ``lengths``
vector; positions at or beyond a sequence's length are ignored.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .tensor import ShapeError, Tensor, _node, getitem, kernel, matmul, add, reshape

NEG_LARGE = -1e4


def _check(emissions: Tensor, transitions: Tensor, lengths) -> np.ndarray:
    if emissions.ndim != 3:
        raise ShapeError(f"crf: emissions must be (B, T, n), got {emissions.shape}")
    B, T, n = emissions.shape
    if transitions.shape != (n + 1, n):
        raise ShapeError(
            f"crf: transitions {transitions.shape} do not match {n} tags (need {(n + 1, n)})"
        )
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or (lengths < 1).any() or (lengths > T).any():
        raise ShapeError(f"crf: lengths {lengths.tolist()} invalid for T={T}")
    return lengths


def _forward_alpha(E: np.ndarray, A: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Log forward variables; positions past a sequence's end carry the last value."""
    B, T, n = E.shape
    trans = A[:n]
    alpha = np.empty_like(E)
    alpha[:, 0] = A[n] + E[:, 0]
    for t in range(1, T):
        step = logsumexp(alpha[:, t - 1, :, None] + trans[None], axis=1) + E[:, t]
        live = (t < lengths)[:, None]
        alpha[:, t] = np.where(live, step, alpha[:, t - 1])
    return alpha


def _backward_beta(E: np.ndarray, A: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    B, T, n = E.shape
    trans = A[:n]
    beta = np.zeros_like(E)
    for t in range(T - 2, -1, -1):
        step = logsumexp(trans[None] + (E[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
        live = (t < lengths - 1)[:, None]
        beta[:, t] = np.where(live, step, 0.0)
    return beta


@kernel("crf_log_partition")
def crf_log_partition(emissions: Tensor, transitions: Tensor, lengths=None) -> Tensor:
    """log of the summed exp-score over all tag sequences, one value per batch row.

    The gradient is the forward-backward posterior: unary marginals for the
    emissions, pairwise marginals for the transitions.
    """
    lengths = _check(emissions, transitions, lengths)
    E, A = emissions.data, transitions.data
    B, T, n = E.shape
    alpha = _forward_alpha(E, A, lengths)
    logz = logsumexp(alpha[:, -1], axis=1)

    def grad_fn(g):
        beta = _backward_beta(E, A, lengths)
        valid = (np.arange(T)[None] < lengths[:, None])
        unary = np.exp(alpha + beta - logz[:, None, None]) * valid[..., None]
        gE = unary * g[:, None, None]
        gA = np.zeros_like(A)
        gA[n] = (unary[:, 0] * g[:, None]).sum(axis=0)
        if T > 1:
            pair = (alpha[:, :-1, :, None] + A[:n][None, None]
                    + (E[:, 1:] + beta[:, 1:])[:, :, None, :] - logz[:, None, None, None])
            pair = np.exp(pair) * valid[:, 1:, None, None]
            gA[:n] = np.einsum("btij,b->ij", pair, g)
        return gE, gA

    return _node(logz, (emissions, transitions), grad_fn, "crf_log_partition")


@kernel("crf_sequence_score")
def crf_sequence_score(emissions: Tensor, transitions: Tensor, tags, lengths=None) -> Tensor:
    """Unnormalised score of given tag sequences, one value per batch row."""
    lengths = _check(emissions, transitions, lengths)
    E, A = emissions.data, transitions.data
    B, T, n = E.shape
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != (B, T):
        raise ShapeError(f"crf: tags {tags.shape} do not match emissions {E.shape}")
    valid = np.arange(T)[None] < lengths[:, None]
    tags = np.where(valid, tags, 0)
    if (tags < 0).any() or (tags >= n).any():
        raise ShapeError(f"crf: tag index outside [0, {n})")
    rows = np.arange(B)[:, None]
    prev = np.concatenate([np.full((B, 1), n), tags[:, :-1]], axis=1)
    score = ((E[rows, np.arange(T)[None], tags] + A[prev, tags]) * valid).sum(axis=1)

    def grad_fn(g):
        w = valid * g[:, None]
        gE = np.zeros_like(E)
        np.add.at(gE, (np.repeat(np.arange(B), T), np.tile(np.arange(T), B), tags.ravel()), w.ravel())
        gA = np.zeros_like(A)
        np.add.at(gA, (prev.ravel(), tags.ravel()), w.ravel())
        return gE, gA

    return _node(score, (emissions, transitions), grad_fn, "crf_sequence_score")


def _batched(emissions: Tensor) -> tuple[Tensor, bool]:
    if emissions.ndim == 2:
        return reshape(emissions, (1, *emissions.shape)), True
    return emissions, False


def sequence_score(emissions: Tensor, tags, transitions: Tensor, lengths=None) -> Tensor:
    em, single = _batched(emissions)
    tags = np.asarray(tags)[None] if single else tags
    out = crf_sequence_score(em, transitions, tags, lengths)
    return getitem(out, 0) if single else out


def log_partition(emissions: Tensor, transitions: Tensor, lengths=None) -> Tensor:
    em, single = _batched(emissions)
    out = crf_log_partition(em, transitions, lengths)
    return getitem(out, 0) if single else out


def crf_nll(emissions: Tensor, gold, transitions: Tensor, lengths=None) -> Tensor:
    """Negative log-likelihood of the gold tags; per sequence for batched input."""
    return log_partition(emissions, transitions, lengths) - sequence_score(
        emissions, gold, transitions, lengths
    )


def viterbi_decode(emissions, transitions) -> list[int]:
    """Highest-scoring tag sequence; ties go to the lower tag index."""
    E = np.asarray(getattr(emissions, "data", emissions), dtype=np.float64)
    A = np.asarray(getattr(transitions, "data", transitions), dtype=np.float64)
    T, n = E.shape
    if T < 1:
        raise ShapeError("viterbi_decode: empty sequence")
    score = A[n] + E[0]
    back = np.zeros((T, n), dtype=np.int64)
    for t in range(1, T):
        cand = score[:, None] + A[:n]
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(n)] + E[t]
    best = [int(np.argmax(score))]
    for t in range(T - 1, 0, -1):
        best.append(int(back[t, best[-1]]))
    return best[::-1]


def bieos_constraint_init(tag_names: list[str]) -> np.ndarray:
    """Transition matrix with ``NEG_LARGE`` on moves that break BIEOS."""
    n = len(tag_names)
    A = np.zeros((n + 1, n))

    def split(tag):
        return (tag, None) if tag == "O" else tuple(tag.split("-", 1))

    for j, cur in enumerate(tag_names):
        cp, ct = split(cur)
        if cp in ("I", "E"):
            A[n, j] = NEG_LARGE
        for i, prev in enumerate(tag_names):
            pp, pt = split(prev)
            inside_prev = pp in ("B", "I")
            if inside_prev:
                ok = cp in ("I", "E") and ct == pt
            else:
                ok = cp in ("O", "B", "S")
            if not ok:
                A[i, j] = NEG_LARGE
    return A


class CrfHead:
    """Emission projection plus transition scores."""

    def __init__(self, d_model: int, n_tags: int, rng: np.random.Generator,
                 init_std: float = 0.02, transitions: np.ndarray | None = None):
        self.n_tags = n_tags
        self.params = {
            "crf.weight": Tensor(rng.normal(0.0, init_std, (d_model, n_tags)), requires_grad=True),
            "crf.bias": Tensor(np.zeros(n_tags), requires_grad=True),
            "crf.transitions": Tensor(
                np.zeros((n_tags + 1, n_tags)) if transitions is None else transitions,
                requires_grad=True,
            ),
        }

    @property
    def transitions(self) -> Tensor:
        return self.params["crf.transitions"]

    def emissions(self, H: Tensor, n_words: int) -> Tensor:
        """Project word positions ``1..n_words`` (skipping [CLS] and [SEP])."""
        if n_words < 1:
            raise ShapeError("emissions: empty word range")
        if H.shape[-2] < n_words + 1:
            raise ShapeError(f"emissions: {n_words} words do not fit encoder output {H.shape}")
        words = getitem(H, (..., slice(1, 1 + n_words), slice(None)))
        return add(matmul(words, self.params["crf.weight"]), self.params["crf.bias"])

    def nll(self, H: Tensor, tags: np.ndarray, lengths: np.ndarray) -> Tensor:
        em = self.emissions(H, int(tags.shape[1]))
        return crf_nll(em, tags, self.transitions, lengths)

    def decode(self, H: Tensor, lengths) -> list[list[int]]:
        lengths = np.asarray(lengths)
        em = self.emissions(H, int(lengths.max())).data
        A = self.transitions.data
        return [viterbi_decode(em[b, : lengths[b]], A) for b in range(len(lengths))]
