"""Attention-visibility masks for the encoder.

A mask is a ``(T, T)`` boolean numpy array; ``mask[i, j]`` says whether
token ``i`` may attend to token ``j``.  Builders return fresh arrays and
never mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class PositionSet:
    """Positions of [CLS] and of every token of the two entities of a pair."""

    cls: int
    en1: tuple[int, ...]
    en2: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "en1", tuple(int(i) for i in self.en1))
        object.__setattr__(self, "en2", tuple(int(i) for i in self.en2))

    @property
    def members(self) -> np.ndarray:
        return np.array(sorted({self.cls, *self.en1, *self.en2}), dtype=np.int64)

    def validate(self, T: int) -> None:
        idx = (self.cls, *self.en1, *self.en2)
        if not self.en1 or not self.en2:
            raise MaskError("entity position sets must be non-empty")
        if any(i < 0 or i >= T for i in idx):
            raise MaskError(f"position out of range for T={T}: {self}")
        if set(self.en1) & set(self.en2):
            raise MaskError(f"entity positions overlap: {self}")
        if self.cls in self.en1 or self.cls in self.en2:
            raise MaskError(f"[CLS] position inside an entity: {self}")


def _check_len(T: int) -> None:
    if T < 1:
        raise MaskError(f"mask size must be >= 1, got {T}")


def build_mask_all(T: int) -> np.ndarray:
    """Every token attends to every token."""
    _check_len(T)
    return np.ones((T, T), dtype=bool)


def build_mask_ner(T: int) -> np.ndarray:
    # NER leaves attention unconstrained
    return build_mask_all(T)


def build_mask_rc_v1(T: int, pos: PositionSet) -> np.ndarray:
    """[CLS] sees only itself and the two entities; all other rows see everything."""
    _check_len(T)
    pos.validate(T)
    mask = np.ones((T, T), dtype=bool)
    mask[pos.cls] = False
    mask[pos.cls, pos.members] = True
    return mask


def build_mask_rc_v2(T: int, pos: PositionSet, repair: bool = True) -> np.ndarray:
    """Only [CLS] and the entity tokens attend, and only among themselves.

    Rows outside that set would be empty; with ``repair`` they get
    self-attention so softmax stays defined.  Nothing in the privileged set
    ever looks at those rows, so the [CLS] output is unaffected.
    """
    _check_len(T)
    pos.validate(T)
    members = pos.members
    mask = np.zeros((T, T), dtype=bool)
    mask[np.ix_(members, members)] = True
    if repair:
        repair_empty_rows(mask)
    return mask


def repair_empty_rows(mask: np.ndarray) -> np.ndarray:
    """Give every all-zero row its diagonal bit (in place)."""
    empty = ~mask.any(axis=-1)
    idx = np.nonzero(empty)[0]
    mask[idx, idx] = True
    return mask


def compose_padding(mask: np.ndarray, valid_len: int) -> np.ndarray:
    """Hide padded columns from real rows; padded rows attend only to themselves."""
    T = mask.shape[-1]
    if valid_len < 1 or valid_len > T:
        raise MaskError(f"valid_len must be in [1, {T}], got {valid_len}")
    out = mask.copy()
    out[:, valid_len:] = False
    pad = np.arange(valid_len, T)
    out[valid_len:] = False
    out[pad, pad] = True
    return out


def build_task_mask(kind: str, T: int, pos: PositionSet | None = None,
                    valid_len: int | None = None) -> np.ndarray:
    """Builder dispatch by name (``all``, ``ner``, ``v1``, ``v2``) plus padding."""
    if kind in ("all", "ner"):
        mask = build_mask_all(T)
    elif kind == "v1":
        mask = build_mask_rc_v1(T, pos)
    elif kind == "v2":
        mask = build_mask_rc_v2(T, pos)
    else:
        raise MaskError(f"unknown mask kind {kind!r}")
    if valid_len is not None:
        mask = compose_padding(mask, valid_len)
    return mask


def dump_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if b else "0" for b in row) for row in np.asarray(mask))
