"""Trial-level embedding fusion.

A trial carries three vectors: the (averaged) enrollment speaker embedding,
the test speaker embedding and the test countermeasure embedding. Three
fusion modes turn them into a model input:

* ``concat``: flat concatenation, length d+b+q (DNN models).
* ``stack1d``: zero-pad to the common length D = max(d,b,q) and stack as
  three channels, shape 3xD (1D CNN models).
* ``circ2d``: circulant matrix of each padded vector, stacked as three
  channels, shape 3xDxD (2D CNN models).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONCAT = "concat"
STACK1D = "stack1d"
CIRC2D = "circ2d"

MODES = (CONCAT, STACK1D, CIRC2D)


def _as_embedding(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class TrialEmbeddings:
    """Per-trial embeddings; enroll_spk is the mean over enrollment utterances."""

    enroll_spk: np.ndarray
    test_spk: np.ndarray
    test_cm: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "enroll_spk", _as_embedding(self.enroll_spk, "enroll_spk"))
        object.__setattr__(self, "test_spk", _as_embedding(self.test_spk, "test_spk"))
        object.__setattr__(self, "test_cm", _as_embedding(self.test_cm, "test_cm"))


@dataclass(frozen=True)
class FusedInput:
    mode: str
    tensor: np.ndarray


def concat(te: TrialEmbeddings) -> FusedInput:
    """[enroll_spk | test_spk | test_cm], order fixed."""
    return FusedInput(CONCAT, np.concatenate([te.enroll_spk, te.test_spk, te.test_cm]))


def pad_to_common(te: TrialEmbeddings) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad each vector with zeros to D = max of the three lengths."""
    d = max(te.enroll_spk.size, te.test_spk.size, te.test_cm.size)
    return tuple(
        np.pad(v, (0, d - v.size)) for v in (te.enroll_spk, te.test_spk, te.test_cm)
    )


def circulant(v: np.ndarray) -> np.ndarray:
    """DxD matrix whose row i is v rotated i elements to the right.

    Entry [i, j] = v[(j - i) mod D], so every row and column holds each
    element of v exactly once.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"circulant needs a non-empty vector, got shape {v.shape}")
    n = v.size
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    return v[idx]


def stack_1d(te: TrialEmbeddings) -> FusedInput:
    return FusedInput(STACK1D, np.stack(pad_to_common(te)))


def stack_circulant_2d(te: TrialEmbeddings) -> FusedInput:
    return FusedInput(CIRC2D, np.stack([circulant(v) for v in pad_to_common(te)]))


_FUSE = {CONCAT: concat, STACK1D: stack_1d, CIRC2D: stack_circulant_2d}


def fuse(te: TrialEmbeddings, mode: str) -> FusedInput:
    if mode not in _FUSE:
        raise ValueError(f"unknown fusion mode {mode!r}, expected one of {MODES}")
    return _FUSE[mode](te)


def fuse_batch(tes: list[TrialEmbeddings], mode: str) -> np.ndarray:
    """Fuse a list of trials into one batch array (leading batch axis)."""
    if not tes:
        raise ValueError("cannot fuse an empty batch")
    return np.stack([fuse(te, mode).tensor for te in tes])
