"""Shared visual/text embedding data model and similarity tensor assembly.

All embeddings are L2-normalised once at construction, so cosine similarity
reduces to a dot product. Dot products are accumulated in float64 and stored
as float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BuildError, InvalidEmbeddingError, InvalidInputError

DEFAULT_DIM = 256
EXACT = "exact"
SURROGATE = "surrogate"
PROVENANCES = (EXACT, SURROGATE)


def normalize(values) -> np.ndarray:
    """Normalise vectors along the last axis, returning float32.

    Raises InvalidEmbeddingError if any vector has zero (or non-finite) norm.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise InvalidEmbeddingError("embedding must have at least one dimension")
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
        raise InvalidEmbeddingError("cannot normalise a zero or non-finite vector")
    return (arr / norms).astype(np.float32)


def _readonly(arr: np.ndarray) -> np.ndarray:
    # copy anything the caller could still write to, then freeze our copy
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, order="C", copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.values)
        if vec.ndim != 1:
            raise InvalidEmbeddingError(f"embedding must be 1-D, got shape {vec.shape}")
        object.__setattr__(self, "values", _readonly(normalize(vec)))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def cosine(a, b) -> float:
    """Cosine similarity of two embeddings (or raw vectors)."""
    va = a.values if isinstance(a, Embedding) else normalize(a)
    vb = b.values if isinstance(b, Embedding) else normalize(b)
    if va.shape != vb.shape:
        raise InvalidInputError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    dot = np.dot(va.astype(np.float64), vb.astype(np.float64))
    return float(np.float32(dot))


@dataclass(frozen=True)
class ClipSet:
    """N clips, each with embeddings at advances 0..max_advance.

    ``embeddings`` has shape (N, max_advance + 1, dim).
    """

    clip_ids: tuple
    embeddings: np.ndarray

    def __post_init__(self):
        ids = tuple(str(c) for c in self.clip_ids)
        if len(set(ids)) != len(ids):
            raise InvalidInputError("clip_ids must be pairwise distinct")
        emb = np.asarray(self.embeddings)
        if emb.ndim != 3:
            raise InvalidInputError(f"clip embeddings must be (N, tau+1, dim), got {emb.shape}")
        if emb.shape[0] != len(ids):
            raise InvalidInputError(f"{len(ids)} clip ids but {emb.shape[0]} embedding rows")
        if emb.shape[1] < 1:
            raise InvalidInputError("every clip needs at least the base (t=0) embedding")
        object.__setattr__(self, "clip_ids", ids)
        object.__setattr__(self, "embeddings", _readonly(normalize(emb)))

    @property
    def n_clips(self) -> int:
        return len(self.clip_ids)

    @property
    def max_advance(self) -> int:
        return self.embeddings.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    @classmethod
    def from_normalized(cls, clip_ids, embeddings) -> "ClipSet":
        """Wrap already unit-norm float32 embeddings without re-normalising,
        so stored bits are preserved exactly."""
        emb = np.asarray(embeddings, dtype=np.float32)
        norms = np.linalg.norm(emb.astype(np.float64), axis=-1)
        if emb.size and np.any(np.abs(norms - 1.0) >= 1e-5):
            raise InvalidEmbeddingError("embeddings are not unit norm")
        obj = cls.__new__(cls)
        ids = tuple(str(c) for c in clip_ids)
        if len(set(ids)) != len(ids):
            raise InvalidInputError("clip_ids must be pairwise distinct")
        if emb.ndim != 3 or emb.shape[0] != len(ids) or emb.shape[1] < 1:
            raise InvalidInputError(f"bad clip embedding shape {emb.shape}")
        object.__setattr__(obj, "clip_ids", ids)
        object.__setattr__(obj, "embeddings", _readonly(emb))
        return obj

    def embedding(self, i: int, t: int = 0) -> Embedding:
        return Embedding(self.embeddings[i, t])


@dataclass(frozen=True)
class PromptBank:
    prompts: tuple

    def __post_init__(self):
        prompts = tuple(self.prompts)
        if not prompts:
            raise InvalidInputError("prompt bank must contain at least one prompt")
        if any(not isinstance(p, str) or not p for p in prompts):
            raise InvalidInputError("prompts must be non-empty strings")
        if len(set(prompts)) != len(prompts):
            raise InvalidInputError("prompts must be pairwise distinct")
        object.__setattr__(self, "prompts", prompts)

    @property
    def P(self) -> int:
        return len(self.prompts)

    def __len__(self):
        return len(self.prompts)

    def __getitem__(self, k):
        return self.prompts[k]


@dataclass(frozen=True)
class SimilarityTensor:
    """Values s(v_i, v_j, p_k) at advance t, indexed ``values[i, j, k, t]``.

    ``values[i, j, k, t]`` is the similarity between clip i (advanced by t)
    and the caption of clip j (advanced by t) produced under prompt k.
    """

    values: np.ndarray
    provenance: str = EXACT
    clip_ids: Optional[tuple] = field(default=None)
    prompts: Optional[tuple] = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 4 or vals.shape[0] != vals.shape[1]:
            raise InvalidInputError(f"tensor must have shape (N, N, P, tau+1), got {vals.shape}")
        if self.provenance not in PROVENANCES:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("similarity tensor contains non-finite values")
        if self.provenance == EXACT and np.any(np.abs(vals) > 1.0 + 1e-5):
            raise InvalidInputError("exact similarities must lie in [-1, 1]")
        if self.clip_ids is not None:
            ids = tuple(self.clip_ids)
            if len(ids) != vals.shape[0]:
                raise InvalidInputError("clip_ids length does not match tensor N")
            object.__setattr__(self, "clip_ids", ids)
        if self.prompts is not None:
            prompts = tuple(self.prompts)
            if len(prompts) != vals.shape[2]:
                raise InvalidInputError("prompts length does not match tensor P")
            object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "values", _readonly(vals))

    @property
    def n_clips(self) -> int:
        return self.values.shape[0]

    @property
    def n_prompts(self) -> int:
        return self.values.shape[2]

    @property
    def n_advances(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self):
        return self.values.shape

    def ids(self) -> tuple:
        if self.clip_ids is not None:
            return self.clip_ids
        return tuple(str(i) for i in range(self.n_clips))

    def subset(self, indices: Sequence[int]) -> "SimilarityTensor":
        """Restrict to the clips at ``indices`` (rows and columns)."""
        idx = np.asarray(indices, dtype=np.intp)
        vals = self.values[np.ix_(idx, idx)]
        ids = None if self.clip_ids is None else tuple(self.clip_ids[i] for i in idx)
        return SimilarityTensor(vals, self.provenance, ids, self.prompts)


def build_similarity_tensor(clips: ClipSet, bank: PromptBank, oracle) -> SimilarityTensor:
    """Query the oracle for every (i, j, k, t) cell.

    Oracles that expose ``dense()`` returning the full (N, N, P, tau+1)
    array are used in one shot; ``dense()`` must agree with ``query`` cell
    for cell.
    """
    n, n_adv, P = clips.n_clips, clips.max_advance + 1, bank.P
    dense = getattr(oracle, "dense", None)
    if dense is not None:
        vals = np.asarray(dense(), dtype=np.float32)
        if vals.shape != (n, n, P, n_adv):
            raise InvalidInputError(
                f"oracle covers shape {vals.shape}, expected {(n, n, P, n_adv)}"
            )
    else:
        vals = np.empty((n, n, P, n_adv), dtype=np.float32)
        for i in range(n):
            for j in range(n):
                for k in range(P):
                    for t in range(n_adv):
                        try:
                            vals[i, j, k, t] = oracle.query(i, j, k, t)
                        except Exception as exc:
                            raise BuildError((i, j, k, t), exc) from exc
    return SimilarityTensor(vals, EXACT, clips.clip_ids, bank.prompts)
