"""Similarity oracles: file-backed, and a synthetic generator with planted
ground truth.

An oracle answers ``query(i, j, k, t)`` with the similarity between clip i
advanced by t and the caption of clip j (advanced by t) under prompt k, and
``caption(j, k, t)`` with that caption's text when it is known.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .embedding import ClipSet, PromptBank, SimilarityTensor, build_similarity_tensor, normalize
from .errors import FormatError, GenerationError, InvalidInputError
from .formats import read_tensor

ALL_SEPARABLE = "all_separable_at_t0"
REQUIRES_ADVANCE = "requires_advance"
CONTAINS_INSEPARABLE = "contains_inseparable"
PROFILES = (ALL_SEPARABLE, REQUIRES_ADVANCE, CONTAINS_INSEPARABLE)


@runtime_checkable
class SimilarityOracle(Protocol):
    def query(self, i: int, j: int, k: int, t: int) -> float: ...

    def caption(self, j: int, k: int, t: int) -> Optional[str]: ...


class TensorOracle:
    """Oracle backed by a stored similarity array and optional captions."""

    def __init__(self, values: np.ndarray, captions=None, clip_ids=None, prompts=None):
        self._values = np.array(values, dtype=np.float32)
        self._values.setflags(write=False)
        self._captions = captions
        n = self._values.shape[0]
        self.clip_ids = tuple(clip_ids) if clip_ids is not None else tuple(str(i) for i in range(n))
        self.prompts = tuple(prompts) if prompts is not None else None

    @property
    def shape(self):
        return self._values.shape

    def query(self, i, j, k, t) -> float:
        n, _, P, n_adv = self._values.shape
        if not (0 <= i < n and 0 <= j < n and 0 <= k < P and 0 <= t < n_adv):
            raise InvalidInputError(f"cell ({i}, {j}, {k}, {t}) outside oracle shape {self._values.shape}")
        return float(self._values[i, j, k, t])

    def caption(self, j, k, t) -> Optional[str]:
        if self._captions is None:
            return None
        return self._captions[j][k][t]

    def dense(self) -> np.ndarray:
        return self._values

    def caption_table(self):
        return self._captions


def oracle_from_files(tensor_path, sidecar_path=None) -> TensorOracle:
    tensor, meta = read_tensor(tensor_path, sidecar_path)
    return TensorOracle(tensor.values, meta.get("captions"), tensor.clip_ids, tensor.prompts)


def _unique_dot(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """x @ c.T in float64, evaluated once per distinct row pair so that
    identical inputs give bit-identical outputs."""
    ux, inv_x = np.unique(x, axis=0, return_inverse=True)
    uc, inv_c = np.unique(c, axis=0, return_inverse=True)
    prod = ux.astype(np.float64) @ uc.astype(np.float64).T
    return prod[np.ravel(inv_x)][:, np.ravel(inv_c)]


class SyntheticOracle(TensorOracle):
    """Similarities from explicit clip and caption embeddings."""

    def __init__(self, clip_embeddings, caption_embeddings, captions=None, clip_ids=None, prompts=None):
        x = np.asarray(clip_embeddings, dtype=np.float32)  # (N, T, dim)
        c = np.asarray(caption_embeddings, dtype=np.float32)  # (N, P, T, dim)
        n, P, n_adv, dim = c.shape
        vals = np.empty((n, n, P, n_adv), dtype=np.float32)
        for t in range(n_adv):
            dots = _unique_dot(x[:, t], c[:, :, t].reshape(n * P, dim))
            vals[:, :, :, t] = dots.reshape(n, n, P).astype(np.float32)
        super().__init__(vals, captions, clip_ids, prompts)
        self.caption_embeddings = c


@dataclass(frozen=True)
class SyntheticInstance:
    clips: ClipSet
    bank: PromptBank
    attribute_matrix: np.ndarray  # (N, P, tau+1) attribute value ids
    caption_embeddings: np.ndarray  # (N, P, tau+1, dim)
    captions: list
    ground_truth: tuple  # per clip: PromptCombination or None (inseparable)
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def oracle(self) -> SyntheticOracle:
        return SyntheticOracle(
            self.clips.embeddings, self.caption_embeddings, self.captions,
            self.clips.clip_ids, self.bank.prompts,
        )

    def tensor(self) -> SimilarityTensor:
        return build_similarity_tensor(self.clips, self.bank, self.oracle)

    def ground_truth_record(self) -> dict:
        rows = []
        for cid, gt in zip(self.clips.clip_ids, self.ground_truth):
            rows.append({
                "clip_id": cid,
                "separable": gt is not None,
                "elements": None if gt is None else [{"prompt_index": k, "t": t} for k, t in gt.elements],
            })
        return {"config": self.config, "seed": self.seed, "ground_truth": rows}


def default_bank(P: int) -> PromptBank:
    return PromptBank(tuple(f"prompt-{k}" for k in range(P)))


def _directions(rng, count: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((dim, count))
    if count <= dim:
        q, _ = np.linalg.qr(g)
        return q.T[:count]
    return g.T / np.linalg.norm(g, axis=0)[:, None]


def _draw(rng, n, P, n_adv, dim, profile, noise_scale):
    shared = max(1, n // 3)
    values = rng.integers(0, shared, size=(n, P, n_adv))
    weights = rng.uniform(0.5, 1.5, size=(n, P, n_adv))
    # planted distinguishing attribute: each clip gets a value no other clip has
    for t in range(n_adv):
        for j in range(n):
            values[j, rng.integers(P), t] = shared + j
    dup = n - 1
    dup_upto = 1 if profile == REQUIRES_ADVANCE else (n_adv if profile == CONTAINS_INSEPARABLE else 0)
    values[dup, :, :dup_upto] = values[0, :, :dup_upto]
    weights[dup, :, :dup_upto] = weights[0, :, :dup_upto]

    # one direction per distinct (k, t, value) actually used, plus the shared base
    keys = sorted({(k, t, int(values[j, k, t])) for j in range(n) for k in range(P) for t in range(n_adv)})
    dirs = _directions(rng, len(keys) + 1, dim)
    base, index = dirs[0], {key: q + 1 for q, key in enumerate(keys)}
    attr = np.empty((n, P, n_adv, dim))
    for j in range(n):
        for k in range(P):
            for t in range(n_adv):
                attr[j, k, t] = dirs[index[(k, t, int(values[j, k, t]))]]

    clip_emb = normalize(base + np.einsum("jkt,jktd->jtd", weights, attr))
    cap_raw = attr + 0.5 * base + noise_scale * rng.standard_normal(attr.shape)
    cap_raw[dup, :, :dup_upto] = cap_raw[0, :, :dup_upto]
    cap_emb = normalize(cap_raw)
    captions = [[[f"p{k}-t{t}-v{int(values[j, k, t])}" for t in range(n_adv)] for k in range(P)] for j in range(n)]
    return values, clip_emb, cap_emb, captions


def _ground_truth(tensor, profile, alpha, min_margin):
    """Label clips by brute-force search; None if the profile does not hold."""
    from .search import SearchConfig, best_margins, select_prompts

    n_adv = tensor.n_advances
    found = select_prompts(tensor, SearchConfig(alpha=alpha, lam=min_margin, tau_max=n_adv - 1))
    _, at_t0 = best_margins(tensor, alpha, 0)
    truth = []
    for a in found:
        if a.unique:
            truth.append(a.combination)
        elif a.margin <= 0.0:
            truth.append(None)
        else:
            return None  # ambiguous margin in (0, min_margin]
    if profile == ALL_SEPARABLE:
        ok = all(a.unique and a.advance_used == 0 for a in found)
    elif profile == REQUIRES_ADVANCE:
        ok = all(a.unique for a in found) and any(
            m <= 0.0 and a.advance_used >= 1 for a, m in zip(found, at_t0)
        )
    else:
        ok = any(g is None for g in truth)
    return tuple(truth) if ok else None


def synth_generate(
    n_clips: int,
    n_prompts: int,
    n_advances: int = 1,
    dim: int = 64,
    separability_profile: str = ALL_SEPARABLE,
    noise_scale: float = 0.0,
    seed: int = 0,
    *,
    alpha: int = 3,
    min_margin: float = 0.1,
    max_attempts: int = 64,
    bank: Optional[PromptBank] = None,
) -> SyntheticInstance:
    """Generate a set of confusable clips whose separability is known.

    Clip embeddings are a shared base direction plus weighted attribute
    directions, one per (prompt, advance); the caption of clip j under
    prompt k at advance t is that attribute direction plus a base component
    and noise. Every clip is planted with one attribute value no other clip
    shares. ``requires_advance`` makes the last clip an exact copy of clip 0
    at t=0; ``contains_inseparable`` makes it an exact copy at every
    advance. The requested profile is checked by exhaustive search with
    ``alpha`` and ``min_margin`` and the draw repeated (deterministically)
    until it holds.
    """
    if n_clips < 2 or n_prompts < 1 or n_advances < 1 or dim < 4:
        raise InvalidInputError("need n_clips >= 2, n_prompts >= 1, n_advances >= 1, dim >= 4")
    if separability_profile not in PROFILES:
        raise InvalidInputError(f"unknown separability profile {separability_profile!r}")
    if noise_scale < 0 or not math.isfinite(noise_scale):
        raise InvalidInputError("noise_scale must be finite and >= 0")
    if separability_profile == REQUIRES_ADVANCE and n_advances < 2:
        raise GenerationError("requires_advance needs at least one time advance (n_advances >= 2)")
    bank = bank or default_bank(n_prompts)
    if bank.P != n_prompts:
        raise InvalidInputError(f"bank has {bank.P} prompts, expected {n_prompts}")
    ids = tuple(f"clip{j}" for j in range(n_clips))
    config = {
        "n_clips": n_clips, "n_prompts": n_prompts, "n_advances": n_advances, "dim": dim,
        "separability_profile": separability_profile, "noise_scale": noise_scale,
        "alpha": alpha, "min_margin": min_margin,
    }
    for attempt in range(max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), attempt]))
        values, clip_emb, cap_emb, captions = _draw(
            rng, n_clips, n_prompts, n_advances, dim, separability_profile, noise_scale
        )
        clips = ClipSet.from_normalized(ids, clip_emb)
        oracle = SyntheticOracle(clip_emb, cap_emb, captions, ids, bank.prompts)
        tensor = build_similarity_tensor(clips, bank, oracle)
        truth = _ground_truth(tensor, separability_profile, alpha, min_margin)
        if truth is not None:
            return SyntheticInstance(
                clips, bank, values, cap_emb, captions, truth, int(seed),
                dict(config, attempt=attempt),
            )
    raise GenerationError(
        f"could not realise profile {separability_profile!r} for N={n_clips}, P={n_prompts}, "
        f"tau+1={n_advances}, dim={dim} in {max_attempts} attempts"
    )
