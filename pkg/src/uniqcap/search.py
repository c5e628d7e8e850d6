"""Uniqueness-margin search over (prompt, time-advance) combinations.

For clip i and combination C, the similarity between clip a and the caption
of clip b is the mean of the tensor cells ``s[a, b, k, t]`` over (k, t) in C.
The margin of C for clip i is its self-similarity minus the strongest
competitor in either direction (clip i vs other captions, other clips vs
caption i). A positive margin means clip i and its caption are mutual,
strict nearest neighbours.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np

from . import _backend
from .embedding import SimilarityTensor
from .errors import (
    CaptionUnavailableError,
    InvalidCombinationError,
    InvalidInputError,
    UndefinedMarginError,
)

PER_CLIP = "per_clip"
UNIFORM = "uniform"
MODES = (PER_CLIP, UNIFORM)


@dataclass(frozen=True, order=False)
class PromptCombination:
    """A set of (prompt index, advance) pairs, stored sorted by (t, k)."""

    elements: tuple

    def __post_init__(self):
        elems = tuple((int(k), int(t)) for k, t in self.elements)
        if not elems:
            raise InvalidCombinationError("a combination needs at least one element")
        if any(k < 0 or t < 0 for k, t in elems):
            raise InvalidCombinationError(f"negative index in {elems}")
        if len(set(elems)) != len(elems):
            raise InvalidCombinationError(f"duplicate elements in {elems}")
        object.__setattr__(self, "elements", tuple(sorted(elems, key=lambda kt: (kt[1], kt[0]))))

    @property
    def size(self) -> int:
        return len(self.elements)

    @property
    def max_t(self) -> int:
        return max(t for _, t in self.elements)

    def tie_key(self):
        """Preference order among equal margins: fewer elements, earlier
        maximum advance, then lexicographic (t, k)."""
        return (self.size, self.max_t, tuple((t, k) for k, t in self.elements))

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)


@dataclass(frozen=True)
class SearchConfig:
    alpha: int = 3
    lam: float = 0.1
    tau_max: int = 0
    mode: str = PER_CLIP

    def __post_init__(self):
        if int(self.alpha) < 1:
            raise InvalidInputError("alpha must be >= 1")
        if int(self.tau_max) < 0:
            raise InvalidInputError("tau_max must be >= 0")
        if not np.isfinite(self.lam):
            raise InvalidInputError("lambda must be finite")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class PromptAssignment:
    clip_id: str
    combination: PromptCombination
    margin: float
    unique: bool
    advance_used: int
    caption_elements: Optional[tuple] = field(default=None)

    def to_record(self, prompts: Optional[Sequence[str]] = None, caption: Optional[str] = None) -> dict:
        """Line-delimited output record for this assignment."""
        rec = {
            "clip_id": self.clip_id,
            "elements": [
                {
                    "prompt_index": k,
                    "prompt": prompts[k] if prompts is not None else None,
                    "t": t,
                }
                for k, t in self.combination.elements
            ],
            "margin": round(float(self.margin), 6),
            "unique": bool(self.unique),
            "advance_used": self.advance_used,
        }
        if caption is not None:
            rec["caption"] = caption
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "PromptAssignment":
        combo = PromptCombination(tuple((e["prompt_index"], e["t"]) for e in rec["elements"]))
        return cls(
            clip_id=str(rec["clip_id"]),
            combination=combo,
            margin=float(rec["margin"]),
            unique=bool(rec["unique"]),
            advance_used=int(rec.get("advance_used", combo.max_t)),
        )


def n_combinations(P: int, alpha: int, tau: int) -> int:
    from math import comb

    n_elem = P * (tau + 1)
    return sum(comb(n_elem, m) for m in range(1, alpha + 1))


def enumerate_combinations(P: int, alpha: int, tau: int) -> List[PromptCombination]:
    """All combinations of 1..alpha elements from {(k, t): k < P, t <= tau},
    ordered by size, then lexicographically by their (t, k) sequence."""
    if P < 1:
        raise InvalidInputError("prompt bank must be non-empty")
    pool = [(k, t) for t in range(tau + 1) for k in range(P)]
    out = []
    for m in range(1, min(alpha, len(pool)) + 1):
        out.extend(PromptCombination(c) for c in itertools.combinations(pool, m))
    return out


@dataclass(frozen=True)
class _Table:
    combos: tuple  # PromptCombination in tie-break order
    elems: np.ndarray  # (C, alpha) flattened element ids e = t * P + k, padded with 0
    sizes: np.ndarray
    max_t: np.ndarray


@lru_cache(maxsize=64)
def _table(P: int, alpha: int, tau: int) -> _Table:
    combos = sorted(enumerate_combinations(P, alpha, tau), key=PromptCombination.tie_key)
    width = max(c.size for c in combos)
    elems = np.zeros((len(combos), width), dtype=np.intc)
    for row, c in enumerate(combos):
        elems[row, : c.size] = [t * P + k for k, t in c.elements]
    sizes = np.array([c.size for c in combos], dtype=np.intc)
    max_t = np.array([c.max_t for c in combos], dtype=np.intc)
    return _Table(tuple(combos), elems, sizes, max_t)


def _check_combo(tensor: SimilarityTensor, combo: PromptCombination):
    for k, t in combo.elements:
        if k >= tensor.n_prompts or t >= tensor.n_advances:
            raise InvalidCombinationError(
                f"element (k={k}, t={t}) outside tensor with P={tensor.n_prompts}, "
                f"tau+1={tensor.n_advances}"
            )


def combo_similarity(tensor: SimilarityTensor, i: int, j: int, combo: PromptCombination) -> float:
    """Mean similarity between clip i and the caption of clip j over the
    combination's (prompt, advance) elements."""
    _check_combo(tensor, combo)
    vals = tensor.values
    acc = None
    for k, t in combo.elements:
        x = float(vals[i, j, k, t])
        acc = x if acc is None else acc + x
    return acc / float(combo.size)


def _competitor_max(tensor, i, combo):
    n = tensor.n_clips
    if n < 2:
        raise UndefinedMarginError(f"margin needs at least two clips, got N={n}")
    return max(
        max(combo_similarity(tensor, j, i, combo) for j in range(n) if j != i),
        max(combo_similarity(tensor, i, j, combo) for j in range(n) if j != i),
    )


def margin(tensor: SimilarityTensor, i: int, combo: PromptCombination) -> float:
    comp = _competitor_max(tensor, i, combo)
    return combo_similarity(tensor, i, i, combo) - comp


def is_unique(tensor: SimilarityTensor, i: int, combo: PromptCombination) -> bool:
    """Direct strict check: clip i is closer to its caption than to any other
    caption, and its caption is closer to it than to any other clip."""
    n = tensor.n_clips
    own = combo_similarity(tensor, i, i, combo)
    for j in range(n):
        if j == i:
            continue
        if not own > combo_similarity(tensor, i, j, combo):
            return False
        if not own > combo_similarity(tensor, j, i, combo):
            return False
    return True


def verify_uniqueness(tensor: SimilarityTensor, assignments: Sequence[PromptAssignment]) -> List[bool]:
    if len(assignments) != tensor.n_clips:
        raise InvalidInputError(
            f"{len(assignments)} assignments for {tensor.n_clips} clips"
        )
    return [is_unique(tensor, i, a.combination) for i, a in enumerate(assignments)]


def _layouts(tensor: SimilarityTensor):
    n, _, P, n_adv = tensor.shape
    flat = tensor.values.astype(np.float64).transpose(0, 1, 3, 2).reshape(n, n, n_adv * P)
    rows = np.ascontiguousarray(flat.transpose(0, 2, 1))  # rows[i, e, j] = s(i, j, e)
    cols = np.ascontiguousarray(flat.transpose(1, 2, 0))  # cols[i, e, j] = s(j, i, e)
    return rows, cols


class _Searcher:
    """Holds the float64 layouts of one tensor and runs budgeted searches."""

    def __init__(self, tensor: SimilarityTensor, alpha: int, backend=None, workers: int = 1):
        if tensor.n_clips < 2:
            raise UndefinedMarginError(f"margin needs at least two clips, got N={tensor.n_clips}")
        self.tensor = tensor
        self.alpha = alpha
        self.kernel = _backend.get(backend)
        self.workers = max(1, int(workers))
        self.rows, self.cols = _layouts(tensor)
        self.table = _table(tensor.n_prompts, alpha, tensor.n_advances - 1)
        self.evaluations = 0

    def run(self, budget: int, clips: np.ndarray):
        """Best combination index (into ``self.table.combos``) and margin for
        each clip, restricted to combinations with max advance <= budget."""
        sel = np.flatnonzero(self.table.max_t <= budget)
        elems = np.ascontiguousarray(self.table.elems[sel])
        sizes = np.ascontiguousarray(self.table.sizes[sel])
        clips = np.ascontiguousarray(clips, dtype=np.int_)
        if self.workers == 1 or len(clips) < 2 * self.workers:
            idx, marg, evals = self.kernel(self.rows, self.cols, elems, sizes, clips)
        else:
            chunks = np.array_split(clips, self.workers)
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(
                    lambda ch: self.kernel(self.rows, self.cols, elems, sizes, np.ascontiguousarray(ch)),
                    chunks,
                ))
            idx = np.concatenate([p[0] for p in parts])
            marg = np.concatenate([p[1] for p in parts])
            evals = sum(p[2] for p in parts)
        self.evaluations += int(evals)
        return sel[idx], marg


def best_margins(tensor: SimilarityTensor, alpha: int, budget: int, backend=None):
    """Per-clip best combination and margin at a fixed advance budget."""
    s = _Searcher(tensor, alpha, backend)
    idx, marg = s.run(budget, np.arange(tensor.n_clips))
    return [s.table.combos[c] for c in idx], marg


def select_prompts(
    tensor: SimilarityTensor,
    config: SearchConfig,
    *,
    backend: Optional[str] = None,
    workers: int = 1,
    stats: Optional[dict] = None,
) -> List[PromptAssignment]:
    """Choose a max-margin combination for every clip.

    In per_clip mode each clip's advance budget grows from 0 until its best
    margin exceeds ``config.lam`` or ``config.tau_max`` is reached. In
    uniform mode the budget grows for all clips together and stops once
    every clip is unique. Clips never exceeding lambda get their best
    combination at the final budget with ``unique=False``.
    """
    if config.tau_max > tensor.n_advances - 1:
        raise InvalidInputError(
            f"tau_max={config.tau_max} exceeds tensor advances (tau+1={tensor.n_advances})"
        )
    s = _Searcher(tensor, config.alpha, backend, workers)
    n = tensor.n_clips
    chosen = np.full(n, -1, dtype=np.int64)
    margins = np.full(n, -np.inf)
    budgets = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for budget in range(config.tau_max + 1):
        idx, marg = s.run(budget, active)
        chosen[active] = idx
        margins[active] = marg
        budgets[active] = budget
        done = marg > config.lam
        if config.mode == PER_CLIP:
            active = active[~done]
            if len(active) == 0:
                break
        elif done.all():
            break
        # uniform mode re-searches every clip at the next budget
    if stats is not None:
        stats["evaluations"] = s.evaluations
        stats["budgets"] = budgets.tolist()

    ids = tensor.ids()
    out = []
    for i in range(n):
        combo = s.table.combos[chosen[i]]
        m = float(margins[i])
        out.append(PromptAssignment(ids[i], combo, m, m > config.lam, combo.max_t))
    return out


def all_margins(tensor: SimilarityTensor, i: int, combos: Sequence[PromptCombination]) -> np.ndarray:
    """Margin of clip i under every combination (vectorised, same arithmetic
    as the search kernels)."""
    if tensor.n_clips < 2:
        raise UndefinedMarginError("margin needs at least two clips")
    rows, cols = _layouts(tensor)
    P = tensor.n_prompts
    out = np.empty(len(combos))
    for q, c in enumerate(combos):
        _check_combo(tensor, c)
        es = [t * P + k for k, t in c.elements]
        sr = rows[i, es[0]].copy()
        sc = cols[i, es[0]].copy()
        for e in es[1:]:
            sr = sr + rows[i, e]
            sc = sc + cols[i, e]
        sr = sr / float(c.size)
        sc = sc / float(c.size)
        own = sr[i]
        sr[i] = sc[i] = -np.inf
        out[q] = own - max(sr.max(), sc.max())
    return out


def decision_gaps(tensor: SimilarityTensor, config: SearchConfig) -> np.ndarray:
    """Per clip, the smallest perturbation margin of the search decisions.

    At every budget the search visits, the accept/advance decision is stable
    while the best margin moves by less than ``|best - lam|``; at the final
    budget the chosen combination is also stable while no margin moves by
    more than half the gap to the runner-up. The gap is the minimum of these
    quantities. Perturbing every tensor cell by at most eps changes each
    margin by at most 2 * eps, so clips whose gap exceeds 4 * eps keep their
    assignment under such a perturbation; a gap of 0 marks an exact tie.
    """
    stats: dict = {}
    select_prompts(tensor, config, stats=stats)
    table = _table(tensor.n_prompts, config.alpha, tensor.n_advances - 1)
    gaps = np.full(tensor.n_clips, np.inf)
    for i, final in enumerate(stats["budgets"]):
        for budget in range(final + 1):
            combos = [c for c, mt in zip(table.combos, table.max_t) if mt <= budget]
            m = np.sort(all_margins(tensor, i, combos))[::-1]
            gap = abs(m[0] - config.lam)
            if budget == final and len(m) > 1:
                gap = min(gap, m[0] - m[1])
            gaps[i] = min(gaps[i], gap)
    return gaps


def assemble_caption(assignment: PromptAssignment, oracle, clip_index: Optional[int] = None) -> str:
    """Join element captions: ", " within an advance, " then " across advances.

    ``clip_index`` defaults to the position of ``assignment.clip_id`` in
    ``oracle.clip_ids``.
    """
    if clip_index is None:
        clip_index = list(oracle.clip_ids).index(assignment.clip_id)
    groups = {}
    for k, t in assignment.combination.elements:
        text = oracle.caption(clip_index, k, t)
        if text is None:
            raise CaptionUnavailableError(
                f"no caption for clip {assignment.clip_id} (k={k}, t={t})"
            )
        groups.setdefault(t, []).append(text)
    return " then ".join(", ".join(groups[t]) for t in sorted(groups))
