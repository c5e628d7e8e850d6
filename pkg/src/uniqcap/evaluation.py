"""Retrieval metrics over clip/caption sets: R@K in both directions,
Avg R@1 and Cycle@1.

``sim[i, j]`` is the similarity between video i and caption j. Rankings
break ties by index order: a competitor tying with the true match counts
against it when it has the smaller index. Cycle@1 requires a strict maximum
in both directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .embedding import SimilarityTensor
from .errors import InvalidInputError

TEXT_TO_VIDEO = "text_to_video"
VIDEO_TO_TEXT = "video_to_text"
MACRO = "macro"
MICRO = "micro"
KS = (1, 2, 3)

# sizes of the ten timeloop sets: 63 clips, sizes 3..10
TIMELOOP_SET_SIZES = (3, 3, 4, 5, 6, 7, 7, 9, 9, 10)


def _check_square(sim):
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim < 2 or sim.shape[-1] != sim.shape[-2]:
        raise InvalidInputError(f"retrieval matrix must be square, got {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise InvalidInputError("retrieval matrix has non-finite entries")
    return sim


def _ranks(sim: np.ndarray, direction: str) -> np.ndarray:
    """0-based rank of the true match for every query; works on stacks of
    matrices (..., n, n)."""
    n = sim.shape[-1]
    diag = np.diagonal(sim, axis1=-2, axis2=-1)
    idx = np.arange(n)
    if direction == TEXT_TO_VIDEO:
        # query caption j, candidates are videos i (column j)
        col = diag[..., None, :]
        before = idx[:, None] < idx[None, :]
        return (sim > col).sum(-2) + ((sim == col) & before).sum(-2)
    if direction == VIDEO_TO_TEXT:
        row = diag[..., :, None]
        before = idx[None, :] < idx[:, None]
        return (sim > row).sum(-1) + ((sim == row) & before).sum(-1)
    raise InvalidInputError(f"unknown direction {direction!r}")


def recall_at_k(sim, direction: str, k: int) -> float:
    sim = _check_square(sim)
    n = sim.shape[-1]
    if not 1 <= k <= n:
        raise InvalidInputError(f"k must be in [1, {n}], got {k}")
    return float(np.mean(_ranks(sim, direction) < k) * 100.0)


def _cycle_hits(v2t: np.ndarray, t2v: np.ndarray) -> np.ndarray:
    n = v2t.shape[-1]
    off = ~np.eye(n, dtype=bool)
    d1 = np.diagonal(v2t, axis1=-2, axis2=-1)
    d2 = np.diagonal(t2v, axis1=-2, axis2=-1)
    row_ok = ~((v2t >= d1[..., :, None]) & off).any(-1)
    col_ok = ~((t2v >= d2[..., None, :]) & off).any(-2)
    return row_ok & col_ok


def cycle_at_1(sim, t2v=None) -> float:
    """Percentage of i where video i strictly retrieves caption i and
    caption i strictly retrieves video i.

    ``t2v`` optionally supplies a separate matrix for the caption-to-video
    direction (as in a chance retriever that ranks each direction
    independently); by default both directions read ``sim``.
    """
    sim = _check_square(sim)
    other = sim if t2v is None else _check_square(t2v)
    if other.shape != sim.shape:
        raise InvalidInputError("direction matrices differ in shape")
    return float(np.mean(_cycle_hits(sim, other)) * 100.0)


def retrieval_matrix(tensor: SimilarityTensor, assignments) -> np.ndarray:
    """sim[i, j] = mean over clip j's combination elements (k, t) of
    tensor[i, j, k, t]."""
    n = tensor.n_clips
    if len(assignments) != n:
        raise InvalidInputError(f"{len(assignments)} assignments for {n} clips")
    vals = tensor.values
    sim = np.empty((n, n))
    for j, a in enumerate(assignments):
        combo = a.combination if hasattr(a, "combination") else a
        elems = combo.elements
        for k, t in elems:
            if k >= tensor.n_prompts or t >= tensor.n_advances:
                raise InvalidInputError(f"element (k={k}, t={t}) outside tensor")
        acc = vals[:, j, elems[0][0], elems[0][1]].astype(np.float64)
        for k, t in elems[1:]:
            acc = acc + vals[:, j, k, t].astype(np.float64)
        sim[:, j] = acc / float(len(elems))
    return sim


@dataclass
class MetricReport:
    t2v_r1: float
    t2v_r2: float
    t2v_r3: float
    v2t_r1: float
    v2t_r2: float
    v2t_r3: float
    avg_r1: float
    cycle1: float
    n_sets: int = 1
    n_clips: int = 0
    averaging: str = MACRO
    per_set: List[dict] = field(default_factory=list)

    FIELDS = ("t2v_r1", "t2v_r2", "t2v_r3", "v2t_r1", "v2t_r2", "v2t_r3", "avg_r1", "cycle1")

    def to_dict(self, per_set: bool = True) -> dict:
        out = {f: round(float(getattr(self, f)), 1) for f in self.FIELDS}
        out.update(n_sets=self.n_sets, n_clips=self.n_clips, averaging=self.averaging)
        if per_set and self.per_set:
            out["per_set"] = [
                {key: (round(v, 1) if isinstance(v, float) else v) for key, v in row.items()}
                for row in self.per_set
            ]
        return out


def _set_hits(v2t: np.ndarray, t2v: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Per-query hit indicators (..., n) for every metric. Recall@k with
    k >= n is a hit for every query."""
    t2v = v2t if t2v is None else t2v
    rt = _ranks(t2v, TEXT_TO_VIDEO)
    rv = _ranks(v2t, VIDEO_TO_TEXT)
    hits = {}
    for k in KS:
        hits[f"t2v_r{k}"] = rt < k
        hits[f"v2t_r{k}"] = rv < k
    hits["cycle1"] = _cycle_hits(v2t, t2v)
    return hits


def _aggregate(per_set_hits: List[Dict[str, np.ndarray]], averaging: str, per_set_rows=None) -> MetricReport:
    if averaging not in (MACRO, MICRO):
        raise InvalidInputError(f"averaging must be {MACRO!r} or {MICRO!r}")
    metrics = {}
    names = [f"t2v_r{k}" for k in KS] + [f"v2t_r{k}" for k in KS] + ["cycle1"]
    for name in names:
        if averaging == MACRO:
            metrics[name] = float(np.mean([h[name].mean() for h in per_set_hits]) * 100.0)
        else:
            total = sum(h[name].sum() for h in per_set_hits)
            count = sum(h[name].size for h in per_set_hits)
            metrics[name] = float(total / count * 100.0)
    metrics["avg_r1"] = (metrics["t2v_r1"] + metrics["v2t_r1"]) / 2.0
    n_clips = sum(h["cycle1"].size for h in per_set_hits)
    return MetricReport(**metrics, n_sets=len(per_set_hits), n_clips=int(n_clips),
                        averaging=averaging, per_set=per_set_rows or [])


def _resolve_sets(tensor: SimilarityTensor, sets) -> List[List[int]]:
    n = tensor.n_clips
    if sets is None:
        return [list(range(n))]
    ids = {cid: i for i, cid in enumerate(tensor.ids())}
    resolved = []
    for s in sets:
        row = []
        for c in s:
            if isinstance(c, (int, np.integer)) and not isinstance(c, bool):
                row.append(int(c))
            elif c in ids:
                row.append(ids[c])
            else:
                raise InvalidInputError(f"unknown clip {c!r} in evaluation set")
        resolved.append(row)
    flat = sorted(i for s in resolved for i in s)
    if flat != list(range(n)):
        raise InvalidInputError("evaluation sets must partition all clips exactly once")
    if any(len(s) < 1 for s in resolved):
        raise InvalidInputError("evaluation sets must be non-empty")
    return resolved


def evaluate_assignments(tensor: SimilarityTensor, assignments, sets=None,
                         averaging: str = MACRO) -> MetricReport:
    """Metrics per evaluation set, averaged across sets.

    ``assignments`` is a sequence aligned with the tensor's clips or a
    mapping from clip id to assignment. ``sets`` lists clip indices or ids
    per set (default: one set of all clips). Macro averaging weights every
    set equally; micro pools all queries.
    """
    ids = tensor.ids()
    if isinstance(assignments, Mapping):
        missing = [cid for cid in ids if cid not in assignments]
        if missing:
            raise InvalidInputError(f"no assignment for clips {missing[:5]}")
        ordered = [assignments[cid] for cid in ids]
    else:
        ordered = list(assignments)
        if len(ordered) != len(ids):
            raise InvalidInputError(f"{len(ordered)} assignments for {len(ids)} clips")
    groups = _resolve_sets(tensor, sets)
    hits, rows = [], []
    for g in groups:
        sub = tensor.subset(g)
        sim = retrieval_matrix(sub, [ordered[i] for i in g])
        h = _set_hits(sim)
        hits.append(h)
        row = {name: float(v.mean() * 100.0) for name, v in h.items()}
        row["avg_r1"] = (row["t2v_r1"] + row["v2t_r1"]) / 2.0
        row["clips"] = [ids[i] for i in g]
        rows.append(row)
    return _aggregate(hits, averaging, rows)


def chance_baseline(set_sizes: Sequence[int], trials: int = 10_000, seed: int = 0,
                    averaging: str = MICRO, shared_matrix: bool = False) -> MetricReport:
    """Monte-Carlo metrics for a retriever with no information.

    Each trial draws uniform random similarities for every set. By default
    the two retrieval directions rank with independent draws, so a Cycle@1
    hit needs two independent rank-1 events (1/n^2 per clip); with
    ``shared_matrix=True`` both directions read one matrix.
    """
    if trials < 1 or not set_sizes or min(set_sizes) < 1:
        raise InvalidInputError("need trials >= 1 and positive set sizes")
    rng = np.random.default_rng(seed)
    per_size = {}
    for n in sorted(set(set_sizes)):
        reps = trials * list(set_sizes).count(n)
        v2t = rng.random((reps, n, n))
        t2v = v2t if shared_matrix else rng.random((reps, n, n))
        per_size[n] = _set_hits(v2t, t2v)
    if averaging == MICRO:
        report = _aggregate(list(per_size.values()), MICRO)
    else:
        # every set weighted equally, i.e. each size by its multiplicity
        report = _aggregate([per_size[n] for n in set_sizes], MACRO)
    report.n_sets = len(set_sizes)
    report.n_clips = int(sum(set_sizes))
    return report
