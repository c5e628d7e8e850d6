"""Timing harness for the search kernels."""
from __future__ import annotations

import time
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import _backend
from .embedding import SimilarityTensor
from .search import SearchConfig, n_combinations, select_prompts


def random_tensor(n_clips: int, n_prompts: int, n_advances: int, seed: int = 0,
                  diagonal_boost: float = 0.0) -> SimilarityTensor:
    """Uniform random similarities in [-1, 1].

    With no boost almost no clip clears lambda, so the per-clip search visits
    every budget: the worst case for timing. A positive ``diagonal_boost``
    raises self-similarities so that some clips stop early.
    """
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-1.0, 1.0, size=(n_clips, n_clips, n_prompts, n_advances))
    if diagonal_boost:
        idx = np.arange(n_clips)
        vals[idx, idx] += diagonal_boost * rng.random((n_clips, n_prompts, n_advances))
    return SimilarityTensor(np.clip(vals, -1.0, 1.0).astype(np.float32))


def time_search(tensor: SimilarityTensor, config: SearchConfig, backend: Optional[str] = None,
                repeats: int = 3) -> Dict:
    """Best-of-``repeats`` wall time of one select_prompts call."""
    times = []
    stats: dict = {}
    for _ in range(max(1, repeats)):
        stats = {}
        t0 = time.perf_counter()
        out = select_prompts(tensor, config, backend=backend, stats=stats)
        times.append(time.perf_counter() - t0)
    return {
        "backend": backend or _backend.DEFAULT,
        "n_clips": tensor.n_clips,
        "seconds": min(times),
        "evaluations": stats["evaluations"],
        "unique": sum(a.unique for a in out),
    }


def compare_backends(n_clips: int = 483, n_prompts: int = 10, alpha: int = 3, tau: int = 1,
                     repeats: int = 3, seed: int = 0, backends: Optional[Iterable[str]] = None) -> List[Dict]:
    tensor = random_tensor(n_clips, n_prompts, tau + 1, seed)
    cfg = SearchConfig(alpha=alpha, tau_max=tau)
    names = list(backends) if backends else sorted(_backend.BACKENDS)
    return [time_search(tensor, cfg, name, repeats) for name in names]


def work_scaling(sizes=(50, 100, 200, 400), n_prompts: int = 10, alpha: int = 3, tau: int = 0,
                 seed: int = 0, backend: Optional[str] = None, repeats: int = 1) -> List[Dict]:
    """Margin evaluations and wall time per N at fixed (P, alpha, tau).

    ``per_clip_work`` is evaluations / N; it stays constant when the search
    work is linear in N. Each evaluation itself scans the N competitors, so
    wall time grows roughly as N^2.
    """
    cfg = SearchConfig(alpha=alpha, tau_max=tau)
    rows = []
    for n in sizes:
        r = time_search(random_tensor(n, n_prompts, tau + 1, seed), cfg, backend, repeats)
        r["per_clip_work"] = r["evaluations"] / n
        r["combinations"] = n_combinations(n_prompts, alpha, tau)
        rows.append(r)
    return rows
