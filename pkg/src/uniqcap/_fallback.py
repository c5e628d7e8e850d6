"""Pure numpy implementation of the search kernel.

Used when the compiled ``_kernels`` extension is unavailable (or when
``UNIQCAP_BACKEND=python``). Results are bit-identical to the compiled
kernel: the same float64 sums are formed in the same order.
"""
import numpy as np


def _means(arr, elems, sizes):
    m = int(sizes[0])
    acc = arr[elems[:, 0]]
    for q in range(1, m):
        acc = acc + arr[elems[:, q]]
    return acc / float(m)


def _group_bounds(sizes):
    # combination tables are ordered by size first, so equal sizes are contiguous
    cuts = np.flatnonzero(np.diff(sizes)) + 1
    return np.concatenate(([0], cuts, [len(sizes)]))


def search_clips(rows, cols, elems, sizes, clips):
    bounds = _group_bounds(np.asarray(sizes))
    out_idx = np.empty(len(clips), dtype=np.int64)
    out_margin = np.empty(len(clips), dtype=np.float64)
    for q, i in enumerate(clips):
        margins = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if lo == hi:
                continue
            sr = _means(rows[i], elems[lo:hi], sizes[lo:hi])
            sc = _means(cols[i], elems[lo:hi], sizes[lo:hi])
            own = sr[:, i].copy()
            sr[:, i] = -np.inf
            sc[:, i] = -np.inf
            margins.append(own - np.maximum(sr.max(axis=1), sc.max(axis=1)))
        margins = np.concatenate(margins)
        best = int(np.argmax(margins))
        out_idx[q] = best
        out_margin[q] = margins[best]
    return out_idx, out_margin, len(clips) * len(sizes)
