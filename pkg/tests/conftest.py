import itertools
from collections import OrderedDict

import numpy as np
import pytest

from uniqcap.embedding import SimilarityTensor


# ---------------------------------------------------------------- reference search

def naive_combinations(P, alpha, tau):
    """Every non-empty set of at most alpha (k, t) elements, in preference
    order: size, then max advance, then lexicographic (t, k)."""
    elems = [(k, t) for t in range(tau + 1) for k in range(P)]
    out = []
    for m in range(1, min(alpha, len(elems)) + 1):
        for c in itertools.combinations(elems, m):
            out.append(tuple(sorted(c, key=lambda kt: (kt[1], kt[0]))))
    out.sort(key=lambda c: (len(c), max(t for _, t in c), [(t, k) for k, t in c]))
    return out


def naive_sim(values, a, b, combo):
    acc = 0.0
    for k, t in combo:
        acc += float(values[a, b, k, t])
    return acc / len(combo)


def naive_margin(values, i, combo):
    n = values.shape[0]
    own = naive_sim(values, i, i, combo)
    comp = max(max(naive_sim(values, j, i, combo), naive_sim(values, i, j, combo))
               for j in range(n) if j != i)
    return own - comp


def naive_select(values, alpha=3, lam=0.1, tau_max=0, mode="per_clip"):
    """(combo, margin) per clip by literal enumeration."""
    n, _, P, n_adv = values.shape
    combos = naive_combinations(P, alpha, n_adv - 1)

    def best(i, budget):
        top, top_m = None, -np.inf
        for c in combos:
            if max(t for _, t in c) > budget:
                continue
            m = naive_margin(values, i, c)
            if m > top_m:
                top, top_m = c, m
        return top, top_m

    if mode == "per_clip":
        out = []
        for i in range(n):
            for budget in range(tau_max + 1):
                c, m = best(i, budget)
                if m > lam:
                    break
            out.append((c, m))
        return out
    for budget in range(tau_max + 1):
        out = [best(i, budget) for i in range(n)]
        if all(m > lam for _, m in out):
            break
    return out


def random_tensor(rng, n, P, n_adv, quantize=False):
    vals = rng.uniform(-1, 1, size=(n, n, P, n_adv))
    if quantize:
        # coarse grid values provoke exact ties
        vals = np.round(vals * 4) / 4
    return SimilarityTensor(vals.astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = OrderedDict()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "ran": False})
    if report.when == "call":
        entry["ran"] = True
        entry["passed"] &= report.passed
    elif report.failed:
        entry["ran"] = True
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e["passed"] and e["ran"] else ("FAIL" if e["ran"] else "SKIP")
        terminalreporter.write_line(f"criterion {number}: {status}  {e['title']}")
