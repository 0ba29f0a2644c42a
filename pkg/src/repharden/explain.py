"""Entry-importance ranking and minimal-subset explanations.

Importance of an entry is the drop in the predicted class's probability when
that entry alone is masked out. The minimal subset comes from greedy backward
elimination: keep masking the entry whose removal hurts the predicted class
least, and stop just before the argmax would flip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Classifier, softmax
from .reports import CATEGORIES, Report


@dataclass
class ExplanationRanking:
    """Entries ordered by importance, plus the argmax-preserving core."""

    ranking: list[tuple[str, int, float]]  # (category, entry index, importance)
    minimal_subset: set[tuple[str, int]]
    predicted_class: int


class _PoolForward:
    """Forward passes that re-pool one category at a time, caching the rest.

    Each category's sorted entry encodings are concatenated once, with the
    segment bounds of every entry recorded. A masked variant then excises the
    dropped segments and replays the same in-order accumulation, so re-pooling
    n entries costs O(n) array slicing instead of a from-scratch rebuild —
    and, because dropping elements from a sorted sequence leaves the order of
    the rest unchanged, every variant is bit-identical to pooling the kept
    entries directly.
    """

    def __init__(self, model: Classifier, r: Report):
        self.model = model
        self.entries = {c: list(r.categories[c]) for c in CATEGORIES}
        self._segments = {c: self._build_segments(c) for c in CATEGORIES}
        self.z = {c: self._block(c, None) for c in CATEGORIES}

    def _build_segments(self, cat: str):
        ents = self.entries[cat]
        order = sorted(range(len(ents)), key=ents.__getitem__)
        pairs = [self.model.encoder.sparse(ents[j]) for j in order]
        if pairs:
            idx = np.concatenate([p[0] for p in pairs])
            vals = np.concatenate([p[1] for p in pairs])
        else:
            idx = np.empty(0, dtype=np.int64)
            vals = np.empty(0, dtype=np.float64)
        lens = np.fromiter((len(p[0]) for p in pairs), dtype=np.int64, count=len(pairs))
        bounds = np.concatenate(([0], np.cumsum(lens)))
        pos = {raw: k for k, raw in enumerate(order)}
        return idx, vals, bounds, pos

    def _block(self, cat: str, drop: set[int] | None) -> np.ndarray:
        proj = self.model.params["proj"][CATEGORIES.index(cat)]
        kept = len(self.entries[cat]) - (len(drop) if drop else 0)
        pooled = np.zeros(self.model.encoder.hash_dim, dtype=np.float64)
        if kept <= 0:
            return pooled @ proj
        idx, vals, bounds, pos = self._segments[cat]
        if drop:
            pieces_i, pieces_v, cur = [], [], 0
            for k in sorted(pos[i] for i in drop):
                pieces_i.append(idx[cur : bounds[k]])
                pieces_v.append(vals[cur : bounds[k]])
                cur = bounds[k + 1]
            pieces_i.append(idx[cur:])
            pieces_v.append(vals[cur:])
            idx = np.concatenate(pieces_i)
            vals = np.concatenate(pieces_v)
        np.add.at(pooled, idx, vals)
        pooled /= kept
        return pooled @ proj

    def probs(self, masked: set[tuple[str, int]]) -> np.ndarray:
        """Probabilities with the given entry locations excluded."""
        by_cat: dict[str, set[int]] = {}
        for cat, i in masked:
            by_cat.setdefault(cat, set()).add(i)
        blocks = []
        for cat in CATEGORIES:
            drop = by_cat.get(cat)
            blocks.append(self._block(cat, drop) if drop else self.z[cat])
        p = self.model.params
        z = np.concatenate(blocks)
        h1 = np.maximum(z @ p["W1"] + p["b1"], 0.0)
        emb = np.maximum(h1 @ p["W2"] + p["b2"], 0.0)
        logits = emb @ p["W3"] + p["b3"]
        return softmax(logits)


def rank_entries(r: Report, model: Classifier) -> list[tuple[str, int, float]]:
    """All entry locations sorted by single-entry leave-one-out importance."""
    fwd = _PoolForward(model, r)
    base = fwd.probs(set())
    c = int(np.argmax(base))
    scored = []
    for cat, i in r.locations():
        drop = float(base[c] - fwd.probs({(cat, i)})[c])
        scored.append((cat, i, drop))
    scored.sort(key=lambda t: (-t[2], CATEGORIES.index(t[0]), t[1]))
    return scored


def explain(r: Report, model: Classifier) -> ExplanationRanking:
    """Rank entries and reduce the report to an argmax-preserving core."""
    fwd = _PoolForward(model, r)
    base = fwd.probs(set())
    c = int(np.argmax(base))
    ranking = rank_entries(r, model)

    remaining = set(r.locations())
    masked: set[tuple[str, int]] = set()
    while len(remaining) > 1:
        best_loc = None
        best_pc = -1.0
        for loc in sorted(remaining, key=lambda t: (CATEGORIES.index(t[0]), t[1])):
            probs = fwd.probs(masked | {loc})
            if int(np.argmax(probs)) != c:
                continue
            if probs[c] > best_pc:
                best_pc = probs[c]
                best_loc = loc
        if best_loc is None:  # every further removal would flip the class
            break
        masked.add(best_loc)
        remaining.remove(best_loc)
    return ExplanationRanking(ranking=ranking, minimal_subset=remaining, predicted_class=c)


def restrict_report(r: Report, subset: set[tuple[str, int]]) -> Report:
    """Copy of r containing only the entries at the given locations."""
    cats = {c: [] for c in CATEGORIES}
    for cat in CATEGORIES:
        for i, e in enumerate(r.categories[cat]):
            if (cat, i) in subset:
                cats[cat].append(e)
    return Report(cats, label=r.label, sample_id=r.sample_id)
