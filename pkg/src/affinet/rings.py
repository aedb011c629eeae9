"""Ring-variance penalty for 3x3 spatial filters.

Cells of a filter are grouped into concentric "rings" by quantizing their
radius from the center cell; the penalty pulls every weight in a ring toward
the ring's own template value (the mean for squared distance, the median for
absolute distance). Filters whose rings are constant are symmetric under 90
degree rotation and axis flips, so driving the penalty down drives filters
toward rotation-tolerant circular profiles.

Templates never need their own optimizer steps: for both supported distances
the minimizing template has a closed form and is recomputed on every call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RingPattern:
    """Assignment of filter cells (m, n) in [-r, r]^2 to ring ids.

    Ring ids are contiguous from 0. For the built-in kinds the center cell is
    always alone in ring 0.
    """

    kind: str
    size: int
    ring_of: dict = field(compare=False)

    def __post_init__(self):
        ids = sorted(set(self.ring_of.values()))
        if ids != list(range(len(ids))):
            raise ValueError(f"ring ids must be contiguous from 0, got {ids}")

    @property
    def n_rings(self):
        return max(self.ring_of.values()) + 1

    def cells(self, ring):
        return sorted(mn for mn, r in self.ring_of.items() if r == ring)

    def flat_index(self, m, n):
        half = self.size // 2
        return (m + half) * self.size + (n + half)

    def noncenter_groups(self):
        """Per ring, the flat indices of its cells with the center cell removed.

        Groups with fewer than 2 cells cannot deviate from their own template
        and are dropped.
        """
        groups = []
        for ring in range(self.n_rings):
            idx = [self.flat_index(m, n) for (m, n) in self.cells(ring) if (m, n) != (0, 0)]
            if len(idx) >= 2:
                groups.append(np.asarray(idx))
        return groups


def build_hash_pattern(kind, size=3):
    """Ring pattern from a radius hash: floor or ceil of sqrt(m^2 + n^2)."""
    if size % 2 == 0:
        raise ValueError(f"pattern size must be odd, got {size}")
    quantize = {"floor": math.floor, "ceil": math.ceil}.get(kind)
    if quantize is None:
        raise ValueError(f"unknown pattern kind {kind!r}")
    half = size // 2
    raw = {
        (m, n): quantize(math.sqrt(m * m + n * n))
        for m in range(-half, half + 1)
        for n in range(-half, half + 1)
    }
    renumber = {h: i for i, h in enumerate(sorted(set(raw.values())))}
    return RingPattern(kind=kind, size=size, ring_of={mn: renumber[h] for mn, h in raw.items()})


class FilterBank:
    """All 3x3 filter slices enrolled in the penalty, viewing live parameters.

    Entries are (layer_id, weights) pairs where weights is the (out, in, 3, 3)
    array owned by a conv layer; mutating a slice obtained from the bank
    mutates the network parameter. Slice order is row-major over (out, in)
    within each entry, entries in the order given.
    """

    def __init__(self, entries):
        if not entries:
            raise ValueError("filter bank is empty")
        for layer_id, w in entries:
            if w.ndim != 4 or w.shape[2:] != (3, 3):
                raise ValueError(f"{layer_id}: expected (out,in,3,3) weights, got {w.shape}")
        self.entries = list(entries)

    @property
    def n_slices(self):
        return sum(w.shape[0] * w.shape[1] for _, w in self.entries)

    def __len__(self):
        return self.n_slices

    def iter_slices(self):
        """Yields (layer_id, out_channel, in_channel, 2d view) in bank order."""
        for layer_id, w in self.entries:
            for o in range(w.shape[0]):
                for c in range(w.shape[1]):
                    yield layer_id, o, c, w[o, c]

    def slice(self, k):
        """2D view of the k-th slice in bank order."""
        for _, w in self.entries:
            n = w.shape[0] * w.shape[1]
            if k < n:
                return w.reshape(n, 3, 3)[k]
            k -= n
        raise IndexError("slice index out of range")


def bank_from_slices(slices):
    """Bank over standalone 3x3 arrays (tests and ad-hoc analysis)."""
    return FilterBank([(f"slice{i}", s[None, None]) for i, s in enumerate(slices)])


def _l2_terms(flat, groups):
    """Sum of squared ring deviations and the matching gradient, per entry."""
    total = 0.0
    grad = np.zeros_like(flat)
    for idx in groups:
        sub = flat[:, idx]
        dev = sub - sub.mean(axis=1, keepdims=True)
        total += float(np.vdot(dev, dev))
        grad[:, idx] = 2.0 * dev
    return total, grad


def _l1_terms(flat, groups):
    total = 0.0
    grad = np.zeros_like(flat)
    for idx in groups:
        sub = flat[:, idx]
        dev = sub - np.median(sub, axis=1, keepdims=True)
        total += float(np.abs(dev).sum())
        grad[:, idx] = np.sign(dev)
    return total, grad


def r2_general(bank, pattern, distance="l2"):
    """Penalty value and gradient under the chosen ring distance.

    Value is the mean over slices of the per-slice ring deviation sum; the
    center cell is excluded. Templates are the ring mean for "l2" and the
    ring median for "l1" (their closed-form minimizers); the gradient through
    the template vanishes in both cases, leaving 2*dev (resp. sign(dev))
    scaled by 1/n_slices. Gradients are returned as one array per bank entry,
    shaped like that entry's weights.
    """
    if distance not in ("l2", "l1"):
        raise ValueError(f"unknown distance {distance!r}")
    terms = _l2_terms if distance == "l2" else _l1_terms
    groups = pattern.noncenter_groups()
    n_slices = bank.n_slices
    total = 0.0
    grads = []
    for _, w in bank.entries:
        if w.shape[2] != pattern.size:
            raise ValueError(f"pattern size {pattern.size} does not match {w.shape}")
        flat = w.reshape(-1, pattern.size * pattern.size)
        t, g = terms(flat, groups)
        total += t
        g /= n_slices
        grads.append(g.reshape(w.shape))
    return total / n_slices, grads


def r2_value(bank, pattern):
    """Mean over slices of the squared deviation from ring means."""
    value, _ = r2_general(bank, pattern, "l2")
    return value


def r2_grad(bank, pattern):
    """Gradient of r2_value, one array per bank entry."""
    _, grads = r2_general(bank, pattern, "l2")
    return grads


def per_entry_values(bank, pattern):
    """Mean per-slice deviation of each bank entry alone (for filter reports)."""
    groups = pattern.noncenter_groups()
    out = []
    for layer_id, w in bank.entries:
        flat = w.reshape(-1, pattern.size * pattern.size)
        t, _ = _l2_terms(flat, groups)
        out.append((layer_id, t / (w.shape[0] * w.shape[1])))
    return out
