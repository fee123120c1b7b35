"""Shared brute-force oracles and the finite-difference gradient harness.

These stay deliberately naive and independent of the implementation paths
they check.
"""

import math
from itertools import product

import numpy as np


def conv3d_oracle(x, w, b):
    """Direct nested-loop valid cross-correlation, float64 accumulation."""
    bs, cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    out = np.zeros((bs, cout, d - kd + 1, h - kh + 1, wd - kw + 1), dtype=np.float64)
    for n in range(bs):
        for o in range(cout):
            for z in range(out.shape[2]):
                for y in range(out.shape[3]):
                    for xx in range(out.shape[4]):
                        acc = 0.0
                        for c in range(cin):
                            for i in range(kd):
                                for j in range(kh):
                                    for k in range(kw):
                                        acc += float(x[n, c, z + i, y + j, xx + k]) * float(w[o, c, i, j, k])
                        out[n, o, z, y, xx] = acc + float(b[o])
    return out


def cross_entropy_oracle(probs, labels, floor=1e-12):
    """Literal triple sum over segments, voxels, classes."""
    s_count = probs.shape[0]
    c_count = probs.shape[1]
    spatial = probs.shape[2:]
    v_count = int(np.prod(spatial))
    total = 0.0
    for s in range(s_count):
        for coords in product(*(range(n) for n in spatial)):
            for c in range(c_count):
                if labels[(s,) + coords] == c:
                    total += math.log(max(float(probs[(s, c) + coords]), floor))
    return -total / (s_count * v_count)


def finite_diff_grads(f, arrays, h=1e-4):
    """Central-difference gradients of scalar f() w.r.t. each array, in place.

    f must recompute the scalar from the arrays' current contents.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_grad_error(analytic, numeric):
    """Max absolute deviation normalized by the numeric gradient scale."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-10)
    return np.abs(analytic - numeric).max() / scale


def flood_fill_components(mask):
    """Set-based 6-connected component extraction (brute-force reference)."""
    remaining = {tuple(v) for v in np.argwhere(mask)}
    comps = []
    while remaining:
        seed = remaining.pop()
        comp = {seed}
        frontier = [seed]
        while frontier:
            cx, cy, cz = frontier.pop()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nb = (cx + dx, cy + dy, cz + dz)
                if nb in remaining:
                    remaining.remove(nb)
                    comp.add(nb)
                    frontier.append(nb)
        comps.append(comp)
    return comps


def pairwise_distances(a_coords, b_coords, spacing=(1.0, 1.0, 1.0)):
    """Full O(n^2) Euclidean distance matrix in mm."""
    sp = np.asarray(spacing, dtype=np.float64)
    a = a_coords.astype(np.float64) * sp
    b = b_coords.astype(np.float64) * sp
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def directed_p95_oracle(a_coords, b_coords, spacing=(1.0, 1.0, 1.0)):
    """95th-percentile (nearest-rank) of min distances from a to b."""
    dmin = pairwise_distances(a_coords, b_coords, spacing).min(axis=1)
    asc = np.sort(dmin)
    idx = math.ceil(0.95 * len(asc)) - 1
    return float(asc[idx])


def asd_oracle(a_coords, b_coords, spacing=(1.0, 1.0, 1.0)):
    dmin = pairwise_distances(a_coords, b_coords, spacing).min(axis=1)
    return float(dmin.mean())
