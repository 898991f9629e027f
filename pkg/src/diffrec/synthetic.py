"""Synthetic MovieLens-shaped rating logs.

Users hold a latent taste vector that drifts linearly between two anchors
over their activity window. Each interaction picks an item from a softmax
over taste affinity plus item popularity; the rating is a noisy function
of the affinity. Useful when real logs are unavailable and for tests.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def generate(n_users: int = 600, n_items: int = 400, mean_degree: float = 40.0, dim: int = 8,
             drift: float = 0.6, temperature: float = 0.7, seed: int = 0, t0: int = 956_703_932,
             span: int = 3 * 365 * 86400):
    """Returns arrays (user, item, rating, timestamp), sorted by timestamp."""
    rng = np.random.default_rng(seed)
    items = rng.standard_normal((n_items, dim)) / np.sqrt(dim)
    pop = rng.standard_normal(n_items) * 0.8
    out_u, out_i, out_r, out_t = [], [], [], []
    degrees = np.clip(rng.lognormal(np.log(mean_degree) - 0.3, 0.75, n_users).astype(int), 5, n_items // 2)
    for u in range(n_users):
        start = rng.uniform(0, 1) * 0.7
        length = rng.uniform(0.05, 1.0 - start)
        p0 = rng.standard_normal(dim)
        p1 = (1 - drift) * p0 + drift * rng.standard_normal(dim)
        m = degrees[u]
        times = np.sort(rng.uniform(start, start + length, m))
        seen = np.zeros(n_items, dtype=bool)
        for k, tt in enumerate(times):
            frac = k / max(m - 1, 1)
            taste = (1 - frac) * p0 + frac * p1
            aff = items @ taste
            logits = (aff + pop) / temperature
            logits[seen] = -np.inf
            p = np.exp(logits - logits.max())
            i = rng.choice(n_items, p=p / p.sum())
            seen[i] = True
            r = int(np.clip(np.rint(3.4 + 1.6 * aff[i] + rng.normal(0, 0.8)), 1, 5))
            out_u.append(u)
            out_i.append(i)
            out_r.append(r)
            out_t.append(t0 + int(tt * span))
    u, i, r, t = map(np.asarray, (out_u, out_i, out_r, out_t))
    order = np.argsort(t, kind="stable")
    return u[order], i[order], r[order], t[order]


def write_ratings(path, n_users: int = 600, n_items: int = 400, seed: int = 0, fmt: str = "tsv", **kw) -> Path:
    """Writes a log in ``dat`` (``u::i::r::ts``) or ``tsv`` format; ids start at 1."""
    u, i, r, t = generate(n_users, n_items, seed=seed, **kw)
    sep = "::" if fmt == "dat" else "\t"
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in zip(u.tolist(), i.tolist(), r.tolist(), t.tolist()):
            fh.write(sep.join(str(x) for x in (row[0] + 1, row[1] + 1, row[2], row[3])) + "\n")
    return path
