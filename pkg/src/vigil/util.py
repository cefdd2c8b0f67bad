"""Seeded RNG derivation and deterministic parallel mapping."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def derive_rng(seed, *words):
    """Derive an independent generator from a base seed plus integer tags.

    The same (seed, words) always yields the same stream, on any platform,
    so distinct consumers (init, per-epoch shuffles, per-clip synthesis)
    never share or reorder draws.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(w) & 0xFFFFFFFFFFFFFFFF for w in words]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def pmap(fn, items, threads=1):
    """Map fn over items, preserving input order in the result list.

    With threads > 1 the work fans out over a thread pool (numpy releases
    the GIL inside BLAS); results are still collected in input order, so
    any reduction over them is independent of the worker count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
