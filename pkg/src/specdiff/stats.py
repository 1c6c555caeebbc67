"""Deterministic keyed randomness and the statistical tests behind certification.

Randomness is counter-based rather than stateful: every draw is a pure
function of a key (seed, step, purpose) and an internal block counter, hashed
through BLAKE2b into 64-bit words.  A draw for engine step s is therefore
bitwise identical whether the step is reached by serial sampling or through a
speculative draft, and independent of worker count — the property the
engine's oracle-identity check relies on.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import kolmogorov

# Purpose tags keep the per-step streams for state noise, verification
# uniforms, chain initialisation and dataset draws disjoint.
PURPOSES = {"noise": 0, "verify": 1, "init": 2, "data": 3}

_INV_2_53 = 2.0 ** -53


@dataclass(frozen=True)
class RngKey:
    """Addressable randomness: one key, one reproducible stream."""

    seed: int
    step: int
    purpose: str

    def __post_init__(self) -> None:
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown rng purpose {self.purpose!r}")


def _words(key: RngKey, n: int) -> np.ndarray:
    """Return n uint64 words for the key, 8 per hash block."""
    purpose = PURPOSES[key.purpose]
    blocks = []
    for counter in range((n + 7) // 8):
        msg = struct.pack(
            "<QqBI", key.seed & (2**64 - 1), key.step, purpose, counter
        )
        blocks.append(hashlib.blake2b(msg, digest_size=64).digest())
    raw = b"".join(blocks)
    return np.frombuffer(raw, dtype="<u8")[:n]


def keyed_uniform(key: RngKey, n: int | None = None):
    """Uniform draws in [0, 1) with 53-bit resolution; scalar when n is None."""
    m = 1 if n is None else int(n)
    u = (_words(key, m) >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return float(u[0]) if n is None else u


def keyed_gaussian(key: RngKey, d: int) -> np.ndarray:
    """Standard normal d-vector; pure function of the key (Box-Muller)."""
    if d < 1:
        raise ValueError("d must be positive")
    m = ((d + 1) // 2) * 2
    u = keyed_uniform(key, m)
    u1 = u[0::2] + _INV_2_53  # keep log argument strictly positive
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(m)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:d]


def std_normal_cdf(z: float) -> float:
    """Phi(z) via erfc; absolute error well below 1e-9 on [-8, 8]."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def ks_test(samples: np.ndarray, cdf) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov test against a callable cdf.

    Returns (statistic, asymptotic p-value).  The statistic is the exact
    sup-distance of the empirical cdf; the p-value uses the Kolmogorov tail
    with the Stephens finite-n correction, accurate for n in the hundreds and
    above.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    f = np.asarray(cdf(x), dtype=np.float64)
    grid = np.arange(1, n + 1) / n
    d = float(max(np.max(grid - f), np.max(f - (grid - 1.0 / n))))
    en = math.sqrt(n)
    p = float(kolmogorov((en + 0.12 + 0.11 / en) * d))
    return d, min(max(p, 0.0), 1.0)


def _energy_statistic(dists: np.ndarray, mask_a: np.ndarray, row_sums: np.ndarray, total: float) -> float:
    """Energy statistic from a pooled distance matrix and an a-labels mask.

    One matvec per call: with v = D @ mask_a, the three pair sums S_aa,
    S_ab, S_bb all follow from v, the cached row sums and the grand total.
    Self-pairs are included in every mean (V-statistic convention), so
    identical samples give exactly 0.
    """
    na = int(mask_a.sum())
    nb = mask_a.size - na
    v = (dists @ mask_a).astype(np.float64)
    s_aa = float(mask_a @ v)
    s_ab = float(row_sums @ mask_a) - s_aa
    s_bb = total - 2.0 * s_ab - s_aa
    return 2.0 * s_ab / (na * nb) - s_aa / (na * na) - s_bb / (nb * nb)


def energy_distance_test(
    a: np.ndarray,
    b: np.ndarray,
    permutations: int = 200,
    seed: int = 0,
) -> tuple[float, float]:
    """Two-sample energy-distance test with a permutation p-value.

    Deterministic given the seed: permutation label assignments come from the
    keyed stream (purpose "data", step = permutation index).  p uses the
    add-one convention (obs counts as its own permutation), so p >= 1/(P+1).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    pool = np.concatenate([a, b], axis=0)
    n = pool.shape[0]
    na = a.shape[0]
    # float32 halves the O(n^2) matrix for big pools; its accumulation error
    # (~1e-5 of the statistic's scale) is invisible next to permutation noise.
    # Small pools stay float64 so identical samples give statistic 0 exactly.
    dtype = np.float32 if n > 4000 else np.float64
    dists = cdist(pool, pool).astype(dtype)
    row_sums = dists.sum(axis=1, dtype=np.float64)
    total = float(row_sums.sum())

    mask = np.zeros(n, dtype=dtype)
    mask[:na] = 1.0
    observed = _energy_statistic(dists, mask, row_sums, total)

    exceed = 0
    for p_idx in range(permutations):
        u = keyed_uniform(RngKey(seed, p_idx, "data"), n)
        order = np.argsort(u)
        mask_p = np.zeros(n, dtype=dtype)
        mask_p[order[:na]] = 1.0
        if _energy_statistic(dists, mask_p, row_sums, total) >= observed:
            exceed += 1
    p = (exceed + 1.0) / (permutations + 1.0)
    return observed, p
