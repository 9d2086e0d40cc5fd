"""Counter-based deterministic randomness for the coding path.

Everything the decoder must regenerate bit-exactly (candidate streams,
permutation plans, per-block seeds) is derived here from 64-bit keys via a
splitmix64-style finalizer.  Candidate k of stream s is a pure function of
(s, k), so any element is computable in O(1) without generating its
predecessors, and parallel consumers never share mutable state.

Training / inference noise does NOT go through this module; only quantities
that define bitstream semantics do.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def mix64(x):
    """splitmix64 finalizer; accepts scalars or uint64 arrays."""
    with np.errstate(over="ignore"):  # wraparound is the algorithm
        z = (np.asarray(x, dtype=_U64) + _GOLDEN)
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def derive_key(*parts) -> int:
    """Fold integer parts into one 64-bit key, order-sensitive.

    Used for per-block seeds: derive_key(global_seed, level, row, ordinal).
    """
    h = _U64(0)
    for p in parts:
        h = mix64(h ^ _U64(int(p) & 0xFFFFFFFFFFFFFFFF))
    return int(h)


def uniform01(key, counters):
    """Open-interval (0,1) f64 uniforms at the given uint64 counters."""
    bits = mix64(_U64(key) ^ mix64(np.asarray(counters, dtype=_U64)))
    # 53 mantissa bits, shifted into (0,1): never returns 0.0 or 1.0
    return (bits >> _U64(11)).astype(np.float64) * 2.0 ** -53 + 2.0 ** -54


# Wichura's PPND16 rational approximation of the standard normal inverse CDF
# (abs. error ~1e-16).  Self-hosted so candidate streams do not depend on the
# installed scipy version.
_PA = [3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
       1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
       3.3430575583588128105e4, 2.5090809287301226727e3]
_PB = [1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
       2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
       5.2264952788528545610e3]
_PC = [1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
       3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
       2.27238449892691845833e-2, 7.74545014278341407640e-4]
_PD = [1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
       1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
       1.05075007164441684324e-9]
_PE = [6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
       2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
       2.71155556874348757815e-5, 2.01033439929228813265e-7]
_PF = [1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
       7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
       2.04426310338993978564e-15]


def _ratpoly(coef_num, coef_den, r):
    num = np.full_like(r, coef_num[7])
    den = np.full_like(r, coef_den[7])
    for i in range(6, -1, -1):
        num = num * r + coef_num[i]
        den = den * r + coef_den[i]
    return num / den


def normal_icdf(p):
    """Standard normal quantile function, elementwise on f64 arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    out = np.empty_like(p)

    central = np.abs(q) <= 0.425
    if np.any(central):
        r = 0.180625 - q[central] * q[central]
        out[central] = q[central] * _ratpoly(_PA, _PB, r)

    tail = ~central
    if np.any(tail):
        qt = q[tail]
        r = np.where(qt < 0, p[tail], 1.0 - p[tail])
        r = np.sqrt(-np.log(r))
        near = r <= 5.0
        val = np.empty_like(r)
        val[near] = _ratpoly(_PC, _PD, r[near] - 1.6)
        val[~near] = _ratpoly(_PE, _PF, r[~near] - 5.0)
        out[tail] = np.where(qt < 0, -val, val)
    return out


def standard_normals(key, counters):
    """Deterministic N(0,1) draws at the given counters (inverse-CDF)."""
    return normal_icdf(uniform01(key, counters))


def _bounded_uints(key, counters, span: int) -> np.ndarray:
    """Uniform ints in [0, span) at the given counters, exactly unbiased.

    Rejection on the top sliver of the 64-bit range; rejected lanes redraw
    at counter + stride so the result stays a pure function of (key, counter).
    """
    limit = (1 << 64) - ((1 << 64) % span)  # largest multiple of span
    ctr = np.asarray(counters, dtype=_U64).copy()
    bits = mix64(_U64(key) ^ mix64(ctr))
    stride = _U64(0x5851F42D4C957F2D)
    while limit < (1 << 64):
        bad = bits >= _U64(limit)
        if not np.any(bad):
            break
        ctr[bad] += stride
        bits[bad] = mix64(_U64(key) ^ mix64(ctr[bad]))
    return (bits % _U64(span)).astype(np.int64)


def column_permutations(rows: int, cols: int, key) -> np.ndarray:
    """(rows, cols) array whose every column is an independent permutation.

    Vectorized Fisher-Yates across columns, driven by the counter stream, so
    encoder and decoder agree regardless of numpy version.
    """
    perm = np.tile(np.arange(rows, dtype=np.int64)[:, None], (1, cols))
    col = np.arange(cols)
    ctr = 0
    for i in range(rows - 1, 0, -1):
        j = _bounded_uints(key, np.arange(ctr, ctr + cols), i + 1)
        ctr += cols
        pi, pj = perm[i, col], perm[j, col]
        perm[i, col] = pj
        perm[j, col] = pi
    return perm


def permutation(n: int, key) -> np.ndarray:
    """Deterministic permutation of range(n) for the given key."""
    return column_permutations(n, 1, key)[:, 0]
