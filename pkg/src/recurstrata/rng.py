"""Seeded random streams and the distribution primitives used everywhere else.

All samplers take an explicit :class:`RngStream`; nothing in the package ever
touches global RNG state. Streams are keyed by (seed, stream_id) through
PCG64 + SeedSequence spawn keys, so substreams are statistically independent
and runs are bit-reproducible for a fixed seed.
"""
from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtri, ndtri_exp

__all__ = [
    "RngStream",
    "NumericalError",
    "derive_seed",
    "sample_truncated_normal",
    "sample_inverse_gamma",
    "sample_beta",
    "sample_gamma",
    "sample_categorical",
    "sample_mvn",
    "normal_logpdf",
    "normal_logcdf",
    "normal_logsf",
]

_LOG_2PI = np.log(2.0 * np.pi)

# standardized truncation bounds beyond this many sd are handled by the
# tail algorithms instead of plain inverse-CDF
_TAIL_Z = 4.0


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot produce a valid result."""


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    ``stream_id`` may be an int or a tuple of ints; distinct ids under the
    same seed give independent substreams. ``substream(*key)`` derives a
    child stream by extending the id tuple.
    """

    __slots__ = ("seed", "stream_id", "generator")

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        if isinstance(stream_id, (int, np.integer)):
            key: tuple[int, ...] = (int(stream_id),)
        else:
            key = tuple(int(k) for k in stream_id)
        self.seed = int(seed)
        self.stream_id = key
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def substream(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(int(k) for k in key))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def derive_seed(seed: int, *key: int) -> int:
    """Deterministically derive a 64-bit child seed from (seed, key).

    Used where an integer seed (not a stream) must be handed to a component
    that builds its own streams, e.g. one fit per replicate or per ρ value.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def normal_logpdf(x, mean=0.0, sd=1.0):
    """Log density of N(mean, sd^2), elementwise."""
    sd = np.asarray(sd, dtype=float)
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * (_LOG_2PI + z * z) - np.log(sd)


def normal_logcdf(x, mean=0.0, sd=1.0):
    """log P(X <= x) for X ~ N(mean, sd^2); stable far into both tails."""
    z = (np.asarray(x, dtype=float) - mean) / np.asarray(sd, dtype=float)
    return log_ndtr(z)


def normal_logsf(x, mean=0.0, sd=1.0):
    """log P(X > x) for X ~ N(mean, sd^2); stable far into both tails."""
    z = (np.asarray(x, dtype=float) - mean) / np.asarray(sd, dtype=float)
    return log_ndtr(-z)


def _robert_tail(a: np.ndarray, rng: RngStream) -> np.ndarray:
    """Sample Z ~ N(0,1) conditional on Z >= a (a >= _TAIL_Z), by
    translated-exponential rejection."""
    gen = rng.generator
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    todo = np.arange(a.size)
    while todo.size:
        at = a[todo]
        lt = lam[todo]
        x = at - np.log1p(-gen.random(todo.size)) / lt
        accept = gen.random(todo.size) <= np.exp(-0.5 * (x - lt) ** 2)
        out[todo[accept]] = x[accept]
        todo = todo[~accept]
    return out


def _tail_two_sided(a: np.ndarray, b: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of Z ~ N(0,1) on [a, b] with a >= _TAIL_Z, in
    log-survival space (exact arbitrarily far into the tail)."""
    lsa = log_ndtr(-a)
    lsb = log_ndtr(-b)
    # S_x = S(a) * (u + (1-u) * S(b)/S(a)), interpolated in log space
    r = np.exp(lsb - lsa)
    ls_x = lsa + np.log(u + (1.0 - u) * r)
    return -ndtri_exp(ls_x)


def sample_truncated_normal(mean, sd, lower, upper, rng: RngStream, size=None):
    """Draw from N(mean, sd^2) truncated to the open interval (lower, upper).

    Bounds may be -inf/+inf. Inverse-CDF in the central regime; when the
    whole truncation region lies beyond 4 sd, a tail-robust algorithm is
    used instead (rejection for one-sided regions, log-space inverse-CDF for
    two-sided ones). Every returned value is strictly inside the bounds.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    if np.any(~(lower < upper)):
        raise ValueError("lower must be strictly less than upper")

    shape = np.broadcast_shapes(mean.shape, sd.shape, lower.shape, upper.shape)
    if size is not None:
        shape = tuple(np.atleast_1d(size)) if np.ndim(size) else (int(size),)
        shape = np.broadcast_shapes(shape, mean.shape, sd.shape, lower.shape, upper.shape)
    mean, sd, lower, upper = (np.broadcast_to(x, shape) for x in (mean, sd, lower, upper))

    a = np.where(np.isneginf(lower), -np.inf, (lower - mean) / sd)
    b = np.where(np.isposinf(upper), np.inf, (upper - mean) / sd)

    flat_a = a.ravel()
    flat_b = b.ravel()
    n = flat_a.size
    z = np.empty(n)

    right = flat_a >= _TAIL_Z           # region in the far right tail
    left = flat_b <= -_TAIL_Z           # far left tail (mirror)
    central = ~(right | left)

    gen = rng.generator
    if np.any(central):
        ac = flat_a[central]
        bc = flat_b[central]
        fa = np.where(np.isneginf(ac), 0.0, _ndtr_clipped(ac))
        fb = np.where(np.isposinf(bc), 1.0, _ndtr_clipped(bc))
        u = gen.random(int(central.sum()))
        p = fa + u * (fb - fa)
        z[central] = ndtri(np.clip(p, 1e-320, 1.0 - 1e-16))
    if np.any(right):
        ar = flat_a[right]
        br = flat_b[right]
        one_sided = np.isposinf(br)
        zr = np.empty(ar.size)
        if np.any(one_sided):
            zr[one_sided] = _robert_tail(ar[one_sided], rng)
        if np.any(~one_sided):
            u = gen.random(int((~one_sided).sum()))
            zr[~one_sided] = _tail_two_sided(ar[~one_sided], br[~one_sided], u)
        z[right] = zr
    if np.any(left):
        al = flat_a[left]
        bl = flat_b[left]
        one_sided = np.isneginf(al)
        zl = np.empty(al.size)
        if np.any(one_sided):
            zl[one_sided] = -_robert_tail(-bl[one_sided], rng)
        if np.any(~one_sided):
            u = gen.random(int((~one_sided).sum()))
            zl[~one_sided] = -_tail_two_sided(-bl[~one_sided], -al[~one_sided], u)
        z[left] = zl

    x = mean + sd * z.reshape(shape)
    # enforce the open interval (float rounding can land on a bound)
    lo_hit = x <= lower
    if np.any(lo_hit):
        x = np.where(lo_hit, np.nextafter(lower, np.inf), x)
    hi_hit = x >= upper
    if np.any(hi_hit):
        x = np.where(hi_hit, np.nextafter(upper, -np.inf), x)
    if shape == ():
        return float(x)
    return x


def _ndtr_clipped(z):
    # ndtr via log_ndtr keeps the z < -38 corner from returning exactly 0
    # for finite bounds where the other bound is far away
    return np.exp(log_ndtr(z))


def sample_inverse_gamma(shape, rate, rng: RngStream, size=None):
    """Inverse-gamma draw(s) with mean rate/(shape-1): density
    x^(-shape-1) exp(-rate/x)."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("inverse-gamma shape and rate must be positive")
    g = rng.generator.gamma(shape, 1.0, size=size)
    if np.any(g == 0):
        raise NumericalError("underflow in inverse-gamma sampling")
    return rate / g


def sample_beta(a, b, rng: RngStream, size=None):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("beta parameters must be positive")
    return rng.generator.beta(a, b, size=size)


def sample_gamma(shape, rate, rng: RngStream, size=None):
    """Gamma draw(s) with mean shape/rate."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("gamma shape and rate must be positive")
    return rng.generator.gamma(shape, 1.0 / rate, size=size)


def sample_categorical(weights, rng: RngStream, size=None):
    """Index draw(s) proportional to ``weights`` (need not be normalized)."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1:
        raise ValueError("weights must be one-dimensional")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    cdf = np.cumsum(w)
    u = rng.generator.random(size) * total
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, w.size - 1)


def sample_mvn(mean, cov, rng: RngStream, size=None):
    """Multivariate normal draw(s) via Cholesky; one diagonal-jitter retry."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = mean.shape[-1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(cov + 1e-10 * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance not SPD after jitter") from exc
    shp = (d,) if size is None else (tuple(np.atleast_1d(size)) + (d,))
    z = rng.generator.standard_normal(shp)
    return mean + z @ chol.T
