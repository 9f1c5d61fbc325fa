"""Per-example clipping, split Gaussian noising, and Renyi-DP accounting.

The mechanism being accounted is the subsampled Gaussian: every record of the
pooled dataset enters a round's batch independently with probability p, each
selected example's gradient is clipped to l2 norm C (so the sum has
sensitivity C), and the sum is noised with std C*sigma before the aggregator
divides by the realized batch size.

In the distributed protocol the noise is split: participant h adds variance
(|B_h|/|B|)*(C*sigma)^2, so the aggregate of all local contributions carries
exactly (C*sigma)^2 -- the same distribution as a single central draw.

Accounting composes per-step Renyi divergences epsilon(alpha) over a grid of
orders and converts to (epsilon, delta)-DP via
epsilon + log(1/delta)/(alpha - 1), minimized over the grid.

The per-step values use the stable closed forms for the sampled Gaussian
mechanism: a binomial sum for integer alpha and the erfc-split series for
fractional alpha, both evaluated in log space.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Prng, gaussian

__all__ = [
    "DpConfig",
    "PrivacyLedger",
    "default_alpha_grid",
    "default_delta",
    "clip",
    "local_noise_and_sum",
    "poisson_sample",
    "rdp_step",
    "rdp_to_dp",
]


def default_alpha_grid() -> tuple[float, ...]:
    """Integer orders 2..64 plus a few fractional points below and between."""
    return (1.25, 1.5, 1.75, 2.25, 2.5, 3.5) + tuple(float(a) for a in range(2, 65))


def default_delta(dataset_size: int) -> float:
    """min(1e-5, 1/(1.1*N)): delta stays below both 1e-5 and 1/N."""
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")
    return min(1e-5, 1.0 / (1.1 * dataset_size))


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float
    noise_multiplier: float
    target_epsilon: float
    target_delta: float
    sampling_rate: float = 1.0
    alpha_grid: tuple[float, ...] = field(default_factory=default_alpha_grid)

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if not self.target_epsilon > 0:
            raise ValueError("target_epsilon must be > 0")
        if not 0 < self.target_delta < 1:
            raise ValueError("target_delta must be in (0, 1)")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must be in (0, 1]")
        if len(self.alpha_grid) == 0 or any(a <= 1 for a in self.alpha_grid):
            raise ValueError("alpha_grid must be non-empty with every order > 1")


# ---------------------------------------------------------------------------
# Gradient-side primitives
# ---------------------------------------------------------------------------


def clip(per_example: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale each row g to g / max(||g||_2 / C, 1); norms end up <= C."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    g = np.asarray(per_example, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(norms / clip_norm, 1.0)


def local_noise_and_sum(
    clipped: np.ndarray,
    local_batch: int,
    aggregate_batch: int,
    clip_norm: float,
    noise_multiplier: float,
    prng: Prng,
) -> np.ndarray:
    """Sum of clipped rows plus N(0, (|B_h|/|B|) * (C*sigma)^2) per coordinate.

    The variance share is proportional to this participant's share of the
    aggregate batch, so summing all participants' outputs reproduces a single
    central draw of variance (C*sigma)^2. An empty local batch contributes an
    exact zero vector (its variance share is zero).
    """
    g = np.asarray(clipped, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("clipped must be a (batch, dim) matrix")
    if local_batch < 0 or aggregate_batch < 0 or local_batch > aggregate_batch:
        raise ValueError(
            f"need 0 <= local batch <= aggregate batch, got {local_batch} > {aggregate_batch}"
        )
    total = g.sum(axis=0)
    if noise_multiplier == 0.0 or local_batch == 0:
        return total
    std = math.sqrt(local_batch / aggregate_batch) * clip_norm * noise_multiplier
    return total + gaussian(prng, 0.0, std, g.shape[1])


def poisson_sample(shard_size: int, p: float, prng: Prng) -> np.ndarray:
    """Indices included independently with probability p (may be empty)."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if p == 1.0:
        return np.arange(shard_size)
    u = prng.generator().random(shard_size)
    return np.flatnonzero(u < p)


# ---------------------------------------------------------------------------
# Renyi accountant
# ---------------------------------------------------------------------------


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    lo, hi = (a, b) if a < b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if a < b:
        raise ValueError("log_sub of a negative quantity")
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    if x < 20.0:
        return math.log(math.erfc(x))
    # asymptotic expansion; erfc underflows float64 past ~26
    return (
        -x * x
        - math.log(x * math.sqrt(math.pi))
        + math.log1p(-0.5 * x**-2 + 0.75 * x**-4 - 1.875 * x**-6)
    )


def _log_a_int(p: float, sigma: float, alpha: int) -> float:
    """log A_alpha via the binomial sum over k for integer alpha."""
    log_p = math.log(p)
    log_1p = math.log1p(-p)
    out = -math.inf
    for k in range(alpha + 1):
        term = (
            math.log(math.comb(alpha, k))
            + k * log_p
            + (alpha - k) * log_1p
            + (k * k - k) / (2.0 * sigma * sigma)
        )
        out = _log_add(out, term)
    return out


def _log_binom_frac(alpha: float, i: int) -> tuple[float, float]:
    """(log |binom(alpha, i)|, sign) for real alpha > 1."""
    x = alpha - i + 1.0
    log_abs = math.lgamma(alpha + 1.0) - math.lgamma(i + 1.0) - math.lgamma(x)
    sign = 1.0 if x > 0 else (-1.0 if math.floor(x) % 2 else 1.0)
    return log_abs, sign


def _log_a_frac(p: float, sigma: float, alpha: float) -> float:
    """log A_alpha for fractional alpha via the erfc-split series."""
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma * sigma * math.log(1.0 / p - 1.0) + 0.5
    denom = math.sqrt(2.0) * sigma
    i = 0
    while True:
        log_coef, sign = _log_binom_frac(alpha, i)
        j = alpha - i
        log_t0 = log_coef + i * math.log(p) + j * math.log1p(-p)
        log_t1 = log_coef + j * math.log(p) + i * math.log1p(-p)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / denom)
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / denom)
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if sign > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        # the tail decays like i^-(alpha+2); A >= 1, so 35 logs below the
        # running total keeps the truncation error ~1e-12 relative
        if i > alpha and max(log_s0, log_s1) < max(log_a0, log_a1) - 35.0:
            break
    return _log_add(log_a0, log_a1)


_rdp_cache: dict[tuple, np.ndarray] = {}


def rdp_step(
    p: float, sigma: float, alpha_grid: tuple[float, ...] | list[float]
) -> np.ndarray:
    """Renyi epsilon(alpha) of one subsampled-Gaussian step, per grid order.

    p = 1 reduces to the plain Gaussian closed form alpha/(2*sigma^2); sigma=0
    is a non-private step and yields +inf at every order.
    """
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    alphas = [float(a) for a in alpha_grid]
    if any(a <= 1 for a in alphas):
        raise ValueError("all orders must be > 1")
    key = (p, sigma, tuple(alphas))
    cached = _rdp_cache.get(key)
    if cached is not None:
        return cached.copy()
    if sigma == 0.0:
        out = np.full(len(alphas), math.inf)
    else:
        out = np.empty(len(alphas))
        for idx, a in enumerate(alphas):
            if p == 1.0:
                out[idx] = a / (2.0 * sigma * sigma)
            elif a.is_integer():
                out[idx] = _log_a_int(p, sigma, int(a)) / (a - 1.0)
            else:
                out[idx] = _log_a_frac(p, sigma, a) / (a - 1.0)
    _rdp_cache[key] = out
    return out.copy()


def rdp_to_dp(
    rdp_at_alpha: np.ndarray | list[float],
    alpha_grid: tuple[float, ...] | list[float],
    delta: float,
) -> tuple[float, float]:
    """(epsilon, best alpha): min over orders of rdp(a) + log(1/delta)/(a-1)."""
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    rdp = np.asarray(rdp_at_alpha, dtype=np.float64)
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    if rdp.shape != alphas.shape or rdp.size == 0:
        raise ValueError("rdp values and alpha grid must align and be non-empty")
    eps = rdp + math.log(1.0 / delta) / (alphas - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), float(alphas[best])


class PrivacyLedger:
    """Single-writer accumulator of per-order RDP across training steps.

    Marks itself exhausted as soon as the converted epsilon reaches the
    target; the step that crossed the line is still recorded (training uses
    the exhausted flag as a stop signal before the next round).
    """

    def __init__(self, config: DpConfig):
        self.config = config
        self.steps = 0
        self.rdp_at_alpha = np.zeros(len(config.alpha_grid))
        self._per_step = rdp_step(
            config.sampling_rate, config.noise_multiplier, config.alpha_grid
        )

    @property
    def exhausted(self) -> bool:
        if self.steps == 0:
            return False
        eps, _ = self.converted()
        return eps >= self.config.target_epsilon

    def step(self, count: int = 1) -> None:
        if count < 0:
            raise ValueError("count must be >= 0")
        self.steps += count
        self.rdp_at_alpha = self.rdp_at_alpha + count * self._per_step

    def converted(self) -> tuple[float, float]:
        """Current (epsilon, best alpha) at the configured delta."""
        if self.steps == 0:
            raise ValueError("ledger has no recorded steps")
        return rdp_to_dp(self.rdp_at_alpha, self.config.alpha_grid, self.config.target_delta)

    def steps_until_exhausted(self, max_steps: int = 10_000_000) -> int:
        """Number of steps after which epsilon first reaches the target."""
        eps1, _ = rdp_to_dp(self._per_step, self.config.alpha_grid, self.config.target_delta)
        if eps1 >= self.config.target_epsilon:
            return 1
        # epsilon is nondecreasing in steps: bracket then bisect
        lo, hi = 1, 2
        while hi < max_steps and not self._eps_at(hi) >= self.config.target_epsilon:
            lo, hi = hi, hi * 2
        if hi >= max_steps:
            return max_steps
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self._eps_at(mid) >= self.config.target_epsilon:
                hi = mid
            else:
                lo = mid
        return hi

    def _eps_at(self, steps: int) -> float:
        eps, _ = rdp_to_dp(
            steps * self._per_step, self.config.alpha_grid, self.config.target_delta
        )
        return eps

    def dump(self) -> dict:
        """JSON-ready summary: steps, per-order table, converted epsilon."""
        out = {
            "steps": self.steps,
            "alpha_grid": list(self.config.alpha_grid),
            "rdp_at_alpha": [float(v) for v in self.rdp_at_alpha],
            "target_epsilon": self.config.target_epsilon,
            "delta": self.config.target_delta,
            "sampling_rate": self.config.sampling_rate,
            "noise_multiplier": self.config.noise_multiplier,
            "exhausted": self.exhausted,
        }
        if self.steps > 0:
            eps, alpha = self.converted()
            out["epsilon"] = eps
            out["best_alpha"] = alpha
        return out

    def dump_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.dump(), indent=2, sort_keys=True) + "\n")
