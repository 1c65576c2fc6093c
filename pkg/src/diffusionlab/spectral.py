"""2D Fourier analysis of latent grids: band splitting, the noise-spectrum
concentration check and forward-process corruption curves.

The transform uses the 1/(MN) forward normalisation

    F(u, v) = 1/(MN) * sum_{k,l} x[k, l] * exp(-2 pi i (k u / M + l v / N))

so a unit-variance white grid has expected per-bin power 1/(MN).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import forward_noise, stream_seed
from .errors import ParameterError, ShapeError

DEFAULT_FRACTION = 0.2
DEFAULT_DELTA = 0.05


@dataclass(frozen=True, eq=False)
class Spectrum:
    coeffs: np.ndarray

    @property
    def M(self):
        return self.coeffs.shape[-2]

    @property
    def N(self):
        return self.coeffs.shape[-1]


@dataclass(frozen=True, eq=False)
class BandMask:
    M: int
    N: int
    membership: np.ndarray  # True = low band
    fraction: float

    @property
    def low(self):
        return self.membership

    @property
    def high(self):
        return ~self.membership

    @property
    def n_low(self):
        return int(self.membership.sum())

    @property
    def n_high(self):
        return self.M * self.N - self.n_low


def dft2(x) -> Spectrum:
    """Forward transform of the trailing two axes (leading axes are channels)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("dft2 needs at least a 2D grid")
    M, N = x.shape[-2:]
    return Spectrum(np.fft.fft2(x) / (M * N))


def idft2(s) -> np.ndarray:
    """Inverse of dft2. Returns the real part; callers that need the residue
    can use ``idft2_complex``."""
    return idft2_complex(s).real


def idft2_complex(s) -> np.ndarray:
    coeffs = s.coeffs if isinstance(s, Spectrum) else np.asarray(s)
    M, N = coeffs.shape[-2:]
    return np.fft.ifft2(coeffs * (M * N))


def radial_frequency(M, N):
    u = np.arange(M)
    v = np.arange(N)
    fu = np.minimum(u, M - u) / M
    fv = np.minimum(v, N - v) / N
    return np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)


def band_mask(M, N, fraction=DEFAULT_FRACTION) -> BandMask:
    """Low band = the floor(fraction*M*N) bins of smallest radial frequency,
    ties in (u, v) lexicographic order. A conjugate partner left out by the
    cut is pulled into the low band so both bands stay real-valued."""
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"fraction={fraction} must lie in (0, 1)")
    if M <= 0 or N <= 0:
        raise ParameterError("grid dimensions must be positive")
    r = radial_frequency(M, N).ravel()
    uu, vv = np.divmod(np.arange(M * N), N)
    order = np.lexsort((vv, uu, r))
    count = max(1, int(math.floor(fraction * M * N)))
    low = np.zeros(M * N, dtype=bool)
    low[order[:count]] = True
    low = low.reshape(M, N)
    partner = np.roll(np.flip(low, (0, 1)), (1, 1), axis=(0, 1))  # low[-u, -v]
    low |= partner
    return BandMask(M, N, low, float(fraction))


def band_split(x, fraction=DEFAULT_FRACTION, mask=None):
    """(low, high) components of x per channel; low + high == x."""
    x = np.asarray(x, dtype=np.float64)
    M, N = x.shape[-2:]
    mask = mask or band_mask(M, N, fraction)
    F = dft2(x).coeffs
    low = idft2(Spectrum(F * mask.low))
    return low, x - low


# ---------------------------------------------------------------------------
# concentration of the noise spectrum

@dataclass
class ConcentrationReport:
    M: int
    N: int
    trials: int
    mean_bin_power: float
    max_bin_power: float
    bound_violation_rate: float
    bound: float
    delta: float = DEFAULT_DELTA

    @property
    def expected(self):
        return 1.0 / (self.M * self.N)

    def row(self):
        return [self.M, self.N, self.trials, repr(self.mean_bin_power), repr(self.expected),
                repr(self.max_bin_power), repr(self.bound_violation_rate)]


def concentration_bound(M, N, delta=DEFAULT_DELTA):
    MN = M * N
    return (1.0 + math.sqrt(8.0 * math.log(2.0 * MN / delta))) / MN


def verify_noise_concentration(M, N, trials, seed, delta=DEFAULT_DELTA, chunk=250):
    """Monte-Carlo per-bin power of white Gaussian grids against 1/(MN)."""
    if M <= 0 or N <= 0:
        raise ParameterError("M*N must be positive")
    if trials < 100:
        raise ParameterError("trials must be >= 100")
    bound = concentration_bound(M, N, delta)
    per_bin = np.zeros((M, N))
    partial_sums = []
    violations = 0
    # chunk index feeds the seed so the result does not depend on chunking order
    for c, lo in enumerate(range(0, trials, chunk)):
        n = min(chunk, trials - lo)
        rng = np.random.default_rng(stream_seed(seed, c))
        eps = rng.standard_normal((n, M, N))
        power = np.abs(dft2(eps).coeffs) ** 2
        per_bin += power.sum(axis=0)
        partial_sums.extend(power.sum(axis=(1, 2)).tolist())
        violations += int((power > bound).sum())
    mean = math.fsum(partial_sums) / (trials * M * N)
    return ConcentrationReport(M, N, trials, mean, float((per_bin / trials).max()),
                               violations / (trials * M * N), bound, delta)


def scaling_slope(reports):
    """Least-squares slope of log(mean_bin_power) against log(MN)."""
    x = np.log([r.M * r.N for r in reports])
    y = np.log([r.mean_bin_power for r in reports])
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# corruption curves

@dataclass
class CurveRow:
    t: int
    band: str
    signal_norm: float
    noise_norm: float
    variation_ratio: float
    n_images: int
    expected_ratio: float = float("nan")

    def row(self):
        return [self.t, self.band, repr(self.signal_norm), repr(self.noise_norm),
                repr(self.variation_ratio), self.n_images]


@dataclass
class CurveTable:
    rows: list
    fraction: float
    flagged: list = field(default_factory=list)  # (image index, band) with zero band energy

    def ratios(self, band):
        return {r.t: r.variation_ratio for r in self.rows if r.band == band}

    def expected(self, band):
        return {r.t: r.expected_ratio for r in self.rows if r.band == band}


def corruption_curves(x0_batch, sched, fraction=DEFAULT_FRACTION, seed=0, timesteps=None):
    """Band-wise signal and noise norms and variation ratios along the forward process.

    ``timesteps`` defaults to 0 plus the sampled DDIM steps. Each (image, t) pair
    draws its own noise from ``stream_seed(seed, image * (T + 1) + t)``. The
    ``expected_ratio`` column is the batch mean of the closed-form root-mean-square
    ratio, for comparison with the Monte-Carlo mean.
    """
    x0_batch = [np.asarray(x, dtype=np.float64) for x in x0_batch]
    if not x0_batch:
        raise ParameterError("empty batch")
    shape = x0_batch[0].shape
    if any(x.shape != shape for x in x0_batch):
        raise ShapeError("all grids in the batch must share one shape")
    M, N = shape[-2:]
    channels = int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1
    mask = band_mask(M, N, fraction)
    bins = {"low": mask.n_low * channels, "high": mask.n_high * channels}
    ts = [0] + list(sched.ddim_steps) if timesteps is None else list(timesteps)

    split0 = [band_split(x, mask=mask) for x in x0_batch]
    energy0 = [{"low": float(np.sum(lo ** 2)), "high": float(np.sum(hi ** 2))}
               for lo, hi in split0]
    flagged = [(i, b) for i, e in enumerate(energy0) for b in ("low", "high") if e[b] == 0.0]

    rows = []
    T = sched.T_train
    for t in ts:
        ab = sched.alpha_bar[t]
        acc = {b: dict(sig=[], noise=[], ratio=[], exp=[]) for b in ("low", "high")}
        for i, x0 in enumerate(x0_batch):
            rng = np.random.default_rng(stream_seed(seed, i * (T + 1) + t))
            eps = rng.standard_normal(shape)
            xt = forward_noise(x0, t, eps, sched)
            lo_t, hi_t = band_split(xt, mask=mask)
            lo_e, hi_e = band_split(eps, mask=mask)
            parts = {"low": (split0[i][0], lo_t, lo_e), "high": (split0[i][1], hi_t, hi_e)}
            for b, (x0b, xtb, eb) in parts.items():
                a = acc[b]
                a["sig"].append(math.sqrt(ab) * math.sqrt(energy0[i][b]))
                a["noise"].append(math.sqrt(1.0 - ab) * float(np.linalg.norm(eb)))
                if energy0[i][b] > 0.0:
                    a["ratio"].append(float(np.linalg.norm(xtb - x0b)) / math.sqrt(energy0[i][b]))
                    a["exp"].append(math.sqrt(((1 - math.sqrt(ab)) ** 2 * energy0[i][b]
                                               + (1 - ab) * bins[b]) / energy0[i][b]))
        for b in ("low", "high"):
            a = acc[b]
            n = len(a["ratio"])
            rows.append(CurveRow(int(t), b, math.fsum(a["sig"]) / len(x0_batch),
                                 math.fsum(a["noise"]) / len(x0_batch),
                                 math.fsum(a["ratio"]) / n if n else float("nan"), n,
                                 math.fsum(a["exp"]) / n if n else float("nan")))
    return CurveTable(rows, float(fraction), flagged)


def write_curves_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "band", "signal_norm", "noise_norm", "variation_ratio", "n_images"])
        for r in table.rows:
            w.writerow(r.row())


def write_prop1_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "N", "trials", "mean_bin_power", "expected", "max_bin_power",
                    "violation_rate"])
        for r in reports:
            w.writerow(r.row())
