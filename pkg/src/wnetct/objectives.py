"""Training loss (MS-SSIM + L1 mix), evaluation metrics and rank statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats

from . import spectral
from .nn import ops
from .nn.tensor import Tensor, as_tensor, clamp_min

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

# cs and ssim terms are floored before the fractional powers so the
# gradient stays finite when a term collapses to zero.
_POWER_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.84
    k_image: float = 1.0
    k_fourier: float = 2e6
    scales: int = 5
    weights: tuple[float, ...] = MS_SSIM_WEIGHTS
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.k_image <= 0 or self.k_fourier <= 0:
            raise ValueError("K constants must be positive")
        if len(self.weights) != self.scales:
            raise ValueError("need one weight per scale")
        if abs(sum(self.weights) - 1.0) > 1e-4:
            raise ValueError("MS-SSIM weights must sum to 1")

    def k_for(self, domain: str) -> float:
        if domain == "image":
            return self.k_image
        if domain == "fourier":
            return self.k_fourier
        raise ValueError(f"unknown domain {domain!r}")


def gaussian_taps(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def usable_scales(side: int, config: LossConfig = LossConfig()) -> int:
    """Largest scale count <= ``config.scales`` with ``side >= window * 2**(scales - 1)``."""
    m = config.scales
    while m > 1 and side < config.window * 2 ** (m - 1):
        m -= 1
    if side < config.window:
        raise ValueError(f"images must be at least {config.window} pixels wide")
    return m


def _ssim_terms(x: Tensor, y: Tensor, taps: np.ndarray, c1: float, c2: float) -> tuple[Tensor, Tensor]:
    """Mean SSIM and mean contrast-structure over the valid window positions, per (N, C)."""
    blur = lambda t: ops.gaussian_filter_valid(t, taps)  # noqa: E731
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = blur(x * x) - mu_xx
    s_yy = blur(y * y) - mu_yy
    s_xy = blur(x * y) - mu_xy
    cs_map = (2.0 * s_xy + c2) / (s_xx + s_yy + c2)
    lum = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    return (lum * cs_map).mean(axis=(2, 3)), cs_map.mean(axis=(2, 3))


def ms_ssim(pred, target, config: LossConfig = LossConfig(), data_range: float = 1.0) -> Tensor:
    """Multi-scale SSIM of ``(N, C, H, W)`` batches, averaged over batch and channels.

    Contrast-structure terms from every scale but the last, full SSIM at the
    coarsest, combined as a weighted geometric product. Images smaller than
    ``window * 2**(scales - 1)`` use fewer scales with the leading weights
    renormalized.
    """
    x, y = as_tensor(pred), as_tensor(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 4:
        raise ValueError("ms_ssim expects (N, C, H, W) inputs")
    m = usable_scales(min(x.shape[-2:]), config)
    weights = np.asarray(config.weights[:m], dtype=float)
    weights = weights / weights.sum()
    taps = gaussian_taps(config.window, config.sigma)
    c1 = (config.k1 * data_range) ** 2
    c2 = (config.k2 * data_range) ** 2
    value = None
    for j in range(m):
        ssim_j, cs_j = _ssim_terms(x, y, taps, c1, c2)
        term = ssim_j if j == m - 1 else cs_j
        factor = clamp_min(term, _POWER_FLOOR) ** float(weights[j])
        value = factor if value is None else value * factor
        if j < m - 1:
            x, y = ops.avgpool2(x), ops.avgpool2(y)
    return value.mean()


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error over all elements and channels."""
    x, y = as_tensor(pred), as_tensor(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return (x - y).abs().mean()


def combined_loss_value(ms_ssim_loss: float, l1: float, domain: str, config: LossConfig = LossConfig()) -> float:
    """alpha * K * L_msssim + (1 - alpha) * L_l1 for precomputed components."""
    k = config.k_for(domain)
    return config.alpha * k * ms_ssim_loss + (1.0 - config.alpha) * l1


def fourier_range(target: np.ndarray) -> float:
    rng = float(target.max() - target.min())
    return rng if rng > 0 else 1.0


def combined_loss(pred, target, domain: str, config: LossConfig = LossConfig()) -> Tensor:
    """alpha * K * (1 - MS-SSIM) + (1 - alpha) * L1, with K picked by ``domain``.

    Image-domain inputs use a dynamic range of 1; Fourier-domain inputs use
    the range of the target batch.
    """
    k = config.k_for(domain)
    y = as_tensor(target)
    data_range = 1.0 if domain == "image" else fourier_range(y.data)
    ms = ms_ssim(pred, y, config, data_range)
    return (1.0 - ms) * (config.alpha * k) + l1_loss(pred, y) * (1.0 - config.alpha)


def stage_targets(target_images: np.ndarray, domains, shifted: bool = True, scale: float = 1.0) -> list[np.ndarray]:
    """Per-stage regression targets: the clean image, or its packed spectrum."""
    out = []
    for d in domains:
        if d == "image":
            out.append(target_images)
        elif d == "fourier":
            out.append(spectral.image_to_channels(target_images, shifted, scale).astype(target_images.dtype))
        else:
            raise ValueError(f"unknown domain {d!r}")
    return out


def network_loss(stage_outputs, target_images: np.ndarray, config: LossConfig = LossConfig(),
                 shifted: bool = True, scale: float = 1.0) -> Tensor:
    """Unweighted sum of per-stage losses, each computed in its own domain."""
    targets = stage_targets(target_images, stage_outputs.domains, shifted, scale)
    total = None
    for (domain, out), tgt in zip(stage_outputs, targets):
        term = combined_loss(out, tgt, domain, config)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- metrics

def _as_image(a) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=float)
    return a


def ssim_metric(pred, target, data_range: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale Gaussian-window SSIM averaged over valid window positions."""
    x, y = _as_image(pred), _as_image(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    x4 = x.reshape((1, 1) + x.shape[-2:]) if x.ndim == 2 else x.reshape((-1, 1) + x.shape[-2:])
    y4 = y.reshape(x4.shape)
    ssim, _ = _ssim_terms(Tensor(x4), Tensor(y4), gaussian_taps(window, sigma),
                          (0.01 * data_range) ** 2, (0.03 * data_range) ** 2)
    return float(ssim.data.mean())


def psnr(pred, target, data_range: float = 1.0) -> float:
    """10 log10(R^2 / MSE); +inf for identical inputs."""
    x, y = _as_image(pred), _as_image(target)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def nrmse(pred, target) -> float:
    """100 * ||pred - target|| / ||target||, in percent."""
    x, y = _as_image(pred), _as_image(target)
    norm = float(np.linalg.norm(y))
    if norm == 0.0:
        raise ValueError("nrmse undefined for an all-zero target")
    return 100.0 * float(np.linalg.norm(x - y)) / norm


@dataclass
class MetricRecord:
    method: str
    slice_id: str
    ssim: float
    psnr_db: float
    nrmse_pct: float


@dataclass
class MetricReport:
    records: list[MetricRecord] = field(default_factory=list)

    def add(self, method: str, slice_id: str, pred, target) -> MetricRecord:
        if any(r.method == method and r.slice_id == slice_id for r in self.records):
            raise ValueError(f"duplicate record for ({method}, {slice_id})")
        rec = MetricRecord(method, slice_id, ssim_metric(pred, target), psnr(pred, target), nrmse(pred, target))
        self.records.append(rec)
        return rec

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.records))

    def values(self, metric: str) -> np.ndarray:
        """``methods x slices`` matrix of one metric, slices in first-seen order."""
        slices = list(dict.fromkeys(r.slice_id for r in self.records))
        table = {(r.method, r.slice_id): getattr(r, metric) for r in self.records}
        return np.array([[table[(m, s)] for s in slices] for m in self.methods])

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        out = {}
        for m in self.methods:
            rows = [r for r in self.records if r.method == m]
            out[m] = {k: (float(np.mean([getattr(r, k) for r in rows])),
                          float(np.std([getattr(r, k) for r in rows])))
                      for k in ("ssim", "psnr_db", "nrmse_pct")}
        return out

    def rows(self):
        for r in self.records:
            yield [r.method, r.slice_id, f"{r.ssim:.6f}", f"{r.psnr_db:.4f}", f"{r.nrmse_pct:.4f}"]

    header = ["method", "slice_id", "ssim", "psnr_db", "nrmse_pct"]


# ---------------------------------------------------------------- statistics

@dataclass
class PairwiseResult:
    a: str
    b: str
    raw_p: float
    corrected_p: float
    significant: bool


@dataclass
class StatResult:
    chi2: float
    df: int
    p_value: float
    mean_ranks: dict[str, float] = field(default_factory=dict)
    pairwise: list[PairwiseResult] = field(default_factory=list)


def friedman_test(scores, methods: list[str] | None = None) -> StatResult:
    """Friedman rank test on a ``methods x slices`` score matrix.

    Ties within a slice get average ranks and the statistic is divided by
    the usual tie correction. If every slice is fully tied, chi2 = 0, p = 1.
    """
    scores = np.asarray(scores, dtype=float)
    k, n = scores.shape
    if k < 3:
        raise ValueError("Friedman test needs at least 3 methods")
    if n < 10:
        raise ValueError("Friedman test needs at least 10 slices")
    methods = methods or [f"m{i}" for i in range(k)]
    ranks = np.apply_along_axis(stats.rankdata, 0, scores)
    rank_sums = ranks.sum(axis=1)
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)
    ties = 0.0
    for col in scores.T:
        _, counts = np.unique(col, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * (k ** 3 - k))
    if correction <= 1e-12:
        chi2, p = 0.0, 1.0
    else:
        chi2 = max(chi2 / correction, 0.0)
        p = float(stats.chi2.sf(chi2, k - 1))
    return StatResult(chi2, k - 1, p, dict(zip(methods, (rank_sums / n).tolist())))


def wilcoxon_signed_rank(a, b) -> float:
    """Two-sided Wilcoxon signed-rank p-value, normal approximation.

    Zero differences are dropped; tied magnitudes get average ranks with the
    matching variance correction. No continuity correction.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    r = stats.rankdata(np.abs(d))
    w_plus = float(r[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(r, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    if var <= 0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def bonferroni(p: float, n_pairs: int) -> float:
    if n_pairs < 1:
        raise ValueError("need at least one comparison")
    return min(1.0, p * n_pairs)


def posthoc_pairwise(scores, methods: list[str] | None = None, alpha: float = 0.05) -> list[PairwiseResult]:
    """Wilcoxon signed-rank test for every method pair, Bonferroni-corrected over all pairs."""
    scores = np.asarray(scores, dtype=float)
    k = scores.shape[0]
    methods = methods or [f"m{i}" for i in range(k)]
    pairs = list(combinations(range(k), 2))
    if not pairs:
        raise ValueError("need at least two methods for pairwise comparisons")
    out = []
    for i, j in pairs:
        raw = wilcoxon_signed_rank(scores[i], scores[j])
        corrected = bonferroni(raw, len(pairs))
        out.append(PairwiseResult(methods[i], methods[j], raw, corrected, corrected < alpha))
    return out


def compare_methods(report: MetricReport, metric: str = "ssim", alpha: float = 0.05) -> StatResult:
    """Friedman omnibus (when >= 3 methods and >= 10 slices) plus Bonferroni pairwise tests."""
    scores = report.values(metric)
    methods = report.methods
    k, n = scores.shape
    if k >= 3 and n >= 10:
        result = friedman_test(scores, methods)
    else:
        result = StatResult(math.nan, k - 1, math.nan)
    result.pairwise = posthoc_pairwise(scores, methods, alpha)
    return result
