"""Three-metric photometric perturbation detector.

The detector scores an image with

* the Mahalanobis distance of its mean HSV feature from a clean corpus,
* the fraction of non-DC luminance spectral energy above a radial cutoff,
* the standard deviation of Shannon entropies over tiled luminance windows,

and flags each metric that exceeds its clean-corpus quantile.
:class:`Evidence3Detector` wraps calibration and scoring in the usual
``fit`` / ``transform`` / ``predict`` estimator interface.
"""

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._parallel import pmap
from .exceptions import CalibrationError, ImageSizeError
from .imgcore import check_image, luminance_plane, rgb_to_hsv

HUE_ENCODINGS = ("angle", "cossin")
METRIC_NAMES = ("mahal", "hf", "entstd")


# ---------------------------------------------------------------------------
# colour feature and Mahalanobis distance


def circular_mean_hue(hue_deg):
    """Circular mean of hues in degrees, mapped to ``[0, 360)``.

    A zero resultant (e.g. all-gray input) yields 0.
    """
    rad = np.deg2rad(np.asarray(hue_deg, dtype=np.float64))
    angle = math.degrees(math.atan2(np.sin(rad).mean(), np.cos(rad).mean()))
    angle %= 360.0
    return 0.0 if angle >= 360.0 else angle


def image_hsv_feature(img, hue_encoding="angle"):
    """Image-level colour feature.

    ``"angle"`` gives ``(circular_mean_hue / 360, mean_s, mean_v)``;
    ``"cossin"`` replaces the first coordinate with the cosine and sine of
    the circular mean hue, giving a 4-vector free of the 0/360 seam.
    """
    if hue_encoding not in HUE_ENCODINGS:
        raise ValueError(f"hue_encoding must be one of {HUE_ENCODINGS}")
    hsv = rgb_to_hsv(check_image(img)).reshape(-1, 3)
    h = circular_mean_hue(hsv[:, 0])
    s = float(hsv[:, 1].mean())
    v = float(hsv[:, 2].mean())
    if hue_encoding == "angle":
        return np.array([h / 360.0, s, v])
    rad = math.radians(h)
    return np.array([math.cos(rad), math.sin(rad), s, v])


@dataclass(frozen=True, eq=False)
class HsvStats:
    """Mean and covariance of clean-corpus colour features."""

    mean: np.ndarray
    cov: np.ndarray
    epsilon: float = 1e-6
    n_images: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise CalibrationError(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        if self.epsilon < 0:
            raise CalibrationError("epsilon must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @cached_property
    def cholesky(self):
        """Lower Cholesky factor of ``cov + epsilon * I``."""
        reg = self.cov + self.epsilon * np.eye(self.mean.size)
        if not np.allclose(reg, reg.T, rtol=0, atol=1e-12):
            raise CalibrationError("regularised covariance is not symmetric")
        try:
            return np.linalg.cholesky(reg)
        except np.linalg.LinAlgError:
            raise CalibrationError("regularised covariance is not positive definite") from None

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "epsilon": float(self.epsilon),
            "n_images": int(self.n_images),
        }


def calibrate_stats(clean_features, epsilon=1e-6):
    """Fit :class:`HsvStats` (mean, unbiased covariance) to clean features."""
    X = np.asarray(clean_features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise CalibrationError("need at least 2 clean feature vectors to calibrate")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return HsvStats(mean=mean, cov=cov, epsilon=float(epsilon), n_images=X.shape[0])


def mahalanobis(x, stats):
    """Distance of ``x`` from ``stats.mean`` under ``stats.cov + eps*I``.

    Uses a triangular solve against the Cholesky factor, so no inverse is
    ever formed.
    """
    diff = np.asarray(x, dtype=np.float64).reshape(-1) - stats.mean
    z = solve_triangular(stats.cholesky, diff, lower=True, check_finite=False)
    return float(math.sqrt(float(z @ z)))


# ---------------------------------------------------------------------------
# spectral and texture metrics


def radial_frequency(height, width):
    """Normalised radial frequency of every DFT bin, shape ``(H, W)``."""
    u = np.arange(height)
    v = np.arange(width)
    fu = np.minimum(u, height - u) / height
    fv = np.minimum(v, width - v) / width
    return np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)


def hf_energy_ratio(img, cutoff_frac=0.5):
    """Share of non-DC luminance spectral energy above a radial cutoff.

    The cutoff is ``cutoff_frac * sqrt(0.5)``, i.e. a fraction of the corner
    (diagonal Nyquist) radius. Returns 0 for images without any AC energy.
    """
    if not 0.0 < cutoff_frac < 1.0:
        raise ValueError("cutoff_frac must lie in (0, 1)")
    y = luminance_plane(check_image(img))
    h, w = y.shape
    if h < 8 or w < 8:
        raise ImageSizeError(f"hf_energy_ratio needs at least 8x8 pixels, got {h}x{w}")
    if y.max() == y.min():
        return 0.0
    power = np.abs(np.fft.fft2(y)) ** 2
    power[0, 0] = 0.0
    total = power.sum()
    if total <= 0.0:
        return 0.0
    r = radial_frequency(h, w)
    high = power[r > cutoff_frac * math.sqrt(0.5)].sum()
    return float(min(max(high / total, 0.0), 1.0))


def window_entropies(img, win=16, bins=32):
    """Shannon entropy (bits) of every non-overlapping ``win x win`` tile.

    Remainder rows and columns that do not fill a whole tile are dropped.
    Returns a ``(tiles_down, tiles_across)`` array.
    """
    if win < 2 or bins < 2:
        raise ValueError("win and bins must both be >= 2")
    y = luminance_plane(check_image(img))
    h, w = y.shape
    if h < win or w < win:
        raise ImageSizeError(f"image {h}x{w} is smaller than one {win}x{win} window")
    nh, nw = h // win, w // win
    tiles = (
        y[: nh * win, : nw * win]
        .reshape(nh, win, nw, win)
        .transpose(0, 2, 1, 3)
        .reshape(nh * nw, win * win)
    )
    idx = np.minimum((tiles * bins).astype(np.int64), bins - 1)
    offsets = (np.arange(nh * nw) * bins)[:, None]
    counts = np.bincount((idx + offsets).ravel(), minlength=nh * nw * bins).reshape(nh * nw, bins)
    p = counts / float(win * win)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=1).reshape(nh, nw)


def local_entropy_std(img, win=16, bins=32):
    """Population standard deviation of tiled window entropies."""
    ent = window_entropies(img, win=win, bins=bins).ravel()
    if np.all(ent == ent[0]):
        return 0.0
    return float(np.std(ent))


# ---------------------------------------------------------------------------
# thresholds and detection


def nearest_rank(values, q):
    """Nearest-rank quantile: the ``ceil(q * n)``-th smallest value (1-based)."""
    vals = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = vals.size
    if n == 0:
        raise CalibrationError("cannot take a quantile of an empty sample")
    if not 0.0 < q <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    # tolerance keeps e.g. 0.07 * 100 = 7.000000000000001 at rank 7
    rank = math.ceil(q * n - 1e-9 * max(n, 1))
    return float(vals[min(max(rank, 1), n) - 1])


@dataclass(frozen=True)
class Thresholds:
    tau_mahal: float
    tau_hf: float
    tau_entstd: float
    quantile: float = 0.99

    def __post_init__(self):
        for name in ("tau_mahal", "tau_hf", "tau_entstd"):
            tau = getattr(self, name)
            if not (math.isfinite(tau) and tau >= 0):
                raise CalibrationError(f"{name} must be finite and non-negative, got {tau}")

    def as_array(self):
        return np.array([self.tau_mahal, self.tau_hf, self.tau_entstd])

    def to_dict(self):
        return {
            "tau_mahal": self.tau_mahal,
            "tau_hf": self.tau_hf,
            "tau_entstd": self.tau_entstd,
            "quantile": self.quantile,
        }


def calibrate_thresholds(clean_metric_samples, quantile=0.99):
    """Per-metric nearest-rank quantiles of clean-corpus metric values.

    ``clean_metric_samples`` is a triple of sequences: Mahalanobis distances,
    HF ratios and entropy standard deviations.
    """
    if len(clean_metric_samples) != 3:
        raise CalibrationError("expected three metric samples (mahal, hf, entstd)")
    taus = []
    for name, sample in zip(METRIC_NAMES, clean_metric_samples):
        if len(sample) == 0:
            raise CalibrationError(f"empty clean sample for metric {name!r}")
        taus.append(nearest_rank(sample, quantile))
    return Thresholds(*taus, quantile=float(quantile))


@dataclass(frozen=True)
class MetricParams:
    cutoff_frac: float = 0.5
    win: int = 16
    bins: int = 32
    hue_encoding: str = "angle"

    def __post_init__(self):
        if not 0.0 < self.cutoff_frac < 1.0:
            raise ValueError("cutoff_frac must lie in (0, 1)")
        if self.win < 2 or self.bins < 2:
            raise ValueError("win and bins must both be >= 2")
        if self.hue_encoding not in HUE_ENCODINGS:
            raise ValueError(f"hue_encoding must be one of {HUE_ENCODINGS}")

    def to_dict(self):
        d = {"cutoff_frac": self.cutoff_frac, "win": self.win, "bins": self.bins}
        if self.hue_encoding != "angle":
            d["hue_encoding"] = self.hue_encoding
        return d


@dataclass(frozen=True)
class EvidenceReport:
    d_mahal: float
    hf_ratio: float
    ent_std: float
    flag_color: bool
    flag_noise: bool
    flag_spatial: bool

    @property
    def metrics(self):
        return (self.d_mahal, self.hf_ratio, self.ent_std)

    @property
    def flags(self):
        return (self.flag_color, self.flag_noise, self.flag_spatial)

    def to_dict(self):
        return {
            "mahal": self.d_mahal,
            "hf": self.hf_ratio,
            "entstd": self.ent_std,
            "flags": {
                "color": self.flag_color,
                "noise": self.flag_noise,
                "spatial": self.flag_spatial,
            },
        }


def image_metrics(img, stats, params=MetricParams()):
    """The three raw metric values ``(d_mahal, hf_ratio, ent_std)``."""
    img = check_image(img)
    feat = image_hsv_feature(img, params.hue_encoding)
    return (
        mahalanobis(feat, stats),
        hf_energy_ratio(img, params.cutoff_frac),
        local_entropy_std(img, params.win, params.bins),
    )


def report_from_metrics(metrics, thr):
    d, r, e = (float(m) for m in metrics)
    return EvidenceReport(
        d_mahal=d,
        hf_ratio=r,
        ent_std=e,
        flag_color=bool(d > thr.tau_mahal),
        flag_noise=bool(r > thr.tau_hf),
        flag_spatial=bool(e > thr.tau_entstd),
    )


def detect(img, stats, thr, params=MetricParams()):
    """Score ``img`` and flag every metric strictly above its threshold."""
    return report_from_metrics(image_metrics(img, stats, params), thr)


# ---------------------------------------------------------------------------
# estimator wrapper


def _as_image_list(X):
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ValueError("expected a collection of images; wrap a single image in a list")
    return [check_image(img) for img in X]


class Evidence3Detector(BaseEstimator):
    """Calibrate on clean images, then flag perturbed ones.

    Parameters
    ----------
    quantile : float
        Clean-corpus quantile used as each metric's threshold.
    epsilon : float
        Ridge added to the colour covariance diagonal.
    cutoff_frac, win, bins, hue_encoding
        Metric parameters, see :class:`MetricParams`.
    n_jobs : int or None
        Worker threads for per-image scoring. ``None`` defers to the
        ``EVIDENCE3_THREADS`` environment variable.

    Attributes
    ----------
    stats_ : HsvStats
    thresholds_ : Thresholds
    clean_metrics_ : ndarray of shape (n_images, 3)
        Metric values of the calibration images.
    """

    def __init__(self, quantile=0.99, epsilon=1e-6, cutoff_frac=0.5, win=16, bins=32,
                 hue_encoding="angle", n_jobs=None):
        self.quantile = quantile
        self.epsilon = epsilon
        self.cutoff_frac = cutoff_frac
        self.win = win
        self.bins = bins
        self.hue_encoding = hue_encoding
        self.n_jobs = n_jobs

    @property
    def metric_params(self):
        return MetricParams(self.cutoff_frac, self.win, self.bins, self.hue_encoding)

    def fit(self, X, y=None):
        """Calibrate colour statistics and thresholds on clean images ``X``."""
        if not 0.0 < self.quantile <= 1.0:
            raise ValueError("quantile must lie in (0, 1]")
        params = self.metric_params
        images = _as_image_list(X)
        if len(images) < 2:
            raise CalibrationError("need at least 2 clean images to calibrate")

        def texture(img):
            return (
                image_hsv_feature(img, params.hue_encoding),
                hf_energy_ratio(img, params.cutoff_frac),
                local_entropy_std(img, params.win, params.bins),
            )

        rows = pmap(texture, images, self.n_jobs)
        self.stats_ = calibrate_stats([r[0] for r in rows], self.epsilon)
        d = [mahalanobis(r[0], self.stats_) for r in rows]
        self.clean_metrics_ = np.column_stack([d, [r[1] for r in rows], [r[2] for r in rows]])
        self.thresholds_ = calibrate_thresholds(self.clean_metrics_.T, self.quantile)
        return self

    def _check_fitted(self):
        if not hasattr(self, "stats_"):
            raise NotFittedError("Evidence3Detector is not calibrated; call fit first")

    def transform(self, X):
        """Metric values, shape ``(n_images, 3)``: mahal, hf, entstd."""
        self._check_fitted()
        params = self.metric_params
        images = _as_image_list(X)
        rows = pmap(lambda img: image_metrics(img, self.stats_, params), images, self.n_jobs)
        return np.asarray(rows, dtype=np.float64).reshape(len(images), 3)

    def predict(self, X):
        """Boolean flags, shape ``(n_images, 3)``: colour, noise, spatial."""
        return self.transform(X) > self.thresholds_.as_array()

    def report(self, img):
        """Full :class:`EvidenceReport` for one image."""
        self._check_fitted()
        return detect(img, self.stats_, self.thresholds_, self.metric_params)

    def reports(self, X):
        return [report_from_metrics(m, self.thresholds_) for m in self.transform(X)]

    # -- persistence --------------------------------------------------------

    def to_dict(self):
        self._check_fitted()
        d = self.stats_.to_dict()
        d["thresholds"] = self.thresholds_.to_dict()
        d["metric_params"] = self.metric_params.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            params = MetricParams(**d.get("metric_params", {}))
            thr_d = dict(d["thresholds"])
            det = cls(
                quantile=float(thr_d.get("quantile", 0.99)),
                epsilon=float(d["epsilon"]),
                cutoff_frac=params.cutoff_frac,
                win=params.win,
                bins=params.bins,
                hue_encoding=params.hue_encoding,
            )
            det.stats_ = HsvStats(
                mean=d["mean"], cov=d["cov"], epsilon=float(d["epsilon"]),
                n_images=int(d["n_images"]),
            )
            det.thresholds_ = Thresholds(
                float(thr_d["tau_mahal"]), float(thr_d["tau_hf"]), float(thr_d["tau_entstd"]),
                quantile=float(thr_d.get("quantile", 0.99)),
            )
        except (KeyError, TypeError) as exc:
            raise CalibrationError(f"malformed stats document: {exc}") from exc
        return det

    def save(self, path):
        """Write the stats file (JSON, shortest round-trip float repr)."""
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
