"""
Fidelity and perceptual measures and the weighted utility built from them
"""

from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import DataError, ShapeMismatchError
from .imaging import ImagePlane, _require_cv2, cv2, luma

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PROXY_SCALES = 3
PROXY_MIN_SIZE = 3
PROXY_SEED = 0xC0DEC
PROXY_FILTERS = 8
STRUCTURE_EPS = 1e-6
TEXTURE_WINDOW = 7

ImageLike = Union[ImagePlane, np.ndarray]


def _pixels(image: ImageLike) -> np.ndarray:
    return image.data if isinstance(image, ImagePlane) else np.asarray(image, dtype=np.float64)


def _pair(op: str, x: ImageLike, y: ImageLike):
    a, b = _pixels(x), _pixels(y)
    if a.shape != b.shape:
        raise ShapeMismatchError(op, [a.shape, b.shape])
    return a, b


def mse(x: ImageLike, y: ImageLike) -> float:
    a, b = _pair("mse", x, y)
    return float(np.mean((a - b) ** 2))


def psnr(x: ImageLike, y: ImageLike) -> float:
    """Peak signal-to-noise ratio on the [0, 1] scale, capped for near-identical inputs"""
    error = mse(x, y)
    if error < 1e-10:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / error), PSNR_CAP_DB))


def ssim(x: ImageLike, y: ImageLike) -> float:
    """Single-scale SSIM on luma, averaged over positions where the window fits"""
    _require_cv2()
    a, b = _pair("ssim", x, y)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DataError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    la, lb = luma(a), luma(b)
    kernel = cv2.getGaussianKernel(SSIM_WINDOW, SSIM_SIGMA, cv2.CV_64F)
    half = SSIM_WINDOW // 2

    def local_mean(img):
        out = cv2.sepFilter2D(np.ascontiguousarray(img), cv2.CV_64F, kernel, kernel,
                              borderType=cv2.BORDER_REFLECT)
        return out[half:-half, half:-half]

    mu_a, mu_b = local_mean(la), local_mean(lb)
    var_a = local_mean(la * la) - mu_a ** 2
    var_b = local_mean(lb * lb) - mu_b ** 2
    cov = local_mean(la * lb) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(numerator / denominator))


# Perceptual proxies

def _average_pool(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _pad_to_minimum(img: np.ndarray) -> np.ndarray:
    extra = [(0, max(PROXY_MIN_SIZE - n, 0)) for n in img.shape[:2]]
    if not any(after for _, after in extra):
        return img
    return np.pad(img, extra + [(0, 0)] * (img.ndim - 2), mode="edge")


def _pyramid(img: np.ndarray, scales: int = PROXY_SCALES) -> List[np.ndarray]:
    """Up to ``scales`` levels; coarser levels stop once a side would drop below 3 pixels"""
    levels = [_pad_to_minimum(img)]
    for _ in range(scales - 1):
        coarser = _average_pool(levels[-1])
        if min(coarser.shape[:2]) < PROXY_MIN_SIZE:
            break
        levels.append(coarser)
    return levels


def _random_filters(seed: int = PROXY_SEED, count: int = PROXY_FILTERS) -> np.ndarray:
    weights = np.random.default_rng(seed).standard_normal((count, 27))
    weights /= np.linalg.norm(weights, axis=1, keepdims=True)
    return weights.reshape(count, 3, 3, 3)


_FILTERS = _random_filters()


def _features(img: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(img, (3, 3), axis=(0, 1))
    return np.maximum(np.tensordot(windows, _FILTERS, axes=([2, 3, 4], [1, 2, 3])), 0.0)


def lpips_proxy(x: ImageLike, y: ImageLike) -> float:
    """Multi-scale squared distance between fixed random-filter feature maps"""
    a, b = _pair("lpips_proxy", x, y)
    distances = [np.mean((_features(pa) - _features(pb)) ** 2)
                 for pa, pb in zip(_pyramid(a), _pyramid(b))]
    return float(np.mean(distances))


def _structure_texture(la: np.ndarray, lb: np.ndarray) -> float:
    ga = np.hypot(cv2.Sobel(la, cv2.CV_64F, 1, 0, ksize=3), cv2.Sobel(la, cv2.CV_64F, 0, 1, ksize=3))
    gb = np.hypot(cv2.Sobel(lb, cv2.CV_64F, 1, 0, ksize=3), cv2.Sobel(lb, cv2.CV_64F, 0, 1, ksize=3))
    cov = np.mean((ga - ga.mean()) * (gb - gb.mean()))
    structure = (2.0 * cov + STRUCTURE_EPS) / (ga.var() + gb.var() + STRUCTURE_EPS)
    mu_a = cv2.blur(la, (TEXTURE_WINDOW, TEXTURE_WINDOW))
    mu_b = cv2.blur(lb, (TEXTURE_WINDOW, TEXTURE_WINDOW))
    texture = np.mean((2.0 * mu_a * mu_b + STRUCTURE_EPS) / (mu_a ** 2 + mu_b ** 2 + STRUCTURE_EPS))
    return float(structure * texture)


def dists_proxy(x: ImageLike, y: ImageLike) -> float:
    """One minus the mean gradient-structure times local-mean-texture similarity"""
    _require_cv2()
    a, b = _pair("dists_proxy", x, y)
    la, lb = np.ascontiguousarray(luma(a)), np.ascontiguousarray(luma(b))
    scores = [_structure_texture(np.ascontiguousarray(pa), np.ascontiguousarray(pb))
              for pa, pb in zip(_pyramid(la), _pyramid(lb))]
    return float(max(1.0 - np.mean(scores), 0.0))


@dataclass
class PerceptualMetric:
    """Named distance with d(x, x) = 0"""
    name: str
    distance: Callable[[ImageLike, ImageLike], float]
    description: str = ""


class MetricRegistry:
    """Registry of perceptual distances selectable by name"""

    def __init__(self):
        self.metrics: Dict[str, PerceptualMetric] = {}
        self.register_builtin_metrics()

    def register(self, name: str, distance: Callable[[ImageLike, ImageLike], float],
                 description: str = ""):
        self.metrics[name] = PerceptualMetric(name=name, distance=distance, description=description)

    def get_metric(self, name: str) -> Optional[PerceptualMetric]:
        return self.metrics.get(name)

    def require(self, name: str) -> PerceptualMetric:
        metric = self.get_metric(name)
        if metric is None:
            raise KeyError(f"unknown perceptual metric '{name}'; known: {sorted(self.metrics)}")
        return metric

    def list_metrics(self) -> Dict[str, PerceptualMetric]:
        return self.metrics.copy()

    def register_builtin_metrics(self):
        self.register("lpips-proxy", lpips_proxy,
                      description="Random-filter feature distance over three scales")
        self.register("dists-proxy", dists_proxy,
                      description="Gradient structure and local-mean texture dissimilarity")


default_registry = MetricRegistry()


@dataclass
class MetricWeights:
    fidelity: float = 1.0
    structure: float = 0.5
    lpips: float = 0.2
    dists: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"metric weight '{f.name}' must be non-negative")


CSV_COLUMNS = ("mse", "psnr_db", "ssim", "lpips_proxy", "dists_proxy", "utility")


@dataclass
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    lpips_proxy: float
    dists_proxy: float
    utility: float
    extra: Dict[str, float] = field(default_factory=dict)

    def to_row(self) -> List[float]:
        return [getattr(self, column) for column in CSV_COLUMNS]


def utility_from(distortion: float, similarity: float, lpips: float, dists: float,
                 weights: MetricWeights = MetricWeights()) -> float:
    return -(weights.fidelity * distortion + weights.structure * (1.0 - similarity)
             + weights.lpips * lpips + weights.dists * dists)


def evaluate(x: ImageLike, y: ImageLike, weights: MetricWeights = MetricWeights(),
             perceptual: Sequence[str] = ("lpips-proxy", "dists-proxy"),
             registry: Optional[MetricRegistry] = None) -> MetricReport:
    """Full report; ``perceptual`` names the two distances filling the LPIPS and DISTS slots"""
    registry = registry or default_registry
    first, second = (registry.require(name) for name in perceptual)
    d = mse(x, y)
    s = ssim(x, y)
    lp = float(first.distance(x, y))
    ds = float(second.distance(x, y))
    return MetricReport(mse=d, psnr_db=psnr(x, y), ssim=s, lpips_proxy=lp, dists_proxy=ds,
                        utility=utility_from(d, s, lp, ds, weights))


def utility(x: ImageLike, y: ImageLike, weights: MetricWeights = MetricWeights(),
            perceptual: Sequence[str] = ("lpips-proxy", "dists-proxy"),
            registry: Optional[MetricRegistry] = None) -> float:
    return evaluate(x, y, weights, perceptual, registry).utility
