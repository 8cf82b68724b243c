"""Handcrafted features: vessel map, GLCM texture, optic-disc location.

All operate on a single-channel Image and feed the fixed 20-value vector:
[vessel_density, 16 GLCM values (offset-major; per offset contrast,
correlation, energy, homogeneity), x_disc/W, y_disc/H, r_disc/min(H,W)].
"""

from dataclasses import dataclass

import numpy as np

from .imaging import Image, to_grayscale

GLCM_LEVELS = 16
GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))  # (dy, dx)
HANDCRAFTED_DIM = 20


@dataclass
class DiscLocation:
    x: float
    y: float
    r: float
    score: float


def _line_kernels(sigma=1.5, length=9, n_orient=8):
    half = length // 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    kernels = []
    for k in range(n_orient):
        th = np.pi * k / n_orient
        along = xs * np.cos(th) + ys * np.sin(th)
        perp = -xs * np.sin(th) + ys * np.cos(th)
        ker = np.where(np.abs(along) <= half + 0.5,
                       np.exp(-perp ** 2 / (2 * sigma * sigma)), 0.0)
        ker -= ker.mean()  # zero response to constant regions
        kernels.append(ker)
    return kernels


_KERNELS = _line_kernels()


def _correlate_replicate(img2d, kernel):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img2d, ((ph, ph), (pw, pw)), mode="edge")
    h, w = img2d.shape
    out = np.zeros((h, w))
    for i in range(kh):
        for j in range(kw):
            c = kernel[i, j]
            if c != 0.0:
                out += c * padded[i:i + h, j:j + w]
    return out


def segment_vessels(gray: Image) -> np.ndarray:
    """Multi-orientation matched filter; returns binary (H, W) uint8 map."""
    if gray.channels != 1:
        raise ValueError("expected single-channel image")
    inv = 1.0 - gray.samples[..., 0]  # vessels are dark; filter for ridges
    resp = None
    for ker in _KERNELS:
        r = _correlate_replicate(inv, ker)
        resp = r if resp is None else np.maximum(resp, r)
    std = resp.std()
    if std < 1e-12:
        return np.zeros(resp.shape, dtype=np.uint8)
    thr = resp.mean() + 2.0 * std
    return (resp > thr).astype(np.uint8)


def quantize_levels(gray2d: np.ndarray, levels: int = GLCM_LEVELS) -> np.ndarray:
    q = np.floor(gray2d * levels).astype(np.int64)
    return np.minimum(q, levels - 1)


def glcm_matrix(q: np.ndarray, offset) -> np.ndarray:
    """Symmetric, normalized co-occurrence matrix for one (dy, dx) offset."""
    dy, dx = offset
    h, w = q.shape
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    a = q[y0:y1, x0:x1].reshape(-1)
    b = q[y0 + dy:y1 + dy, x0 + dx:x1 + dx].reshape(-1)
    n = GLCM_LEVELS
    counts = np.bincount(a * n + b, minlength=n * n).reshape(n, n)
    counts = counts + counts.T
    return counts / counts.sum()


def _glcm_features(p: np.ndarray):
    """Contrast, correlation, energy, homogeneity from one GLCM.

    Sequential row-major accumulation keeps results reproducible against a
    plain double-loop recomputation, bit for bit.
    """
    n = p.shape[0]
    mu_i = 0.0
    mu_j = 0.0
    for i in range(n):
        for j in range(n):
            mu_i += i * p[i, j]
            mu_j += j * p[i, j]
    var_i = 0.0
    var_j = 0.0
    for i in range(n):
        for j in range(n):
            var_i += (i - mu_i) ** 2 * p[i, j]
            var_j += (j - mu_j) ** 2 * p[i, j]
    contrast = 0.0
    energy = 0.0
    homog = 0.0
    corr_num = 0.0
    for i in range(n):
        for j in range(n):
            v = p[i, j]
            contrast += v * (i - j) ** 2
            energy += v * v
            homog += v / (1 + abs(i - j))
            corr_num += v * (i - mu_i) * (j - mu_j)
    sigma = np.sqrt(var_i) * np.sqrt(var_j)
    correlation = 0.0 if sigma == 0.0 else corr_num / sigma
    return contrast, correlation, energy, homog


def haralick(gray: Image) -> np.ndarray:
    """16 texture values, offset-major: 4 offsets x (contrast, correlation,
    energy, homogeneity)."""
    if gray.channels != 1:
        raise ValueError("expected single-channel image")
    if gray.height < 2 or gray.width < 2:
        raise ValueError("image must be at least 2x2")
    q = quantize_levels(gray.samples[..., 0])
    out = []
    for off in GLCM_OFFSETS:
        out.extend(_glcm_features(glcm_matrix(q, off)))
    return np.array(out)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def locate_disc(gray: Image) -> DiscLocation:
    """Circular Hough over radii [0.05, 0.15]*min(H,W), 1 px steps.

    Edge pixels (gradient magnitude above the 90th percentile) vote one cell
    each per radius, in the uphill gradient direction (disc interior is
    bright). Ties: more votes first, then smaller radius, then row-major
    center order.
    """
    if gray.channels != 1:
        raise ValueError("expected single-channel image")
    h, w = gray.height, gray.width
    m = min(h, w)
    if m < 64:
        raise ValueError("image too small for disc search")
    img = gray.samples[..., 0]
    gx = _correlate_replicate(img, _SOBEL_X)
    gy = _correlate_replicate(img, _SOBEL_Y)
    mag = np.hypot(gx, gy)
    thr = np.percentile(mag, 90)
    ey, ex = np.nonzero(mag > thr)
    radii = np.arange(int(np.ceil(0.05 * m)), int(np.floor(0.15 * m)) + 1)
    best = (-1.0, 0, 0, 0)  # votes, radius, cy, cx
    if ey.size:
        ux = gx[ey, ex] / mag[ey, ex]
        uy = gy[ey, ex] / mag[ey, ex]
    for r in radii:
        acc = np.zeros((h, w))
        if ey.size:
            cx = np.floor(ex + r * ux + 0.5).astype(np.int64)
            cy = np.floor(ey + r * uy + 0.5).astype(np.int64)
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            np.add.at(acc, (cy[ok], cx[ok]), 1.0)
        peak = acc.max()
        if peak > best[0]:
            idx = int(np.argmax(acc))  # first row-major maximum
            best = (peak, int(r), idx // w, idx % w)
    return DiscLocation(x=float(best[3]), y=float(best[2]),
                        r=float(best[1]), score=float(max(best[0], 0.0)))


def assemble_handcrafted(vessels: np.ndarray, texture: np.ndarray,
                         disc: DiscLocation, dims) -> np.ndarray:
    h, w = dims
    vec = np.empty(HANDCRAFTED_DIM)
    vec[0] = float(vessels.mean()) if vessels.size else 0.0
    vec[1:17] = texture
    vec[17] = disc.x / w
    vec[18] = disc.y / h
    vec[19] = disc.r / min(h, w)
    return vec


def handcrafted_vector(img: Image) -> np.ndarray:
    """Full 20-value vector from any Image (converted to grayscale)."""
    gray = to_grayscale(img)
    vessels = segment_vessels(gray)
    texture = haralick(gray)
    disc = locate_disc(gray)
    return assemble_handcrafted(vessels, texture, disc,
                                (gray.height, gray.width))
