"""Synthetic fundus-like scene generator with exact ground truth.

Every scene is deterministic in (seed, grade, size). Rendering is pure: the
noise seed is drawn at scene-generation time and stored on the spec, so
render() has no hidden randomness.

Severity grade rule:
  0: no lesions
  1: 1-3 microaneurysms
  2: 4-10 microaneurysms, 1-2 hemorrhages
  3: 11-18 microaneurysms, 3-8 hemorrhages, 1-5 exudates
  4: grade-3 lesion load plus 2-4 neovascular tufts
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .imaging import Image, RawImage, save_pnm

MU_D_MAX = 1.2
CLAMP_EPS = 1e-4
DEFAULT_NOISE_SIGMA = 0.01


@dataclass
class SceneSpec:
    size: int
    grade: int
    disc: tuple  # (cx, cy, radius) pixels
    vessels: list  # segments (x0, y0, x1, y1, width)
    tufts: list  # per tuft: list of segments, same layout
    microaneurysms: list  # (cx, cy, radius, delta)
    hemorrhages: list
    exudates: list
    attenuation: np.ndarray  # (H, W) in [0, 3]
    noise_sigma: float
    noise_seed: int


@dataclass
class LabeledSample:
    clean: Image
    degraded: Image
    attenuation: np.ndarray
    grade: int
    masks: dict = field(default_factory=dict)  # binary (H, W) uint8 per kind
    disc: tuple = (0.0, 0.0, 0.0)


def _lesion_counts(rng, grade):
    if grade == 0:
        return 0, 0, 0, 0
    if grade == 1:
        return int(rng.integers(1, 4)), 0, 0, 0
    if grade == 2:
        return int(rng.integers(4, 11)), int(rng.integers(1, 3)), 0, 0
    ma = int(rng.integers(11, 19))
    hem = int(rng.integers(3, 9))
    ex = int(rng.integers(1, 6))
    if grade == 3:
        return ma, hem, ex, 0
    return ma, hem, ex, int(rng.integers(2, 5))


def _place(rng, size, disc, margin, n, r_lo, r_hi, delta, dspread):
    """Draw n lesion tuples inside the retina, clear of the disc."""
    cx, cy, r = disc
    out = []
    half = size / 2.0
    tries = 0
    while len(out) < n and tries < 500:
        tries += 1
        x = rng.uniform(margin, size - margin)
        y = rng.uniform(margin, size - margin)
        if (x - half) ** 2 + (y - half) ** 2 > (0.48 * size) ** 2:
            continue
        if (x - cx) ** 2 + (y - cy) ** 2 < (r + 4.0) ** 2:
            continue
        rad = rng.uniform(r_lo, r_hi)
        out.append((x, y, rad, delta + rng.uniform(-dspread, dspread)))
    return out


def _vessel_tree(rng, size, disc):
    cx, cy, _ = disc
    segments = []
    n_branches = int(rng.integers(4, 7))
    for b in range(n_branches):
        ang = rng.uniform(0, 2 * np.pi)
        x, y = cx, cy
        width = rng.uniform(2.0, 2.8)
        steps = int(rng.integers(6, 10))
        for s in range(steps):
            step = rng.uniform(size / 20, size / 12)
            ang += rng.uniform(-0.45, 0.45)
            nx = x + step * np.cos(ang)
            ny = y + step * np.sin(ang)
            nx = float(np.clip(nx, 2, size - 3))
            ny = float(np.clip(ny, 2, size - 3))
            segments.append((x, y, nx, ny, width))
            # occasional side branch, thinner and shorter
            if s >= 2 and rng.random() < 0.3:
                bang = ang + rng.choice([-1, 1]) * rng.uniform(0.5, 1.1)
                bx, by, bw = nx, ny, width * 0.6
                for _ in range(int(rng.integers(2, 5))):
                    bstep = rng.uniform(size / 26, size / 16)
                    bang += rng.uniform(-0.4, 0.4)
                    tx = float(np.clip(bx + bstep * np.cos(bang), 2, size - 3))
                    ty = float(np.clip(by + bstep * np.sin(bang), 2, size - 3))
                    segments.append((bx, by, tx, ty, max(bw, 1.0)))
                    bx, by = tx, ty
            x, y = nx, ny
            width = max(width * 0.92, 1.0)
    return segments


def _tuft(rng, size, disc):
    """Dense cluster of short thin segments near the disc rim."""
    cx, cy, r = disc
    ang = rng.uniform(0, 2 * np.pi)
    dist = r + rng.uniform(4, 12)
    tx = float(np.clip(cx + dist * np.cos(ang), 8, size - 9))
    ty = float(np.clip(cy + dist * np.sin(ang), 8, size - 9))
    segs = []
    for _ in range(int(rng.integers(6, 11))):
        a = rng.uniform(0, 2 * np.pi)
        ln = rng.uniform(3, 6)
        x0 = tx + rng.uniform(-2, 2)
        y0 = ty + rng.uniform(-2, 2)
        segs.append((x0, y0, x0 + ln * np.cos(a), y0 + ln * np.sin(a), 1.0))
    return segs


def generate_scene(seed: int, grade: int, size: int = 96) -> SceneSpec:
    if grade not in range(5):
        raise ValueError(f"grade {grade} not in 0..4")
    if size < 64:
        raise ValueError("size must be >= 64")
    rng = np.random.default_rng(np.random.SeedSequence([seed, grade, size]))

    r_disc = rng.uniform(0.07, 0.13) * size
    margin = r_disc + 8
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    disc = (float(cx), float(cy), float(r_disc))

    vessels = _vessel_tree(rng, size, disc)
    n_ma, n_hem, n_ex, n_tuft = _lesion_counts(rng, grade)
    ma = _place(rng, size, disc, 6, n_ma, 1.2, 2.2, -0.30, 0.05)
    hem = _place(rng, size, disc, 8, n_hem, 3.0, 6.0, -0.25, 0.05)
    ex = _place(rng, size, disc, 8, n_ex, 2.0, 4.0, 0.25, 0.05)
    tufts = [_tuft(rng, size, disc) for _ in range(n_tuft)]

    # smooth attenuation field: three broad gaussians scaled onto [0, MU_D_MAX]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fld = np.zeros((size, size))
    for _ in range(3):
        gx, gy = rng.uniform(0, size, 2)
        sg = rng.uniform(0.3, 0.6) * size
        amp = rng.uniform(0.3, 1.0)
        fld += amp * np.exp(-((xx - gx) ** 2 + (yy - gy) ** 2) / (2 * sg * sg))
    fld -= fld.min()
    peak = fld.max()
    if peak > 0:
        fld *= MU_D_MAX / peak

    return SceneSpec(size=size, grade=grade, disc=disc, vessels=vessels,
                     tufts=tufts, microaneurysms=ma, hemorrhages=hem,
                     exudates=ex, attenuation=fld,
                     noise_sigma=DEFAULT_NOISE_SIGMA,
                     noise_seed=int(rng.integers(0, 2**31 - 1)))


def _paint_disk(canvas, mask, cx, cy, r, delta):
    h, w = canvas.shape
    x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
    y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    hit = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    canvas[y0:y1, x0:x1][hit] += delta
    if mask is not None:
        mask[y0:y1, x0:x1][hit] = 1


def _paint_segment(canvas, mask, x0, y0, x1, y1, width, delta):
    h, w = canvas.shape
    hw = width / 2.0
    pad = int(np.ceil(hw)) + 1
    bx0 = max(int(min(x0, x1)) - pad, 0)
    bx1 = min(int(max(x0, x1)) + pad + 1, w)
    by0 = max(int(min(y0, y1)) - pad, 0)
    by1 = min(int(max(y0, y1)) + pad + 1, h)
    if bx0 >= bx1 or by0 >= by1:
        return
    yy, xx = np.mgrid[by0:by1, bx0:bx1]
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    if L2 < 1e-12:
        t = np.zeros_like(xx, dtype=np.float64)
    else:
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / L2, 0.0, 1.0)
    dist2 = (xx - (x0 + t * dx)) ** 2 + (yy - (y0 + t * dy)) ** 2
    hit = dist2 <= hw * hw
    region = canvas[by0:by1, bx0:bx1]
    region[hit & (mask[by0:by1, bx0:bx1] == 0)] += delta  # no double-darkening
    if mask is not None:
        mask[by0:by1, bx0:bx1][hit] = 1


def render(scene: SceneSpec) -> LabeledSample:
    s = scene.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    half = s / 2.0
    r2 = ((xx - half) ** 2 + (yy - half) ** 2) / (half * half)
    clean = 0.45 + 0.25 * (1.0 - np.clip(r2, 0, 1)) + 0.05 * xx / s

    masks = {k: np.zeros((s, s), dtype=np.uint8)
             for k in ("disc", "vessels", "tufts",
                       "microaneurysms", "hemorrhages", "exudates")}

    cx, cy, r = scene.disc
    _paint_disk(clean, masks["disc"], cx, cy, r, 0.25)
    for seg in scene.vessels:
        _paint_segment(clean, masks["vessels"], *seg[:4], seg[4], -0.18)
    for tuft in scene.tufts:
        for seg in tuft:
            _paint_segment(clean, masks["tufts"], *seg[:4], seg[4], -0.20)
    for x, y, rad, d in scene.microaneurysms:
        _paint_disk(clean, masks["microaneurysms"], x, y, rad, d)
    for x, y, rad, d in scene.hemorrhages:
        _paint_disk(clean, masks["hemorrhages"], x, y, rad, d)
    for x, y, rad, d in scene.exudates:
        _paint_disk(clean, masks["exudates"], x, y, rad, d)

    clean = np.clip(clean, CLAMP_EPS, 1.0)
    degraded = clean * np.exp(-scene.attenuation)
    if scene.noise_sigma > 0:
        noise_rng = np.random.default_rng(scene.noise_seed)
        degraded = degraded + noise_rng.normal(0.0, scene.noise_sigma, degraded.shape)
    degraded = np.clip(degraded, CLAMP_EPS, 1.0)

    return LabeledSample(clean=Image(clean[..., None]),
                         degraded=Image(degraded[..., None]),
                         attenuation=scene.attenuation,
                         grade=scene.grade, masks=masks, disc=scene.disc)


MANIFEST_COLUMNS = ["path_clean", "path_degraded", "path_attenuation",
                    "grade", "split"]

# one PGM per sample, lesion kinds bit-packed per pixel
MASK_BITS = {"vessels": 1, "microaneurysms": 2, "hemorrhages": 4,
             "exudates": 8, "disc": 16, "tufts": 32}


def attenuation_to_raw(att: np.ndarray) -> RawImage:
    q = np.floor(att / 3.0 * 65535.0 + 0.5).astype(np.uint16)
    return RawImage(att.shape[0], att.shape[1], 1, 65535, q[..., None])


def attenuation_from_raw(raw: RawImage) -> np.ndarray:
    return raw.samples[..., 0].astype(np.float64) / 65535.0 * 3.0


def generate_dataset(n: int, seed: int, grade_distribution, out_dir,
                     size: int = 96, noise_sigma: float = DEFAULT_NOISE_SIGMA):
    """Write n samples + manifest.csv under out_dir; returns manifest path."""
    dist = np.asarray(grade_distribution, dtype=np.float64)
    if dist.shape != (5,) or (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
        raise ValueError("grade distribution must be 5 values summing to 1")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    grades = rng.choice(5, size=n, p=dist)
    scene_seeds = rng.integers(0, 2**31 - 1, size=n)
    split_draw = rng.random(n)

    rows = []
    for i in range(n):
        grade = int(grades[i])
        scene = generate_scene(int(scene_seeds[i]), grade, size)
        scene.noise_sigma = noise_sigma
        sample = render(scene)
        stem = f"s{i:05d}_g{grade}"
        p_clean = f"{stem}_clean.pgm"
        p_deg = f"{stem}_deg.pgm"
        p_att = f"{stem}_att.pgm"
        save_pnm(sample.clean, os.path.join(out_dir, p_clean))
        save_pnm(sample.degraded, os.path.join(out_dir, p_deg))
        save_pnm(attenuation_to_raw(sample.attenuation),
                 os.path.join(out_dir, p_att))
        packed = np.zeros((size, size), dtype=np.uint16)
        for kind, bit in MASK_BITS.items():
            packed |= sample.masks[kind].astype(np.uint16) * bit
        save_pnm(RawImage(size, size, 1, 255, packed[..., None]),
                 os.path.join(out_dir, f"{stem}_mask.pgm"))
        u = split_draw[i]
        split = "train" if u < 0.70 else ("val" if u < 0.85 else "test")
        rows.append([p_clean, p_deg, p_att, str(grade), split])

    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return manifest


def read_manifest(path):
    """Rows as dicts; paths stay relative to the manifest's directory."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ValueError(f"manifest columns {reader.fieldnames} != {MANIFEST_COLUMNS}")
        return [dict(r) for r in reader]
