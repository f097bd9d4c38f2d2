"""Synthetic plantation scenes and the ground-truth maps the networks learn.

Scenes live in full-resolution pixel coordinates. All ground truths are
produced at half resolution, where map index ``p`` corresponds to image
coordinate ``2 * p``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

SIGMA_MAX = 3.0
SIGMA_MIN = 1.0
VECTOR_BAND = 2.0

SOIL_RGB = (0.50, 0.38, 0.26)
PLANT_RGB = (0.22, 0.55, 0.16)
WEED_RGB = (0.42, 0.52, 0.18)


@dataclass
class PlantationLine:
    id: int
    plants: np.ndarray  # [n, 2] (x, y), traversal order

    def __post_init__(self):
        self.plants = np.asarray(self.plants, dtype=np.float64).reshape(-1, 2)

    def segments(self) -> np.ndarray:
        """[m, 2, 2] consecutive-plant segments; a lone plant yields a zero-length one."""
        p = self.plants
        if len(p) == 1:
            return np.stack([p, p], axis=1)
        return np.stack([p[:-1], p[1:]], axis=1)


@dataclass
class PlantationScene:
    width: int
    height: int
    lines: list
    weeds: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    gsd_note: str = "synthetic, ~2 cm/px"

    def __post_init__(self):
        self.weeds = np.asarray(self.weeds, dtype=np.float64).reshape(-1, 2)

    @property
    def plants(self) -> np.ndarray:
        if not self.lines:
            return np.zeros((0, 2))
        return np.concatenate([ln.plants for ln in self.lines], axis=0)

    @property
    def plant_line_ids(self) -> np.ndarray:
        return np.concatenate([np.full(len(ln.plants), ln.id) for ln in self.lines]) if self.lines \
            else np.zeros(0, dtype=int)

    def segments(self) -> np.ndarray:
        if not self.lines:
            return np.zeros((0, 2, 2))
        return np.concatenate([ln.segments() for ln in self.lines], axis=0)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "lines": [{"id": int(ln.id), "plants": ln.plants.tolist()} for ln in self.lines],
            "weeds": self.weeds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantationScene":
        lines = [PlantationLine(int(ln["id"]), ln["plants"]) for ln in d["lines"]]
        return cls(int(d["width"]), int(d["height"]), lines, d.get("weeds", []))


def save_scene(scene: PlantationScene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def load_scene(path) -> PlantationScene:
    with open(path) as fh:
        return PlantationScene.from_dict(json.load(fh))


@dataclass
class GenConfig:
    """Procedural field parameters. Distances are full-resolution pixels."""

    width: int = 128
    height: int = 128
    rows: int | None = None  # None fills the image
    plants_per_row: int | None = None
    row_spacing_px: float = 13.0
    row_spacing_jitter: float = 0.5
    plant_spacing_px: float = 8.0
    plant_spacing_jitter: float = 1.0
    position_jitter: float = 0.6
    angle_deg: float = 0.0
    angle_range_deg: float = 180.0  # field orientation drawn from angle_deg +- range/2
    row_angle_jitter_deg: float = 0.0  # per-row deviation, near-parallel rows
    curvature: float = 0.0  # max bend amplitude in px
    curvature_wavelength: float = 256.0
    gap_probability: float = 0.1
    weed_density: float = 0.0  # weeds per 10^4 px^2
    plant_radius_px: float = 2.6
    radius_jitter: float = 0.25
    noise_level: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gap_probability <= 1:
            raise ValueError("gap_probability must lie in [0, 1]")
        if self.row_spacing_px <= 0 or self.plant_spacing_px <= 0:
            raise ValueError("spacings must be positive")
        if self.weed_density < 0 or self.plant_radius_px <= 0:
            raise ValueError("weed_density must be >= 0 and plant_radius_px > 0")
        if self.width < 1 or self.height < 1:
            raise ValueError("image extents must be positive")

    def with_seed(self, seed: int) -> "GenConfig":
        return replace(self, seed=seed)


EASY = GenConfig(gap_probability=0.1, curvature=0.0, row_angle_jitter_deg=0.0, weed_density=0.0)
HARD = GenConfig(row_spacing_px=10.0, row_spacing_jitter=0.8, plant_spacing_px=8.0,
                 row_angle_jitter_deg=2.0, curvature=2.0, gap_probability=0.15, weed_density=2.0)


def generate_scene(config: GenConfig) -> PlantationScene:
    """Lay out rows as smooth polylines and drop plants along them."""
    rng = np.random.default_rng([config.seed, 0])
    w, h = config.width, config.height
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    diag = math.hypot(w, h)
    alpha = math.radians(config.angle_deg + rng.uniform(-0.5, 0.5) * config.angle_range_deg)
    ca, sa = math.cos(alpha), math.sin(alpha)

    if config.rows is not None:
        offsets = (np.arange(config.rows) - (config.rows - 1) / 2.0) * config.row_spacing_px
    else:
        n = int(math.ceil(diag / config.row_spacing_px)) + 2
        start = -diag / 2.0 - rng.uniform(0, config.row_spacing_px)
        offsets = start + np.arange(n) * config.row_spacing_px
    offsets = offsets + rng.normal(0, 1, len(offsets)) * config.row_spacing_jitter

    lines = []
    for v0 in offsets:
        if config.plants_per_row is not None:
            k = config.plants_per_row
            u = (np.arange(k) - (k - 1) / 2.0) * config.plant_spacing_px
        else:
            k = int(math.ceil(diag / config.plant_spacing_px)) + 2
            u = -diag / 2.0 - rng.uniform(0, config.plant_spacing_px) + np.arange(k) * config.plant_spacing_px
        u = u + rng.normal(0, 1, k) * config.plant_spacing_jitter
        u = np.sort(u)
        tilt = math.tan(math.radians(rng.uniform(-1, 1) * config.row_angle_jitter_deg))
        phase = rng.uniform(0, 2 * math.pi)
        v = (v0 + u * tilt
             + config.curvature * np.sin(2 * math.pi * u / config.curvature_wavelength + phase)
             + rng.normal(0, 1, k) * config.position_jitter)
        keep = rng.uniform(0, 1, k) >= config.gap_probability
        x = cx + u * ca - v * sa
        y = cy + u * sa + v * ca
        inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        pts = np.stack([x, y], axis=1)[keep & inside]
        if len(pts):
            lines.append(PlantationLine(len(lines), pts))

    if not lines:
        raise ValueError("configuration produced a scene without plants")

    n_weeds = rng.poisson(config.weed_density * w * h / 1e4)
    weeds = np.stack([rng.uniform(0, w - 1, n_weeds), rng.uniform(0, h - 1, n_weeds)], axis=1)
    plants = np.concatenate([ln.plants for ln in lines])
    if len(weeds):
        d = np.sqrt(((weeds[:, None, :] - plants[None, :, :]) ** 2).sum(-1)).min(axis=1)
        weeds = weeds[d > 2 * config.plant_radius_px + 1]
    return PlantationScene(w, h, lines, weeds)


def greenness(image: np.ndarray) -> np.ndarray:
    """Excess-green index G - (R + B) / 2 of a [3, H, W] image."""
    return image[1] - 0.5 * (image[0] + image[2])


def render_rgb(scene: PlantationScene, config: GenConfig) -> np.ndarray:
    """Render ``scene`` as a [3, H, W] float64 image in [0, 1]."""
    rng = np.random.default_rng([config.seed, 1])
    h, w = scene.height, scene.width
    soil = np.asarray(SOIL_RGB)[:, None, None]
    texture = gaussian_filter(rng.normal(0, 1, (h, w)), 3.0)
    texture /= max(texture.std(), 1e-9)
    img = soil * (1.0 + 0.08 * texture)[None] * np.ones((3, h, w))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def blob(center, radius, color):
        x0, y0 = center
        r = radius + 1.5
        i0, i1 = max(int(y0 - r), 0), min(int(y0 + r) + 2, h)
        j0, j1 = max(int(x0 - r), 0), min(int(x0 + r) + 2, w)
        if i0 >= i1 or j0 >= j1:
            return
        d = np.hypot(xx[i0:i1, j0:j1] - x0, yy[i0:i1, j0:j1] - y0)
        a = np.clip(radius + 0.5 - d, 0.0, 1.0)
        img[:, i0:i1, j0:j1] = img[:, i0:i1, j0:j1] * (1 - a) + np.asarray(color)[:, None, None] * a

    for x0, y0 in scene.weeds:
        r = 0.6 * config.plant_radius_px * (1 + rng.uniform(-1, 1) * config.radius_jitter)
        blob((x0, y0), r, np.asarray(WEED_RGB) * (1 + rng.uniform(-0.08, 0.08, 3)))
    for x0, y0 in scene.plants:
        r = config.plant_radius_px * (1 + rng.uniform(-1, 1) * config.radius_jitter)
        blob((x0, y0), r, np.asarray(PLANT_RGB) * (1 + rng.uniform(-0.1, 0.1, 3)))

    img += rng.normal(0, config.noise_level, img.shape)
    return np.clip(img, 0.0, 1.0)


# -------------------------------------------------------------- ground truth

def sigma_schedule(stages: int, sigma_max: float = SIGMA_MAX, sigma_min: float = SIGMA_MIN) -> list:
    if stages < 1:
        raise ValueError("stage count must be at least 1")
    if stages == 1:
        return [float(sigma_max)]
    return [float(s) for s in np.linspace(sigma_max, sigma_min, stages)]


def _half_grid(scene):
    h2, w2 = scene.height // 2, scene.width // 2
    yy, xx = np.mgrid[0:h2, 0:w2].astype(np.float64)
    return xx, yy


def gt_plant_map(scene: PlantationScene, sigma: float) -> np.ndarray:
    """Pointwise max of peak-1 Gaussians centred on the halved plant positions."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xx, yy = _half_grid(scene)
    out = np.zeros_like(xx)
    for x, y in scene.plants / 2.0:
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        np.maximum(out, np.exp(-d2 / (2 * sigma * sigma)), out=out)
    return out


def _segment_distance(xx, yy, a, b):
    """Distances from grid points to segment a-b, plus the projection parameter."""
    d = b - a
    den = float(d @ d)
    if den == 0:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / den, 0.0, 1.0)
    px = a[0] + t * d[0]
    py = a[1] + t * d[1]
    return np.hypot(xx - px, yy - py)


def line_distance(scene: PlantationScene) -> tuple[np.ndarray, np.ndarray]:
    """Half-resolution distance to the nearest segment and that segment's index (-1 if none)."""
    xx, yy = _half_grid(scene)
    best = np.full(xx.shape, np.inf)
    arg = np.full(xx.shape, -1, dtype=np.int64)
    for k, (a, b) in enumerate(scene.segments() / 2.0):
        d = _segment_distance(xx, yy, a, b)
        closer = d < best
        best[closer] = d[closer]
        arg[closer] = k
    return best, arg


def gt_line_map(scene: PlantationScene, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d, _ = line_distance(scene)
    return np.exp(-np.square(d) / (2 * sigma * sigma))


def gt_displacement_field(scene: PlantationScene, band: float = VECTOR_BAND) -> np.ndarray:
    """[2, H/2, W/2] unit vectors along the nearest consecutive-plant segment, zero outside the band."""
    xx, yy = _half_grid(scene)
    out = np.zeros((2,) + xx.shape)
    best = np.full(xx.shape, np.inf)
    for ln in scene.lines:
        if len(ln.plants) < 2:
            continue
        for a, b in ln.segments() / 2.0:
            d = b - a
            n = math.hypot(*d)
            if n == 0:
                continue
            dist = _segment_distance(xx, yy, a, b)
            hit = (dist <= band) & (dist < best)
            best[hit] = dist[hit]
            out[0][hit] = d[0] / n
            out[1][hit] = d[1] / n
    return out


@dataclass
class GroundTruthBundle:
    plant_maps: list
    line_maps: list
    displacement_field: np.ndarray


def ground_truth(scene: PlantationScene, stages: int) -> GroundTruthBundle:
    sigmas = sigma_schedule(stages)
    dist, _ = line_distance(scene)
    line_maps = [np.exp(-np.square(dist) / (2 * s * s)) for s in sigmas]
    return GroundTruthBundle([gt_plant_map(scene, s) for s in sigmas], line_maps,
                             gt_displacement_field(scene))


# --------------------------------------------------------- patches and split

@dataclass
class Patch:
    scene: PlantationScene
    image: np.ndarray  # [3, P, P]
    origin: tuple  # (x0, y0) inside the source field
    source: int = 0


def crop_scene(scene: PlantationScene, x0: int, y0: int, size: int) -> PlantationScene:
    lines = []
    for ln in scene.lines:
        p = ln.plants
        keep = (p[:, 0] >= x0) & (p[:, 0] < x0 + size) & (p[:, 1] >= y0) & (p[:, 1] < y0 + size)
        if keep.any():
            lines.append(PlantationLine(ln.id, p[keep] - (x0, y0)))
    wd = scene.weeds
    wk = (wd[:, 0] >= x0) & (wd[:, 0] < x0 + size) & (wd[:, 1] >= y0) & (wd[:, 1] < y0 + size)
    return PlantationScene(size, size, lines, wd[wk] - (x0, y0))


def make_patches(scenes, images, patch_size: int = 256) -> list:
    """Tile each rendered scene into non-overlapping square patches, row-major."""
    patches = []
    for s, (scene, image) in enumerate(zip(scenes, images)):
        for y0 in range(0, scene.height - patch_size + 1, patch_size):
            for x0 in range(0, scene.width - patch_size + 1, patch_size):
                sub = crop_scene(scene, x0, y0, patch_size)
                img = image[:, y0:y0 + patch_size, x0:x0 + patch_size].copy()
                patches.append(Patch(sub, img, (x0, y0), s))
    return patches


def split_counts(n: int, ratios=(0.6, 0.2, 0.2)) -> list:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier bucket."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if abs(ratios.sum() - 1.0) > 1e-9 or np.any(ratios < 0):
        raise ValueError("split ratios must be non-negative and sum to 1")
    exact = ratios * n
    counts = np.floor(exact + 1e-9).astype(int)
    rem = exact - counts
    order = sorted(range(len(ratios)), key=lambda i: (-round(rem[i], 9), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_dataset(items, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffle deterministically and cut into disjoint train/val/test lists."""
    items = list(items)
    if len(items) < 3:
        raise ValueError("need at least 3 patches to split")
    counts = split_counts(len(items), ratios)
    perm = np.random.default_rng(seed).permutation(len(items))
    out, start = [], 0
    for c in counts:
        out.append([items[i] for i in perm[start:start + c]])
        start += c
    return tuple(out)


def generate_patches(config: GenConfig, n_patches: int, patch_size: int) -> list:
    """Render enough fields (each tiled into up to 4x4 patches) to yield ``n_patches``."""
    tiles = 4
    field_cfg = replace(config, width=tiles * patch_size, height=tiles * patch_size)
    patches = []
    k = 0
    while len(patches) < n_patches:
        cfg = field_cfg.with_seed(config.seed * 1000 + k)
        scene = generate_scene(cfg)
        image = render_rgb(scene, cfg)
        for p in make_patches([scene], [image], patch_size):
            if p.scene.lines:
                p.source = k
                patches.append(p)
        k += 1
    return patches[:n_patches]


def config_to_dict(config: GenConfig) -> dict:
    return asdict(config)
