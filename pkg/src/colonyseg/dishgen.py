"""Procedural generator of labeled Petri-dish images.

A scene is sampled first (dish geometry, colonies, rim reflections), then
rendered deterministically to an RGB image and a 4-class label mask. The
generator reproduces the difficulties of real plate photos: extreme
background dominance, touching colonies, the dark lysis halo that marks
virulent (bvg+) colonies, and bright LED reflections near the dish rim.

Label semantics: colony discs carry their class; a bvg+ halo is an image
feature only and stays background, so the classifier must use context to
tell the kinds apart. Border pixels are those within Chebyshev distance 1
of two or more distinct colony discs; they override colony labels and
guarantee that touching colonies are 4-disconnected in the mask.

Color palette (fixed constants, 8-bit RGB):
    outside the dish   (26, 26, 30)    near-black tray
    agar               (150, 58, 48)   blood-agar red, flat
    colony body        (212, 196, 168) pale cream, per-colony jitter
    bvg+ halo          agar scaled by 0.5 (darkened annulus)
    LED reflection     (240, 238, 228) bright arc near the rim
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from . import evalkit
from .labels import BORDER, BVG_MINUS, BVG_PLUS
from .pnm import write_pgm, write_ppm

BACKGROUND_RGB = (26, 26, 30)
AGAR_RGB = (150, 58, 48)
COLONY_RGB = (212, 196, 168)
HALO_FACTOR = 0.5
REFLECTION_RGB = (240, 238, 228)

REFERENCE_CANVAS = 480
MIN_RADIUS_PX = 2.0
MIN_HALO_GAP_PX = 1.5
PLACEMENT_ATTEMPTS = 1000

PRESETS = ("easy", "realistic")


@dataclasses.dataclass
class Colony:
    cx: float
    cy: float
    radius: float
    kind: int  # BVG_PLUS or BVG_MINUS
    halo_radius: Optional[float] = None  # bvg+ only, > radius
    jitter: float = 0.0

    def __post_init__(self):
        if self.kind == BVG_PLUS:
            if self.halo_radius is None or self.halo_radius <= self.radius:
                raise ValueError("bvg+ colonies need halo_radius > radius")
        elif self.halo_radius is not None:
            raise ValueError("bvg- colonies have no halo")


@dataclasses.dataclass
class Reflection:
    angle_start: float  # radians
    angle_span: float
    radial_frac: float  # of the dish radius
    brightness: float  # blend factor in (0, 1]


@dataclasses.dataclass
class DishScene:
    height: int
    width: int
    dish_cx: float
    dish_cy: float
    dish_radius: float
    colonies: list
    reflections: list
    noise_level: float
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "canvas": {"height": self.height, "width": self.width},
            "dish": {"cx": self.dish_cx, "cy": self.dish_cy, "radius": self.dish_radius},
            "noise_level": self.noise_level,
            "colonies": [
                {
                    "cx": c.cx,
                    "cy": c.cy,
                    "radius": c.radius,
                    "kind": "bvg+" if c.kind == BVG_PLUS else "bvg-",
                    "halo_radius": c.halo_radius,
                    "jitter": c.jitter,
                }
                for c in self.colonies
            ],
            "reflections": [
                {
                    "angle_start": r.angle_start,
                    "angle_span": r.angle_span,
                    "radial_frac": r.radial_frac,
                    "brightness": r.brightness,
                }
                for r in self.reflections
            ],
            "counts": {
                "bvg+": sum(1 for c in self.colonies if c.kind == BVG_PLUS),
                "bvg-": sum(1 for c in self.colonies if c.kind == BVG_MINUS),
            },
        }

    @staticmethod
    def from_json_dict(d: dict) -> "DishScene":
        colonies = [
            Colony(
                cx=c["cx"],
                cy=c["cy"],
                radius=c["radius"],
                kind=BVG_PLUS if c["kind"] == "bvg+" else BVG_MINUS,
                halo_radius=c["halo_radius"],
                jitter=c["jitter"],
            )
            for c in d["colonies"]
        ]
        reflections = [Reflection(**r) for r in d["reflections"]]
        return DishScene(
            height=d["canvas"]["height"],
            width=d["canvas"]["width"],
            dish_cx=d["dish"]["cx"],
            dish_cy=d["dish"]["cy"],
            dish_radius=d["dish"]["radius"],
            colonies=colonies,
            reflections=reflections,
            noise_level=d["noise_level"],
            seed=d["seed"],
        )


@dataclasses.dataclass(frozen=True)
class GeneratorParams:
    """Sampling priors; the count means follow the real dataset's statistics."""

    lambda_plus: float = 20.357
    lambda_minus: float = 4.726
    radius_range: tuple = (4.0, 12.0)  # px at the 480 reference canvas
    p_touch: float = 0.3
    noise_level: float = 3.0
    preset: str = "realistic"
    canvas_size: int = 480

    def __post_init__(self):
        if self.lambda_plus <= 0 or self.lambda_minus <= 0:
            raise ValueError("count means must be positive")
        if self.radius_range[0] <= 0 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError("radius_range must be positive and ordered")
        if not (0.0 <= self.p_touch <= 1.0):
            raise ValueError("p_touch must lie in [0, 1]")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")
        if self.canvas_size < 32:
            raise ValueError("canvas_size must be at least 32")

    def scaled_radius_range(self) -> tuple[float, float]:
        scale = self.canvas_size / REFERENCE_CANVAS
        lo = max(self.radius_range[0] * scale, MIN_RADIUS_PX)
        hi = max(self.radius_range[1] * scale, lo)
        return lo, hi

    def to_json_dict(self) -> dict:
        return {
            "lambda_plus": self.lambda_plus,
            "lambda_minus": self.lambda_minus,
            "radius_range": list(self.radius_range),
            "p_touch": self.p_touch,
            "noise_level": self.noise_level,
            "preset": self.preset,
            "canvas_size": self.canvas_size,
        }


def sample_scene(params: GeneratorParams, seed: int) -> DishScene:
    """Draw a dish scene: Poisson colony counts, placement, reflections.

    With probability p_touch a colony is placed tangent-to-overlapping
    against an existing one (center distance 0.8..1.1 of the radius sum)
    to create touching pairs; otherwise placement is rejection-sampled to
    keep discs apart. Each colony joins at most one touching pair, and the
    pair distance is floored at |r1 - r2| + 3 so both members keep a solid
    crescent of own-class pixels once the border seam is carved out.
    A colony whose placement fails 1000 times is skipped. The easy preset
    forces full separation and no reflections.
    """
    rng = np.random.default_rng(seed)
    size = params.canvas_size
    cx = cy = size / 2.0
    dish_radius = 0.46 * size
    easy = params.preset == "easy"
    p_touch = 0.0 if easy else params.p_touch
    clear_gap = 4.0 if easy else 1.5
    lo, hi = params.scaled_radius_range()

    n_plus = int(rng.poisson(params.lambda_plus))
    n_minus = int(rng.poisson(params.lambda_minus))
    kinds = [BVG_PLUS] * n_plus + [BVG_MINUS] * n_minus
    rng.shuffle(kinds)

    colonies: list[Colony] = []
    paired: set[int] = set()
    for kind in kinds:
        r = float(rng.uniform(lo, hi))
        halo = None
        margin = r
        if kind == BVG_PLUS:
            halo = max(r * float(rng.uniform(1.35, 1.8)), r + MIN_HALO_GAP_PX)
            margin = halo
        unpaired = [i for i in range(len(colonies)) if i not in paired]
        touching = bool(unpaired) and rng.random() < p_touch
        for _ in range(PLACEMENT_ATTEMPTS):
            partner_idx = None
            if touching:
                partner_idx = unpaired[int(rng.integers(len(unpaired)))]
                partner = colonies[partner_idx]
                rsum = r + partner.radius
                lo_frac = max(0.8, (abs(r - partner.radius) + 3.0) / rsum)
                dist = float(rng.uniform(min(lo_frac, 1.1), 1.1)) * rsum
                ang = float(rng.uniform(0.0, 2.0 * math.pi))
                px = partner.cx + dist * math.cos(ang)
                py = partner.cy + dist * math.sin(ang)
            else:
                rad = dish_radius * math.sqrt(float(rng.uniform(0.0, 1.0)))
                ang = float(rng.uniform(0.0, 2.0 * math.pi))
                px = cx + rad * math.cos(ang)
                py = cy + rad * math.sin(ang)
            if math.hypot(px - cx, py - cy) + margin > dish_radius - 1.0:
                continue
            ok = True
            for oi, other in enumerate(colonies):
                if touching and oi == partner_idx:
                    continue
                if math.hypot(px - other.cx, py - other.cy) < r + other.radius + clear_gap:
                    ok = False
                    break
            if ok:
                colonies.append(
                    Colony(
                        cx=px,
                        cy=py,
                        radius=r,
                        kind=kind,
                        halo_radius=halo,
                        jitter=float(rng.uniform(-0.08, 0.08)),
                    )
                )
                if touching:
                    paired.add(partner_idx)
                    paired.add(len(colonies) - 1)
                break
        # else: skipped after too many rejections

    reflections: list[Reflection] = []
    if not easy:
        for _ in range(int(rng.integers(2, 5))):
            reflections.append(
                Reflection(
                    angle_start=float(rng.uniform(0.0, 2.0 * math.pi)),
                    angle_span=float(rng.uniform(0.15, 0.7)),
                    radial_frac=float(rng.uniform(0.90, 0.97)),
                    brightness=float(rng.uniform(0.5, 0.9)),
                )
            )

    return DishScene(
        height=size,
        width=size,
        dish_cx=cx,
        dish_cy=cy,
        dish_radius=dish_radius,
        colonies=colonies,
        reflections=reflections,
        noise_level=params.noise_level,
        seed=seed,
    )


def _colony_box(scene: DishScene, cx: float, cy: float, radius: float):
    r0 = max(int(math.floor(cy - radius)) - 1, 0)
    r1 = min(int(math.ceil(cy + radius)) + 2, scene.height)
    c0 = max(int(math.floor(cx - radius)) - 1, 0)
    c1 = min(int(math.ceil(cx + radius)) + 2, scene.width)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dist = np.hypot(xx - cx, yy - cy)
    return (slice(r0, r1), slice(c0, c1)), dist


def render_mask(scene: DishScene) -> np.ndarray:
    """Rasterize the 4-class label mask for a scene.

    Colony discs carry their class; pixels within Chebyshev distance 1 of
    two distinct discs become border and override colony labels, which
    4-disconnects touching colonies. The seam then absorbs any 1-2 pixel
    fragment it pinched off a crescent tip, so every placed colony is
    exactly one connected component and the scene's colony list stays a
    valid counting oracle for the mask.
    """
    mask = np.zeros((scene.height, scene.width), dtype=np.uint8)
    dilated_count = np.zeros_like(mask)
    for colony in scene.colonies:
        box, dist = _colony_box(scene, colony.cx, colony.cy, colony.radius)
        disc = dist <= colony.radius
        region = mask[box]
        region[disc] = colony.kind
        # Chebyshev-1 dilation of the disc: OR of the 3x3 neighborhood.
        dil = disc.copy()
        h, w = disc.shape
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ys = slice(max(dy, 0), h + min(dy, 0))
                yd = slice(max(-dy, 0), h + min(-dy, 0))
                xs = slice(max(dx, 0), w + min(dx, 0))
                xd = slice(max(-dx, 0), w + min(-dx, 0))
                dil[yd, xd] |= disc[ys, xs]
        dilated_count[box] += dil.astype(np.uint8)
    border = dilated_count >= 2
    mask[border] = BORDER

    if border.any():
        for colony in scene.colonies:
            box, dist = _colony_box(scene, colony.cx, colony.cy, colony.radius)
            if not border[box].any():
                continue
            own = np.where(dist <= colony.radius, mask[box], 0)
            comps = evalkit.connected_components(own, colony.kind)
            if len(comps) <= 1:
                continue
            # Components come in scan order, so max() is deterministic.
            largest = max(comps.instances, key=lambda inst: len(inst.pixels))
            region = mask[box]
            for inst in comps.instances:
                if inst is not largest:
                    for r, c in inst.pixels:
                        region[r, c] = BORDER
    return mask


def render_image(scene: DishScene) -> np.ndarray:
    """Render a scene to an 8-bit RGB image, deterministic given the scene."""
    h, w = scene.height, scene.width
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = BACKGROUND_RGB

    yy, xx = np.mgrid[0:h, 0:w]
    dish_dist = np.hypot(xx - scene.dish_cx, yy - scene.dish_cy)
    agar_alpha = np.clip(scene.dish_radius + 0.5 - dish_dist, 0.0, 1.0)[..., None]
    img = img * (1 - agar_alpha) + np.asarray(AGAR_RGB, dtype=np.float32) * agar_alpha

    halo_rgb = np.asarray(AGAR_RGB, dtype=np.float32) * HALO_FACTOR
    for colony in scene.colonies:
        if colony.kind != BVG_PLUS:
            continue
        box, dist = _colony_box(scene, colony.cx, colony.cy, colony.halo_radius)
        inner = (dist > colony.radius).astype(np.float32)
        outer = np.clip(colony.halo_radius + 0.5 - dist, 0.0, 1.0)
        alpha = (inner * outer)[..., None]
        img[box] = img[box] * (1 - alpha) + halo_rgb * alpha

    # Colony bodies are drawn with a hard edge so the visible extent
    # coincides with the labeled disc; annotations and appearance agree.
    for colony in scene.colonies:
        box, dist = _colony_box(scene, colony.cx, colony.cy, colony.radius)
        alpha = (dist <= colony.radius).astype(np.float32)[..., None]
        color = np.clip(
            np.asarray(COLONY_RGB, dtype=np.float32) * (1.0 + colony.jitter), 0, 255
        )
        img[box] = img[box] * (1 - alpha) + color * alpha

    if scene.reflections:
        angle = np.arctan2(yy - scene.dish_cy, xx - scene.dish_cx)
        for refl in scene.reflections:
            rad = refl.radial_frac * scene.dish_radius
            radial = np.clip(2.5 - np.abs(dish_dist - rad), 0.0, 1.0)
            rel = np.mod(angle - refl.angle_start, 2.0 * math.pi)
            angular = (rel <= refl.angle_span).astype(np.float32)
            alpha = (refl.brightness * radial * angular)[..., None]
            img = img * (1 - alpha) + np.asarray(REFLECTION_RGB, dtype=np.float32) * alpha

    if scene.noise_level > 0:
        noise_rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 0xD15]))
        img = img + noise_rng.normal(0.0, scene.noise_level, size=img.shape)

    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_dataset(params: GeneratorParams, n: int, seed: int, out_dir) -> dict:
    """Write n image/mask/scene triples plus a manifest; returns the manifest.

    File names are image_###.ppm / mask_###.pgm / scene_###.json. The
    manifest records the seed, the parameters, and per-image colony counts
    taken from the rendered mask (connected components, border ignored),
    so the manifest is always consistent with the labels on disk. Output
    is byte-identical for a fixed (params, n, seed).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for i in range(n):
        child_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        scene = sample_scene(params, child_seed)
        image = render_image(scene)
        mask = render_mask(scene)
        n_plus, n_minus = evalkit.count_colonies(mask)
        image_name = f"image_{i:03d}.ppm"
        mask_name = f"mask_{i:03d}.pgm"
        scene_name = f"scene_{i:03d}.json"
        write_ppm(out / image_name, image)
        write_pgm(out / mask_name, mask)
        with open(out / scene_name, "w") as fh:
            json.dump(scene.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        images.append(
            {
                "id": f"{i:03d}",
                "image": image_name,
                "mask": mask_name,
                "scene": scene_name,
                "n_bvg_plus": n_plus,
                "n_bvg_minus": n_minus,
            }
        )
    manifest = {
        "seed": seed,
        "count": n,
        "params": params.to_json_dict(),
        "images": images,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
