"""Deterministic synthetic rail scenes standing in for real inspection images.

A scene is an 8-bit grayscale image (rows x cols = ``height`` x ``width``)
with a horizontal rail, vertical sleepers and clip-shaped fasteners on both
sides of the rail at each sleeper.  Everything is drawn from one
``numpy.random.Generator`` seeded by the config, so a seed reproduces the
scene byte for byte.
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .postprocess import BBox


@dataclass(frozen=True)
class SceneConfig:
    height: int = 512
    width: int = 1600
    count_range: tuple = (10, 18)
    size_range: tuple = (36, 52)
    illumination_range: tuple = (0.55, 1.15)
    occlusion_prob: float = 0.1
    missing_prob: float = 0.05
    noise_level: float = 6.0
    seed: int = 0

    def validate(self):
        if self.height % 64 or self.width % 64 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"scene dims {self.height}x{self.width} must be positive multiples of 64")
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad count range {self.count_range}")
        slo, shi = self.size_range
        if not 0 < slo <= shi:
            raise ValueError(f"bad size range {self.size_range}")
        for p in (self.occlusion_prob, self.missing_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        ilo, ihi = self.illumination_range
        if not 0 < ilo <= ihi:
            raise ValueError(f"bad illumination range {self.illumination_range}")
        sleepers = (hi + 1) // 2
        if sleepers and self.width < sleepers * (shi + 16):
            raise ValueError(f"width {self.width} cannot hold {hi} fasteners of size {shi}")
        if self.height < 2 * shi + 96:
            raise ValueError(f"height {self.height} too small for fasteners of size {shi}")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Fastener:
    bbox: BBox
    occluded: bool = False
    missing: bool = False
    site: tuple = (0, 0)  # (x, y) centre of the site in pixels


@dataclass
class LabeledScene:
    image: np.ndarray  # uint8, (height, width)
    mask: np.ndarray   # uint8 0/1, (height, width)
    fasteners: list = field(default_factory=list)

    @property
    def boxes(self):
        return [f.bbox for f in self.fasteners if not f.missing]


def _smooth_noise(rng, shape, sigma):
    """Gaussian-blurred white noise rescaled to unit standard deviation."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    std = field.std()
    return field / std if std > 0 else field


def _clip_silhouette(size, angle_deg):
    """Filled two-lobe clip inside a ``size x size`` window, rotated by ``angle_deg``."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.deg2rad(angle_deg)
    u = (xx - c) * np.cos(t) + (yy - c) * np.sin(t)
    v = -(xx - c) * np.sin(t) + (yy - c) * np.cos(t)
    # Semi-axes exceed the window slightly so the clipped extent is exactly ``size``.
    half = size / 2.0 + 1.0
    lobe_a = 0.26 * size
    left = ((u + half - lobe_a) / lobe_a) ** 2 + (v / half) ** 2 <= 1.0
    right = ((u - half + lobe_a) / lobe_a) ** 2 + (v / half) ** 2 <= 1.0
    bar = (np.abs(u) <= half - lobe_a) & (np.abs(v) <= 0.22 * size)
    return left | right | bar


def generate_scene(config):
    """Render one :class:`LabeledScene` from ``config`` (deterministic in ``config.seed``)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    slo, shi = config.size_range

    # Ballast background.
    img = 95.0 + 16.0 * _smooth_noise(rng, (h, w), 1.5) + 10.0 * _smooth_noise(rng, (h, w), 6.0)

    # Sleepers: vertical concrete bands.
    n_fast = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    n_sleepers = max((n_fast + 1) // 2, 1)
    pitch = w / n_sleepers
    offset = rng.uniform(0.3, 0.7)
    sleeper_w = int(min(shi + 40, pitch - 8))
    centers_x = [int(round((i + offset) * pitch + rng.uniform(-0.08, 0.08) * pitch)) for i in range(n_sleepers)]
    centers_x = [int(np.clip(cx, shi // 2 + 4, w - shi // 2 - 5)) for cx in centers_x]
    sleeper_tone = rng.uniform(130, 165)
    for cx in centers_x:
        x0, x1 = max(cx - sleeper_w // 2, 0), min(cx + sleeper_w // 2, w)
        img[:, x0:x1] = sleeper_tone + 6.0 * _smooth_noise(rng, (h, x1 - x0), 2.0)

    # Rail: a bright horizontal band with a darker foot on either side.
    rail_cy = int(h // 2 + rng.integers(-h // 16, h // 16 + 1))
    rail_half = int(rng.integers(26, 34))
    foot = 8
    img[rail_cy - rail_half - foot:rail_cy + rail_half + foot] = 70.0
    profile = 200.0 - 50.0 * (np.abs(np.arange(-rail_half, rail_half)) / rail_half) ** 2
    img[rail_cy - rail_half:rail_cy + rail_half] = profile[:, None] + rng.normal(0, 2.0, (2 * rail_half, w))

    # Fastener sites: above and below the rail at every sleeper.
    sites = []
    gap = 10
    for cx in centers_x:
        sites.append((cx, rail_cy - rail_half - foot - gap, -1))
        sites.append((cx, rail_cy + rail_half + foot + gap, +1))
    order = rng.permutation(len(sites))[:n_fast]
    sites = [sites[i] for i in sorted(order)]

    mask = np.zeros((h, w), dtype=np.uint8)
    fasteners = []
    for sx, edge_y, direction in sites:
        size = int(rng.integers(slo, shi + 1))
        angle = rng.uniform(-5.0, 5.0)
        missing = bool(rng.random() < config.missing_prob)
        occluded = (not missing) and bool(rng.random() < config.occlusion_prob)
        x0 = sx - size // 2
        y0 = edge_y - size if direction < 0 else edge_y
        y0 = int(np.clip(y0, 0, h - size))
        x0 = int(np.clip(x0, 0, w - size))
        sil = _clip_silhouette(size, angle)
        if missing:
            # Empty site: a dark socket where the clip would sit.
            hole = np.zeros_like(sil)
            hole[size // 3:2 * size // 3, size // 3:2 * size // 3] = True
            img[y0:y0 + size, x0:x0 + size][hole] *= 0.8
            fasteners.append(Fastener(BBox(x0, y0, x0 + size - 1, y0 + size - 1), missing=True, site=(sx, y0 + size // 2)))
            continue
        tone = rng.uniform(28, 48)
        ys, xs = np.nonzero(sil)
        patch = img[y0:y0 + size, x0:x0 + size]
        edge = sil & ~ndimage.binary_erosion(sil, iterations=2)
        patch[sil] = tone
        patch[edge] = tone + 150.0
        core = ndimage.binary_erosion(sil, iterations=size // 6)
        patch[core] = tone + 20.0
        visible = sil.copy()
        occ_a, occ_b = rng.random(2)
        if occluded:
            # Ballast heap covering up to 40% of the clip from one side.
            frac = 0.2 + 0.2 * occ_a
            cols = int(round(frac * size))
            if occ_b < 0.5:
                cover = np.s_[:, :cols]
            else:
                cover = np.s_[:, size - cols:]
            patch[cover] = 95.0 + 16.0 * _smooth_noise(rng, patch[cover].shape, 1.0)
            visible[cover] = False
        mask[y0:y0 + size, x0:x0 + size] |= visible.astype(np.uint8)
        fasteners.append(
            Fastener(BBox(x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()), y0 + int(ys.max())),
                     occluded=occluded, site=(sx, y0 + size // 2))
        )

    # Illumination: global brightness times a linear gradient along the track.
    lo, hi = config.illumination_range
    gain = rng.uniform(lo, hi)
    slope = rng.uniform(-0.25, 0.25)
    ramp = 1.0 + slope * (np.linspace(-1.0, 1.0, w))[None, :]
    img = img * gain * ramp + rng.normal(0.0, config.noise_level, (h, w))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledScene(image=image, mask=mask, fasteners=fasteners)


def random_crops(scene, n=1000, size=256, seed=0, align=8):
    """``n`` crops ``(image, mask)`` of ``size x size`` with origins on an ``align`` grid."""
    if size % 64:
        raise ValueError(f"crop size {size} must be divisible by 64")
    h, w = scene.image.shape
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds scene {h}x{w}")
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, (h - size) // align + 1, size=n) * align
    xs = rng.integers(0, (w - size) // align + 1, size=n) * align
    return [
        (scene.image[y:y + size, x:x + size].copy(), scene.mask[y:y + size, x:x + size].copy())
        for y, x in zip(ys, xs)
    ]


def crop_origins(shape, n, size, seed, align=8):
    """The crop origins :func:`random_crops` would use, as ``(ys, xs)``."""
    h, w = shape
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, (h - size) // align + 1, size=n) * align
    xs = rng.integers(0, (w - size) // align + 1, size=n) * align
    return ys, xs


def split_counts(n_scenes, train_fraction=700 / 997):
    if n_scenes < 2:
        raise ValueError("need at least two scenes to split")
    n_train = int(round(n_scenes * train_fraction))
    n_train = min(max(n_train, 1), n_scenes - 1)
    return n_train, n_scenes - n_train


def scene_seeds(base_seed, n_scenes):
    """Per-scene seeds derived from one base seed."""
    ss = np.random.SeedSequence(base_seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n_scenes)]


def build_dataset(config, n_scenes, train_fraction=700 / 997):
    """``(train, val)`` lists of ``(seed, LabeledScene)``; disjoint by construction."""
    n_train, _ = split_counts(n_scenes, train_fraction)
    seeds = scene_seeds(config.seed, n_scenes)
    scenes = [(s, generate_scene(replace(config, seed=s))) for s in seeds]
    return scenes[:n_train], scenes[n_train:]


def write_dataset(root, config, n_scenes, train_fraction=700 / 997):
    """Generate scenes into ``root`` and write ``manifest.json``; returns the manifest dict."""
    from . import formats as fio

    os.makedirs(root, exist_ok=True)
    n_train, _ = split_counts(n_scenes, train_fraction)
    seeds = scene_seeds(config.seed, n_scenes)
    entries = []
    for i, s in enumerate(seeds):
        split = "train" if i < n_train else "val"
        scene = generate_scene(replace(config, seed=s))
        stem = f"scene_{i:04d}"
        fio.write_pgm(os.path.join(root, f"{stem}.pgm"), scene.image)
        fio.write_pgm(os.path.join(root, f"{stem}_mask.pgm"), scene.mask * 255)
        fio.write_annotation(os.path.join(root, f"{stem}.ann"), stem, scene.image.shape, scene.fasteners)
        entries.append({"id": stem, "seed": s, "split": split, "image": f"{stem}.pgm",
                        "mask": f"{stem}_mask.pgm", "annotation": f"{stem}.ann"})
    manifest = {"format": "fastenet-dataset", "version": 1, "config": config.to_dict(),
                "n_scenes": n_scenes, "train_fraction": train_fraction, "scenes": entries}
    fio.write_text_atomic(os.path.join(root, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def regenerate(manifest_path, out_root):
    """Rebuild a dataset from its manifest into ``out_root``."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    config = SceneConfig.from_dict(manifest["config"])
    return write_dataset(out_root, config, manifest["n_scenes"], manifest["train_fraction"])


def load_dataset(root):
    """Read a written dataset back as ``(train, val)`` lists of ``(id, LabeledScene)``."""
    from . import formats as fio

    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    train, val = [], []
    for e in manifest["scenes"]:
        image = fio.read_pgm(os.path.join(root, e["image"]))
        mask = (fio.read_pgm(os.path.join(root, e["mask"])) > 127).astype(np.uint8)
        ann = fio.read_annotation(os.path.join(root, e["annotation"]))
        scene = LabeledScene(image, mask, ann["fasteners"])
        (train if e["split"] == "train" else val).append((e["id"], scene))
    return train, val
