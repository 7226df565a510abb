"""Target-aware occlusion synthesis.

Converts ordinary instance-mask datasets into amodal training samples:
pick a target object, crop an occluder from another image, overlay it at a
random position with a bounded overlap, blur the paste boundary, filter
with geometric validity rules, and write deterministic shards.

Per-sample seeds derive from (config seed, sample index), so any sample is
regenerable in isolation and worker count never changes output bytes.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, CorruptRleError, ExhaustionError, ShapeMismatchError
from .masks import (
    BBox,
    BinaryMask,
    RleMask,
    bbox_of,
    expand_box,
    mask_and,
    mask_from_png,
    mask_sub,
    mask_to_png,
    rle_decode,
    rle_from_text,
)
from .seeding import derive_rng, derive_seed

ROI_EXPAND_FACTOR = 0.2  # box growth per axis; input area becomes 1.44x
MAX_RETRIES = 64


@dataclass(frozen=True)
class SourceRecord:
    image_path: str
    width: int
    height: int
    instances: Tuple[Tuple[RleMask, Optional[str]], ...]


@dataclass(frozen=True)
class ValidityRules:
    min_visible_fraction: float = 0.2
    max_visible_fraction: float = 0.95
    require_occluder_inside: bool = False
    min_occlusion_pixels: int = 8

    def __post_init__(self):
        if not (0 <= self.min_visible_fraction < self.max_visible_fraction <= 1):
            raise ConfigError("need 0 <= min_visible < max_visible <= 1")


@dataclass(frozen=True)
class SynthConfig:
    target_area_range: Tuple[float, float] = (0.02, 0.30)
    occluder_rel_size_range: Tuple[float, float] = (0.5, 1.5)
    overlap_range: Tuple[float, float] = (0.1, 0.7)
    blur_kernel_k: int = 5
    blur_sigma: float = 1.0
    boundary_band_radius: int = 2
    seed: int = 0
    validity: ValidityRules = field(default_factory=ValidityRules)

    def __post_init__(self):
        for lo, hi in (self.target_area_range, self.overlap_range):
            if not (0 < lo <= hi <= 1):
                raise ConfigError(f"fraction range ({lo}, {hi}) must satisfy 0 < min <= max <= 1")
        lo, hi = self.occluder_rel_size_range
        if not (0 < lo <= hi):
            raise ConfigError("occluder size range must be positive")
        if self.blur_kernel_k < 1 or self.blur_kernel_k % 2 == 0:
            raise ConfigError("blur kernel must be odd and >= 1")
        if self.blur_sigma <= 0:
            raise ConfigError("blur sigma must be > 0")
        if self.boundary_band_radius < 0:
            raise ConfigError("boundary band radius must be >= 0")


@dataclass
class AmodalSample:
    image: np.ndarray  # (H, W, 3) uint8
    amodal_mask: BinaryMask
    visible_mask: BinaryMask
    occlusion_mask: BinaryMask
    occluder_mask: BinaryMask
    roi_box: BBox
    meta: dict


def check_sample_invariants(s: AmodalSample) -> None:
    """Raise if the visible/occlusion/amodal partition is broken."""
    vis, occ, amo = s.visible_mask, s.occlusion_mask, s.amodal_mask
    if not mask_and(vis, occ).is_empty():
        raise ShapeMismatchError("visible and occlusion masks overlap")
    if not np.array_equal(vis.array | occ.array, amo.array):
        raise ShapeMismatchError("visible | occlusion != amodal")
    if not mask_sub(occ, s.occluder_mask).is_empty():
        raise ShapeMismatchError("occlusion not contained in occluder")
    h, w = s.image.shape[:2]
    want_roi = expand_box(bbox_of(amo), ROI_EXPAND_FACTOR, (w, h))
    inside = (
        s.roi_box.x_min <= want_roi.x_min
        and s.roi_box.y_min <= want_roi.y_min
        and s.roi_box.x_max >= want_roi.x_max
        and s.roi_box.y_max >= want_roi.y_max
    )
    if not inside:
        raise ShapeMismatchError("roi_box does not cover the expanded amodal box")


# ---------------------------------------------------------------------------
# manifest


def load_image_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_image_rgb(arr: np.ndarray, path) -> None:
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_manifest(path) -> Iterator[SourceRecord]:
    """Lazily yield records from a JSON-lines manifest, in file order.

    Each line: {"image": path, "instances": [{"rle": "w h r0 ...",
    "category": optional}]}. Image paths resolve relative to the manifest.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    base = path.parent
    with open(path, "r", encoding="utf-8") as f:
        for idx, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"manifest record {idx}: bad JSON: {e}") from e
            img_path = Path(obj["image"])
            if not img_path.is_absolute():
                img_path = base / img_path
            if not img_path.is_file():
                raise ConfigError(f"manifest record {idx}: missing image {img_path}")
            with Image.open(img_path) as img:
                w, h = img.size
            instances = []
            for inst in obj.get("instances", []):
                try:
                    rle = rle_from_text(inst["rle"])
                except CorruptRleError as e:
                    raise CorruptRleError(f"manifest record {idx}: {e}") from e
                if (rle.width, rle.height) != (w, h):
                    raise ShapeMismatchError(
                        f"manifest record {idx}: mask {rle.width}x{rle.height} "
                        f"vs image {w}x{h}"
                    )
                instances.append((rle, inst.get("category")))
            yield SourceRecord(str(img_path), w, h, tuple(instances))


def _rle_popcount(rle: RleMask) -> int:
    return sum(rle.runs[1::2])


# ---------------------------------------------------------------------------
# target / occluder selection


def select_target(
    records: Sequence[SourceRecord], cfg: SynthConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, BinaryMask, str]:
    """Uniformly pick an instance whose area fraction is inside the target range."""
    lo, hi = cfg.target_area_range
    qualifying = []
    for ri, rec in enumerate(records):
        total = rec.width * rec.height
        for ii, (rle, _cat) in enumerate(rec.instances):
            frac = _rle_popcount(rle) / total
            if lo <= frac <= hi:
                qualifying.append((ri, ii))
    if not qualifying:
        raise ExhaustionError("no instance inside the target size range")
    ri, ii = qualifying[int(rng.integers(len(qualifying)))]
    rec = records[ri]
    mask = rle_decode(rec.instances[ii][0])
    return load_image_rgb(rec.image_path), mask, f"{ri}:{ii}"


def _half_plane_crop(mask_arr: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.nonzero(mask_arr)
    k = int(rng.integers(len(xs)))
    cx, cy = xs[k], ys[k]
    theta = rng.uniform(0, 2 * math.pi)
    nx, ny = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0 : mask_arr.shape[0], 0 : mask_arr.shape[1]]
    keep = (xx - cx) * nx + (yy - cy) * ny <= 0
    return mask_arr & keep


def crop_occluder(
    records: Sequence[SourceRecord],
    target_area: int,
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, BinaryMask, str]:
    """Crop an object (or a half-plane portion of one) at a size suited to the target.

    The returned patch is tight: image and mask are cut to the kept region's
    bounding box. Oversized donors are shrunk by intersecting with a random
    half-plane through a random interior point.
    """
    lo, hi = cfg.occluder_rel_size_range
    if not records:
        raise ExhaustionError("empty donor pool")
    for _ in range(MAX_RETRIES):
        ri = int(rng.integers(len(records)))
        rec = records[ri]
        if not rec.instances:
            continue
        ii = int(rng.integers(len(rec.instances)))
        rle = rec.instances[ii][0]
        area = _rle_popcount(rle)
        if area == 0:
            continue
        ratio = area / target_area
        if ratio < lo:
            continue
        mask_arr = rle_decode(rle).array
        if ratio > hi:
            mask_arr = _half_plane_crop(mask_arr, rng)
            area = int(mask_arr.sum())
            if area == 0 or not (lo <= area / target_area <= hi):
                continue
        mask = BinaryMask(mask_arr)
        box = bbox_of(mask)
        image = load_image_rgb(rec.image_path)
        patch = image[box.y_min : box.y_max, box.x_min : box.x_max].copy()
        patch_mask = BinaryMask(mask_arr[box.y_min : box.y_max, box.x_min : box.x_max])
        return patch, patch_mask, f"{ri}:{ii}"
    raise ExhaustionError(f"no occluder of suitable size after {MAX_RETRIES} tries")


# ---------------------------------------------------------------------------
# Gaussian boundary blur


def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian sampled on the integer lattice, normalized to sum 1.

    Samples (1 / 2*pi*sigma^2) * exp(-(x^2+y^2) / 2*sigma^2) for
    x, y in [-k//2, k//2]; renormalizing keeps smoothing energy-preserving
    despite truncation.
    """
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 1, got {k}")
    if sigma <= 0:
        raise ConfigError("sigma must be > 0")
    half = k // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    g = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2)) / (2.0 * math.pi * sigma**2)
    return g / g.sum()


def _occluder_edge(mask_arr: np.ndarray) -> np.ndarray:
    """Pixels whose value differs from a 4-neighbour (both sides of the boundary)."""
    edge = np.zeros_like(mask_arr)
    edge[:-1, :] |= mask_arr[:-1, :] != mask_arr[1:, :]
    edge[1:, :] |= mask_arr[1:, :] != mask_arr[:-1, :]
    edge[:, :-1] |= mask_arr[:, :-1] != mask_arr[:, 1:]
    edge[:, 1:] |= mask_arr[:, 1:] != mask_arr[:, :-1]
    return edge


def _dilate(mask_arr: np.ndarray, steps: int) -> np.ndarray:
    out = mask_arr.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[:-1, :] |= out[1:, :]
        grown[1:, :] |= out[:-1, :]
        grown[:, :-1] |= out[:, 1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        out = grown
    return out


def blur_boundary(image: np.ndarray, occluder_mask: BinaryMask, cfg: SynthConfig) -> np.ndarray:
    """Gaussian-smooth pixels within the boundary band of the occluder edge.

    The band is every pixel at Chebyshev distance < boundary_band_radius
    from an edge pixel (radius 0 means no pixel changes). Outside the band
    the output bytes equal the input; edge-of-image sampling replicates
    border pixels. Masks are never blurred, only image pixels.
    """
    if image.shape[:2] != (occluder_mask.height, occluder_mask.width):
        raise ShapeMismatchError("image and occluder mask dimensions differ")
    out = image.copy()
    r = cfg.boundary_band_radius
    if r == 0 or occluder_mask.is_empty():
        return out
    band = _occluder_edge(occluder_mask.array)
    if not band.any():
        return out
    band = _dilate(band, r - 1)
    kernel = gaussian_kernel(cfg.blur_kernel_k, cfg.blur_sigma)
    half = cfg.blur_kernel_k // 2
    padded = np.pad(image.astype(np.float64), ((half, half), (half, half), (0, 0)), mode="edge")
    h, w = image.shape[:2]
    acc = np.zeros((h, w, image.shape[2]), dtype=np.float64)
    for dy in range(cfg.blur_kernel_k):
        for dx in range(cfg.blur_kernel_k):
            acc += kernel[dy, dx] * padded[dy : dy + h, dx : dx + w]
    out[band] = np.clip(np.rint(acc[band]), 0, 255).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# compositing


def _overlap_fraction(target_arr: np.ndarray, placed_arr: np.ndarray) -> float:
    t = int(target_arr.sum())
    return int((target_arr & placed_arr).sum()) / t if t else 0.0


def _place_patch(canvas_shape, patch_mask: np.ndarray, ox: int, oy: int) -> np.ndarray:
    h, w = canvas_shape
    ph, pw = patch_mask.shape
    placed = np.zeros((h, w), dtype=bool)
    x0, y0 = max(0, ox), max(0, oy)
    x1, y1 = min(w, ox + pw), min(h, oy + ph)
    if x0 < x1 and y0 < y1:
        placed[y0:y1, x0:x1] = patch_mask[y0 - oy : y1 - oy, x0 - ox : x1 - ox]
    return placed


def composite(
    target: Tuple[np.ndarray, BinaryMask, str],
    occluder: Tuple[np.ndarray, BinaryMask, str],
    cfg: SynthConfig,
    rng: np.random.Generator,
    sample_seed: Optional[int] = None,
) -> AmodalSample:
    """Overlay the occluder at a random position with overlap inside the range."""
    image, target_mask, target_id = target
    patch, patch_mask, occluder_id = occluder
    h, w = image.shape[:2]
    tb = bbox_of(target_mask)
    ph, pw = patch_mask.height, patch_mask.width
    lo, hi = cfg.overlap_range
    for _ in range(MAX_RETRIES):
        ox = int(rng.integers(tb.x_min - pw + 1, tb.x_max))
        oy = int(rng.integers(tb.y_min - ph + 1, tb.y_max))
        placed = _place_patch((h, w), patch_mask.array, ox, oy)
        frac = _overlap_fraction(target_mask.array, placed)
        if lo <= frac <= hi:
            break
    else:
        raise ExhaustionError(f"no placement with overlap in [{lo}, {hi}] after {MAX_RETRIES} tries")

    occluder_mask = BinaryMask(placed)
    occlusion = mask_and(target_mask, occluder_mask)
    visible = mask_sub(target_mask, occluder_mask)
    out = image.copy()
    ys, xs = np.nonzero(placed)
    out[ys, xs] = patch[ys - oy, xs - ox]
    out = blur_boundary(out, occluder_mask, cfg)
    roi = expand_box(tb, ROI_EXPAND_FACTOR, (w, h))
    meta = {
        "target_source_id": target_id,
        "occluder_source_id": occluder_id,
        "placement_offset": [ox, oy],
        "overlap_achieved": frac,
        "blur": {
            "kernel_k": cfg.blur_kernel_k,
            "sigma": cfg.blur_sigma,
            "band_radius": cfg.boundary_band_radius,
        },
        "sample_seed": sample_seed,
    }
    return AmodalSample(out, target_mask, visible, occlusion, occluder_mask, roi, meta)


def validate_sample(s: AmodalSample, rules: ValidityRules) -> Tuple[bool, Optional[str]]:
    """Geometric stand-in for the sample filter; bounds are closed intervals."""
    amodal = s.amodal_mask.popcount()
    frac = s.visible_mask.popcount() / amodal if amodal else 0.0
    if frac > rules.max_visible_fraction:
        return False, "no occlusion"
    if frac < rules.min_visible_fraction:
        return False, "too little visible"
    if s.occlusion_mask.popcount() < rules.min_occlusion_pixels:
        return False, "too few occlusion pixels"
    if rules.require_occluder_inside:
        arr = s.occluder_mask.array
        if arr[0, :].any() or arr[-1, :].any() or arr[:, 0].any() or arr[:, -1].any():
            return False, "occluder touches border"
    return True, None


# ---------------------------------------------------------------------------
# shard output


def sample_dir_name(index: int) -> str:
    return f"sample_{index:05d}"


def save_sample(s: AmodalSample, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image_rgb(s.image, directory / "image.png")
    mask_to_png(s.amodal_mask, directory / "amodal.png")
    mask_to_png(s.visible_mask, directory / "visible.png")
    mask_to_png(s.occlusion_mask, directory / "occlusion.png")
    mask_to_png(s.occluder_mask, directory / "occluder.png")
    meta = dict(s.meta)
    meta["roi_box"] = [s.roi_box.x_min, s.roi_box.y_min, s.roi_box.x_max, s.roi_box.y_max]
    with open(directory / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def load_sample(directory) -> AmodalSample:
    directory = Path(directory)
    with open(directory / "meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    roi = BBox(*meta.pop("roi_box"))
    return AmodalSample(
        image=load_image_rgb(directory / "image.png"),
        amodal_mask=mask_from_png(directory / "amodal.png"),
        visible_mask=mask_from_png(directory / "visible.png"),
        occlusion_mask=mask_from_png(directory / "occlusion.png"),
        occluder_mask=mask_from_png(directory / "occluder.png"),
        roi_box=roi,
        meta=meta,
    )


def load_shards(out_dir) -> List[AmodalSample]:
    samples_dir = Path(out_dir) / "samples"
    if not samples_dir.is_dir():
        raise ConfigError(f"no samples directory under {out_dir}")
    return [load_sample(d) for d in sorted(samples_dir.iterdir()) if d.is_dir()]


def _generate_one(records, cfg: SynthConfig, index: int) -> Tuple[AmodalSample, Counter]:
    sample_seed = derive_seed(cfg.seed, index)
    rejections: Counter = Counter()
    for attempt in range(MAX_RETRIES):
        rng = derive_rng(cfg.seed, index, attempt)
        try:
            target = select_target(records, cfg, rng)
            target_area = target[1].popcount()
            occluder = crop_occluder(records, target_area, cfg, rng)
            sample = composite(target, occluder, cfg, rng, sample_seed=sample_seed)
        except ExhaustionError as e:
            rejections[type(e).code] += 1
            continue
        ok, reason = validate_sample(sample, cfg.validity)
        if ok:
            sample.meta["index"] = index
            return sample, rejections
        rejections[reason] += 1
    raise ExhaustionError(f"sample {index}: no valid sample within {MAX_RETRIES} attempts")


def _worker_batch(args) -> dict:
    records, cfg, indices, out_dir = args
    rejections: Counter = Counter()
    for index in indices:
        sample, rej = _generate_one(records, cfg, index)
        rejections.update(rej)
        save_sample(sample, Path(out_dir) / "samples" / sample_dir_name(index))
    return dict(rejections)


def synthesize(
    records: Sequence[SourceRecord],
    cfg: SynthConfig,
    n: int,
    out_dir,
    workers: int = 1,
) -> dict:
    """Write exactly n valid samples as shards plus a summary.

    Output bytes are a pure function of (records, cfg, n) regardless of
    worker count.
    """
    if n < 0:
        raise ConfigError("n must be >= 0")
    records = list(records)
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    rejections: Counter = Counter()
    indices = list(range(n))
    if workers > 1 and n > 1:
        chunks = [indices[i::workers] for i in range(workers)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            for result in pool.map(_worker_batch, [(records, cfg, c, out_dir) for c in chunks]):
                rejections.update(result)
    else:
        rejections.update(_worker_batch((records, cfg, indices, out_dir)))
    summary = {
        "n": n,
        "rejections": {k: rejections[k] for k in sorted(rejections)},
        "config": asdict(cfg),
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    return summary
