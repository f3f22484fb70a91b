"""Seeded augmentation suite and input normalisation.

Every transform is a pure function of ``(params, image, rng)``. Randomness
comes from :func:`make_rng`, a numpy ``Generator`` over the Philox-4x64
counter-based bit generator keyed directly by the seed, so a given
``(pipeline, image, seed)`` produces the same bytes on any platform running
the same numpy.

Resampling is bilinear with reflect-101 borders throughout. The three
distortions use these displacement fields (``(x, y)`` is the output pixel,
the sampled source position is returned):

* OpticalDistortion: radial barrel model. With centre
  ``c = (w/2 + sx*w, h/2 + sy*h)`` and ``u = (x - cx)/w, v = (y - cy)/h``,
  ``src = c + (u, v) * (1 + k*(u^2 + v^2)) * (w, h)``.
* GridDistortion: the image is cut into ``num_steps`` cells per axis; cell
  ``i`` is stretched by ``1 + d_i`` with ``d_i ~ U(-limit, limit)`` and the
  source coordinate is the running sum of stretched cell widths.
* ElasticTransform: ``dx, dy ~ U(-1, 1)`` per pixel, smoothed with a Gaussian
  of standard deviation ``sigma`` (17x17 kernel), scaled by ``alpha``.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import yaml

from .wsi import RasterImage, decode_image, resize_array, write_png

BORDER = cv2.BORDER_REFLECT_101
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class InvalidParams(ValueError):
    pass


def make_rng(seed, *keys) -> np.random.Generator:
    """Philox generator keyed by ``seed`` (and optional extra integer keys)."""
    if keys:
        ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) & (2**64 - 1) for k in keys]])
        return np.random.Generator(np.random.Philox(ss))
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def stable_key(text: str) -> int:
    """64-bit key derived from a string, stable across processes."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


# -- helpers -------------------------------------------------------------------


def _lut(img: np.ndarray, table: np.ndarray) -> np.ndarray:
    table = np.clip(np.floor(table + 0.5), 0, 255).astype(np.uint8)
    return table[img]


def _odd_ksize(rng, limit) -> int:
    lo, hi = limit
    choices = [k for k in range(lo, hi + 1) if k % 2 == 1]
    return int(choices[rng.integers(len(choices))])


def _remap(img: np.ndarray, map_x: np.ndarray, map_y: np.ndarray) -> np.ndarray:
    return cv2.remap(img, map_x.astype(np.float32), map_y.astype(np.float32),
                     interpolation=cv2.INTER_LINEAR, borderMode=BORDER)


def _pixel_grid(h: int, w: int):
    return np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))


def _as_range(value, symmetric=True):
    if isinstance(value, (int, float)):
        return (-value, value) if symmetric else (value, value)
    lo, hi = value
    return (lo, hi)


# -- transforms ----------------------------------------------------------------
# Each takes (img, rng, **params) and returns a new uint8 array.


def to_gray(img, rng):
    g = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2GRAY)
    return np.repeat(g[..., None], 3, axis=2)


def transpose(img, rng):
    return np.ascontiguousarray(img.transpose(1, 0, 2))


def vertical_flip(img, rng):
    return np.ascontiguousarray(img[::-1])


def horizontal_flip(img, rng):
    return np.ascontiguousarray(img[:, ::-1])


def random_brightness(img, rng, limit=0.2):
    lo, hi = _as_range(limit)
    beta = rng.uniform(lo, hi)
    return _lut(img, np.arange(256, dtype=np.float64) + beta * 255.0)


def random_contrast(img, rng, limit=0.2):
    lo, hi = _as_range(limit)
    alpha = 1.0 + rng.uniform(lo, hi)
    return _lut(img, np.arange(256, dtype=np.float64) * alpha)


def motion_blur(img, rng, blur_limit=(3, 7)):
    k = _odd_ksize(rng, _as_range(blur_limit, symmetric=False))
    theta = rng.uniform(0.0, math.pi)
    r = (k - 1) / 2
    kernel = np.zeros((k, k), dtype=np.uint8)
    dx, dy = r * math.cos(theta), r * math.sin(theta)
    p0 = (int(round(r - dx)), int(round(r - dy)))
    p1 = (int(round(r + dx)), int(round(r + dy)))
    cv2.line(kernel, p0, p1, 1, thickness=1)
    kernel = kernel.astype(np.float32)
    kernel /= kernel.sum()
    return cv2.filter2D(img, -1, kernel, borderType=BORDER)


def median_blur(img, rng, blur_limit=(3, 7)):
    k = _odd_ksize(rng, _as_range(blur_limit, symmetric=False))
    return cv2.medianBlur(np.ascontiguousarray(img), k)


def gaussian_blur(img, rng, blur_limit=(3, 7), sigma=0.0):
    k = _odd_ksize(rng, _as_range(blur_limit, symmetric=False))
    return cv2.GaussianBlur(img, (k, k), sigma, borderType=BORDER)


def gauss_noise(img, rng, var_limit=(10.0, 50.0), mean=0.0):
    var = rng.uniform(*var_limit)
    noise = rng.normal(mean, math.sqrt(var), size=img.shape)
    return np.clip(np.floor(img + noise + 0.5), 0, 255).astype(np.uint8)


def optical_distortion(img, rng, distort_limit=0.05, shift_limit=0.05):
    h, w = img.shape[:2]
    k = rng.uniform(*_as_range(distort_limit))
    sx = rng.uniform(*_as_range(shift_limit))
    sy = rng.uniform(*_as_range(shift_limit))
    if k == 0.0:
        return img.copy()
    cx, cy = w / 2 + sx * w, h / 2 + sy * h
    x, y = _pixel_grid(h, w)
    u, v = (x - cx) / w, (y - cy) / h
    factor = 1.0 + k * (u * u + v * v)
    return _remap(img, cx + u * factor * w, cy + v * factor * h)


def _grid_axis(n: int, steps: int, stretch: np.ndarray) -> np.ndarray:
    cell = max(n // steps, 1)
    coords = np.empty(n, dtype=np.float64)
    prev = 0.0
    for idx, start in enumerate(range(0, n, cell)):
        end = min(start + cell, n)
        cur = prev + (end - start) * stretch[min(idx, len(stretch) - 1)]
        coords[start:end] = np.linspace(prev, cur, end - start, endpoint=False)
        prev = cur
    return coords


def grid_distortion(img, rng, num_steps=5, distort_limit=0.3):
    h, w = img.shape[:2]
    lo, hi = _as_range(distort_limit)
    xsteps = 1.0 + rng.uniform(lo, hi, size=num_steps + 1)
    ysteps = 1.0 + rng.uniform(lo, hi, size=num_steps + 1)
    xs = _grid_axis(w, num_steps, xsteps)
    ys = _grid_axis(h, num_steps, ysteps)
    map_x, map_y = np.meshgrid(xs, ys)
    return _remap(img, map_x, map_y)


def elastic_transform(img, rng, alpha=1.0, sigma=50.0):
    h, w = img.shape[:2]
    dx = rng.uniform(-1.0, 1.0, size=(h, w)).astype(np.float32)
    dy = rng.uniform(-1.0, 1.0, size=(h, w)).astype(np.float32)
    if alpha == 0.0:
        return img.copy()
    dx = cv2.GaussianBlur(dx, (17, 17), sigma, borderType=BORDER) * alpha
    dy = cv2.GaussianBlur(dy, (17, 17), sigma, borderType=BORDER) * alpha
    x, y = _pixel_grid(h, w)
    return _remap(img, x + dx, y + dy)


def clahe_gray(gray: np.ndarray, clip_limit: float = 4.0, tiles=(8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation of a uint8 plane.

    Follows OpenCV's formulation: the plane is reflect-padded when its size
    is not a multiple of the tile grid, each tile histogram is clipped at
    ``max(int(clip_limit * tile_area / 256), 1)`` with the excess spread
    evenly (remainder one count per stride), and the per-tile lookup tables
    are blended bilinearly between tile centres.
    """
    ty, tx = tiles
    h, w = gray.shape
    src = gray
    if h % ty or w % tx:
        # OpenCV pads both axes by ``tiles - n % tiles`` here, a full extra
        # tile on an axis that already divides evenly
        src = cv2.copyMakeBorder(gray, 0, ty - h % ty, 0, tx - w % tx, BORDER)
    th, tw = src.shape[0] // ty, src.shape[1] // tx
    area = th * tw
    blocks = src.reshape(ty, th, tx, tw).transpose(0, 2, 1, 3).reshape(ty * tx, area)
    hist = np.stack([np.bincount(b, minlength=256) for b in blocks]).astype(np.int64)

    if clip_limit > 0:
        limit = max(int(clip_limit * area / 256), 1)
        excess = np.maximum(hist - limit, 0).sum(axis=1)
        hist = np.minimum(hist, limit)
        hist += (excess // 256)[:, None]
        residual = excess % 256
        for t in np.flatnonzero(residual):
            step = max(256 // residual[t], 1)
            hist[t, : residual[t] * step : step] += 1

    lut = np.clip(np.rint(np.cumsum(hist, axis=1) * (255.0 / area)), 0, 255)
    lut = lut.astype(np.float32).reshape(ty, tx, 256)

    yf = np.arange(h, dtype=np.float32) / th - 0.5
    xf = np.arange(w, dtype=np.float32) / tw - 0.5
    y1 = np.floor(yf).astype(np.int64)
    x1 = np.floor(xf).astype(np.int64)
    ya = (yf - y1)[:, None]
    xa = (xf - x1)[None, :]
    y2 = np.minimum(y1 + 1, ty - 1)
    x2 = np.minimum(x1 + 1, tx - 1)
    y1 = np.maximum(y1, 0)
    x1 = np.maximum(x1, 0)
    Y1, Y2 = y1[:, None], y2[:, None]
    X1, X2 = x1[None, :], x2[None, :]
    v = gray
    top = lut[Y1, X1, v] * (1 - xa) + lut[Y1, X2, v] * xa
    bot = lut[Y2, X1, v] * (1 - xa) + lut[Y2, X2, v] * xa
    res = top * (1 - ya) + bot * ya
    return np.clip(np.rint(res), 0, 255).astype(np.uint8)


def clahe(img, rng, clip_limit=4.0, tile_grid_size=(8, 8)):
    if isinstance(clip_limit, (list, tuple)):
        clip_limit = rng.uniform(*clip_limit)
    lab = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2LAB)
    lab[..., 0] = clahe_gray(np.ascontiguousarray(lab[..., 0]), clip_limit, tuple(tile_grid_size))
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


def hue_saturation_value(img, rng, hue_shift_limit=20, sat_shift_limit=30, val_shift_limit=20):
    dh = rng.uniform(*_as_range(hue_shift_limit))
    ds = rng.uniform(*_as_range(sat_shift_limit))
    dv = rng.uniform(*_as_range(val_shift_limit))
    if dh == 0 and ds == 0 and dv == 0:
        return img.copy()
    hsv = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2HSV)
    ramp = np.arange(256, dtype=np.float64)
    hue_lut = np.mod(np.floor(ramp + dh + 0.5), 180).astype(np.uint8)
    hsv[..., 0] = hue_lut[hsv[..., 0]]
    hsv[..., 1] = _lut(hsv[..., 1], ramp + ds)
    hsv[..., 2] = _lut(hsv[..., 2], ramp + dv)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def shift_scale_rotate(img, rng, shift_limit=0.0625, scale_limit=0.1, rotate_limit=45):
    h, w = img.shape[:2]
    angle = rng.uniform(*_as_range(rotate_limit))
    lo, hi = _as_range(scale_limit)
    scale = 1.0 + rng.uniform(lo, hi)
    sx = rng.uniform(*_as_range(shift_limit))
    sy = rng.uniform(*_as_range(shift_limit))
    m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, scale)
    m[0, 2] += sx * w
    m[1, 2] += sy * h
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=BORDER)


def random_resized_crop(img, rng, size=None, scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)):
    h, w = img.shape[:2]
    out_h, out_w = (h, w) if size is None else (int(size[0]), int(size[1]))
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch, endpoint=True))
            left = int(rng.integers(0, w - cw, endpoint=True))
            break
    else:
        # centre crop at the clamped aspect ratio
        in_ratio = w / h
        if in_ratio < ratio[0]:
            cw, ch = w, int(round(w / ratio[0]))
        elif in_ratio > ratio[1]:
            ch, cw = h, int(round(h * ratio[1]))
        else:
            cw, ch = w, h
        top, left = (h - ch) // 2, (w - cw) // 2
    crop = img[top : top + ch, left : left + cw]
    if crop.shape[:2] == (out_h, out_w):
        return crop.copy()
    return resize_array(crop, out_h, out_w)


def cutout(img, rng, num_holes=8, max_h_size=None, max_w_size=None, fill_value=0):
    """Blank ``num_holes`` fixed-size rectangles placed fully inside the image.

    Without explicit sizes a hole is 8x8 at 224 px and scales with the
    shorter image side.
    """
    h, w = img.shape[:2]
    default = max(1, int(round(8 * min(h, w) / 224)))
    hh = min(int(max_h_size or default), h)
    hw = min(int(max_w_size or default), w)
    out = img.copy()
    for _ in range(int(num_holes)):
        y = int(rng.integers(0, h - hh, endpoint=True))
        x = int(rng.integers(0, w - hw, endpoint=True))
        out[y : y + hh, x : x + hw] = fill_value
    return out


# -- specs and pipelines ---------------------------------------------------------


def _nonneg(*names):
    """Scalars must be >= 0; ``(lo, hi)`` pairs must be ordered."""
    def check(params):
        for n in names:
            v = params[n]
            if isinstance(v, (list, tuple)):
                if len(v) != 2 or v[0] > v[1]:
                    raise InvalidParams(f"{n} must be a (lo, hi) pair, got {v!r}")
                params[n] = (float(v[0]), float(v[1]))
            elif not isinstance(v, (int, float)) or v < 0:
                raise InvalidParams(f"{n} must be non-negative, got {v!r}")
    return check


def _check_blur(params):
    lo, hi = _as_range(params["blur_limit"], symmetric=False)
    if lo < 3 or hi < lo or not any(k % 2 for k in range(int(lo), int(hi) + 1)):
        raise InvalidParams(f"blur_limit needs an odd kernel size >= 3, got {params['blur_limit']!r}")
    params["blur_limit"] = (int(lo), int(hi))


def _check_var(params):
    lo, hi = params["var_limit"] if isinstance(params["var_limit"], (list, tuple)) else (0, params["var_limit"])
    if lo < 0 or hi < lo:
        raise InvalidParams(f"bad var_limit {params['var_limit']!r}")
    params["var_limit"] = (float(lo), float(hi))


def _check_clahe(params):
    tiles = params["tile_grid_size"]
    if len(tiles) != 2 or min(tiles) < 1:
        raise InvalidParams(f"bad tile_grid_size {tiles!r}")
    params["tile_grid_size"] = (int(tiles[0]), int(tiles[1]))
    clip = params["clip_limit"]
    lo, hi = clip if isinstance(clip, (list, tuple)) else (clip, clip)
    if lo <= 0 or hi < lo:
        raise InvalidParams(f"bad clip_limit {clip!r}")


def _check_grid(params):
    if int(params["num_steps"]) < 1:
        raise InvalidParams("num_steps must be >= 1")
    params["num_steps"] = int(params["num_steps"])
    _nonneg("distort_limit")(params)


def _check_rrc(params):
    if params["size"] is not None and (len(params["size"]) != 2 or min(params["size"]) < 1):
        raise InvalidParams(f"bad size {params['size']!r}")
    lo, hi = params["scale"]
    if not 0 < lo <= hi <= 1:
        raise InvalidParams(f"bad scale {params['scale']!r}")
    rlo, rhi = params["ratio"]
    if not 0 < rlo <= rhi:
        raise InvalidParams(f"bad ratio {params['ratio']!r}")


def _check_cutout(params):
    if int(params["num_holes"]) < 0:
        raise InvalidParams("num_holes must be >= 0")
    for n in ("max_h_size", "max_w_size"):
        if params[n] is not None and int(params[n]) < 1:
            raise InvalidParams(f"{n} must be >= 1")
    if not 0 <= params["fill_value"] <= 255:
        raise InvalidParams("fill_value must be in 0..255")


@dataclass(frozen=True)
class _Transform:
    func: object
    defaults: dict
    check: object = None


TRANSFORMS = {
    "ToGray": _Transform(to_gray, {}),
    "Transpose": _Transform(transpose, {}),
    "VerticalFlip": _Transform(vertical_flip, {}),
    "HorizontalFlip": _Transform(horizontal_flip, {}),
    "RandomBrightness": _Transform(random_brightness, {"limit": 0.2}, _nonneg("limit")),
    "RandomContrast": _Transform(random_contrast, {"limit": 0.2}, _nonneg("limit")),
    "MotionBlur": _Transform(motion_blur, {"blur_limit": (3, 7)}, _check_blur),
    "MedianBlur": _Transform(median_blur, {"blur_limit": (3, 7)}, _check_blur),
    "GaussianBlur": _Transform(gaussian_blur, {"blur_limit": (3, 7), "sigma": 0.0}, _check_blur),
    "GaussNoise": _Transform(gauss_noise, {"var_limit": (10.0, 50.0), "mean": 0.0}, _check_var),
    "OpticalDistortion": _Transform(
        optical_distortion, {"distort_limit": 0.05, "shift_limit": 0.05},
        _nonneg("distort_limit", "shift_limit"),
    ),
    "GridDistortion": _Transform(grid_distortion, {"num_steps": 5, "distort_limit": 0.3}, _check_grid),
    "ElasticTransform": _Transform(elastic_transform, {"alpha": 1.0, "sigma": 50.0}, _nonneg("alpha", "sigma")),
    "CLAHE": _Transform(clahe, {"clip_limit": 4.0, "tile_grid_size": (8, 8)}, _check_clahe),
    "HueSaturationValue": _Transform(
        hue_saturation_value,
        {"hue_shift_limit": 20, "sat_shift_limit": 30, "val_shift_limit": 20},
        _nonneg("hue_shift_limit", "sat_shift_limit", "val_shift_limit"),
    ),
    "ShiftScaleRotate": _Transform(
        shift_scale_rotate, {"shift_limit": 0.0625, "scale_limit": 0.1, "rotate_limit": 45},
        _nonneg("shift_limit", "scale_limit", "rotate_limit"),
    ),
    "RandomResizedCrop": _Transform(
        random_resized_crop, {"size": None, "scale": (0.08, 1.0), "ratio": (3 / 4, 4 / 3)}, _check_rrc
    ),
    "Cutout": _Transform(
        cutout, {"num_holes": 8, "max_h_size": None, "max_w_size": None, "fill_value": 0}, _check_cutout
    ),
}


@dataclass(frozen=True)
class TransformSpec:
    name: str
    probability: float = 0.5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise InvalidParams(f"unknown transform {self.name!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidParams(f"{self.name}: probability {self.probability} outside [0, 1]")
        unknown = set(self.params) - set(TRANSFORMS[self.name].defaults)
        if unknown:
            raise InvalidParams(f"{self.name}: unknown parameter(s) {sorted(unknown)}")
        self.resolved_params()

    def resolved_params(self) -> dict:
        t = TRANSFORMS[self.name]
        params = {**t.defaults, **self.params}
        if t.check is not None:
            t.check(params)
        return params


@dataclass(frozen=True)
class OneOf:
    transforms: tuple
    probability: float = 0.5

    def __post_init__(self):
        if not self.transforms:
            raise InvalidParams("OneOf group must not be empty")
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidParams(f"OneOf probability {self.probability} outside [0, 1]")
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def member_weights(self) -> np.ndarray:
        p = np.array([t.probability for t in self.transforms], dtype=np.float64)
        if p.sum() <= 0:
            return np.full(len(p), 1.0 / len(p))
        return p / p.sum()


@dataclass(frozen=True)
class AugPipeline:
    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))


def apply_transform(spec: TransformSpec, img: RasterImage, rng: np.random.Generator) -> RasterImage:
    """Apply ``spec`` unconditionally, drawing its random parameters from ``rng``."""
    if img.height < 1 or img.width < 1:
        raise InvalidParams("empty raster")
    params = spec.resolved_params()
    out = TRANSFORMS[spec.name].func(np.ascontiguousarray(img.data), rng, **params)
    return RasterImage(out)


def compose_pipeline(pipeline: AugPipeline, img: RasterImage, seed=None, rng=None) -> RasterImage:
    """Run the stages in order.

    Each stage draws one uniform to decide whether it fires. A firing OneOf
    then draws a member index (weights proportional to member probabilities,
    uniform when they are equal) and applies that member unconditionally.
    """
    if rng is None:
        rng = make_rng(0 if seed is None else seed)
    for stage in pipeline.stages:
        if rng.random() >= stage.probability:
            continue
        if isinstance(stage, OneOf):
            idx = int(rng.choice(len(stage.transforms), p=stage.member_weights()))
            img = apply_transform(stage.transforms[idx], img, rng)
        else:
            img = apply_transform(stage, img, rng)
    return img


# -- normalisation ---------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise InvalidParams("mean and std need three components")
        if any(s <= 0 for s in self.std):
            raise InvalidParams("std components must be positive")


def normalize(img: RasterImage, spec: NormalizationSpec = NormalizationSpec(), dtype=np.float64) -> np.ndarray:
    """``(x / 255 - mean) / std`` per channel, returned channel-first (3, H, W)."""
    x = img.data.astype(np.float64) / 255.0
    mean = np.asarray(spec.mean, dtype=np.float64)
    std = np.asarray(spec.std, dtype=np.float64)
    return ((x - mean) / std).transpose(2, 0, 1).astype(dtype, copy=False)


def denormalize(tensor: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Inverse of :func:`normalize`, back to (H, W, 3) values in [0, 1]."""
    t = np.asarray(tensor, dtype=np.float64).transpose(1, 2, 0)
    return t * np.asarray(spec.std) + np.asarray(spec.mean)


def prepare_input(img: RasterImage, pipeline: AugPipeline | None, seed, train: bool,
                  norm: NormalizationSpec = NormalizationSpec(), dtype=np.float32) -> np.ndarray:
    """Augment (training only) then normalise."""
    if train and pipeline is not None:
        img = compose_pipeline(pipeline, img, seed)
    return normalize(img, norm, dtype)


# -- config files ------------------------------------------------------------------


def _spec_from(entry: dict) -> TransformSpec:
    entry = dict(entry)
    try:
        name = entry.pop("transform")
    except KeyError:
        raise InvalidParams(f"stage without 'transform' key: {entry!r}") from None
    p = float(entry.pop("p", 0.5))
    params = entry.pop("params", {}) or {}
    params.update(entry)
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
    return TransformSpec(name, p, params)


def pipeline_from_dict(doc: dict) -> tuple[AugPipeline, NormalizationSpec]:
    stages = []
    for entry in doc.get("pipeline", []):
        if "one_of" in entry:
            group = entry["one_of"]
            members = tuple(_spec_from(m) for m in group.get("transforms", []))
            stages.append(OneOf(members, float(group.get("p", 0.5))))
        else:
            stages.append(_spec_from(entry))
    norm_doc = doc.get("normalization") or {}
    norm = NormalizationSpec(
        tuple(norm_doc.get("mean", IMAGENET_MEAN)), tuple(norm_doc.get("std", IMAGENET_STD))
    )
    return AugPipeline(tuple(stages)), norm


def load_pipeline(path) -> tuple[AugPipeline, NormalizationSpec]:
    """Load a YAML augmentation config (see ``configs/augment.yaml``)."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return pipeline_from_dict(doc)


DEFAULT_ORDER = (
    "ToGray", "Transpose", "VerticalFlip", "HorizontalFlip", "RandomBrightness", "RandomContrast",
    ("MotionBlur", "MedianBlur", "GaussianBlur", "GaussNoise"),
    ("OpticalDistortion", "GridDistortion", "ElasticTransform"),
    "CLAHE", "HueSaturationValue", "ShiftScaleRotate", "RandomResizedCrop", "Cutout",
)


def default_pipeline(p: float = 0.5) -> AugPipeline:
    """The full training suite with library-default magnitudes."""
    stages = []
    for item in DEFAULT_ORDER:
        if isinstance(item, tuple):
            stages.append(OneOf(tuple(TransformSpec(n, 1.0) for n in item), p))
        else:
            stages.append(TransformSpec(item, p))
    return AugPipeline(tuple(stages))


# -- batch driver --------------------------------------------------------------------


def augment_batch(items, pipeline: AugPipeline, seed: int, out_dir, jobs: int = 1):
    """Augment ``(image_id, path)`` pairs into ``out_dir/<image_id>.png``.

    Each image gets its own generator keyed by ``(seed, hash(image_id))`` so
    the output bytes do not depend on ``jobs`` or on item order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        image_id, path = item
        img = decode_image(path)
        out = compose_pipeline(pipeline, img, rng=make_rng(seed, stable_key(image_id)))
        dest = out_dir / f"{image_id}.png"
        write_png(out.data, dest)
        return image_id, str(dest)

    items = sorted(items)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, items))
    return [work(it) for it in items]
