"""Whole-slide raster decoding, background pruning, orientation and resizing.

Large slides are handled as numpy views wherever possible: pruning crops by
slicing, orientation transposes by swapping axes, and :func:`resize` gathers
only the source rows and columns the bilinear kernel touches. Peak memory of
:func:`preprocess_one` is therefore the decoded raster plus a few megabytes.
"""

from __future__ import annotations

import csv
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

log = logging.getLogger(__name__)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
TIFF_MAGICS = (b"II*\x00", b"MM\x00*", b"II+\x00", b"MM\x00+")
KNOWN_SUFFIXES = {".tif", ".tiff", ".png", ".svs"}

# rows per block when scanning background profiles and when resampling
_STRIP_ROWS = 256


class RasterError(Exception):
    pass


class UnsupportedFormat(RasterError):
    pass


class CorruptFile(RasterError):
    pass


class EmptyImage(RasterError):
    pass


class RasterImage:
    """An 8-bit RGB raster backed by an ``(height, width, 3)`` uint8 array.

    The array may be a non-contiguous view (a crop or a transpose of a larger
    slide); call :meth:`contiguous` before handing it to code that needs a
    packed buffer.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data)
        if data.dtype != np.uint8:
            raise ValueError(f"raster must be uint8, got {data.dtype}")
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"raster must be (H, W, 3), got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def contiguous(self) -> RasterImage:
        return RasterImage(np.ascontiguousarray(self.data))

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"RasterImage({self.width}x{self.height})"


@dataclass(frozen=True)
class BackgroundPolicy:
    """A pixel is background when ``min(R, G, B) >= background_threshold``;
    a row or column is empty when at least ``empty_fraction`` of its pixels
    are background."""

    background_threshold: int = 240
    empty_fraction: float = 0.995

    def __post_init__(self):
        if not 0 <= self.background_threshold <= 255:
            raise ValueError("background_threshold must be in 0..255")
        if not 0.0 <= self.empty_fraction <= 1.0:
            raise ValueError("empty_fraction must be in [0, 1]")


# -- decoding ---------------------------------------------------------------


def _sniff(path: Path) -> str:
    try:
        with path.open("rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if head.startswith(PNG_MAGIC):
        return "png"
    if head[:4] in TIFF_MAGICS:
        return "tiff"
    if path.suffix.lower() in KNOWN_SUFFIXES:
        raise CorruptFile(f"{path}: not a valid {path.suffix} file")
    raise UnsupportedFormat(f"{path}: unrecognised image format")


def _decode_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise UnsupportedFormat(f"{path}: PNG mode {im.mode} not supported")
            arr = np.asarray(im.convert("RGB"))
    except UnsupportedFormat:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on truncated data
        raise CorruptFile(f"{path}: {exc}") from exc
    return np.ascontiguousarray(arr)


def _decode_tiff(path: Path) -> np.ndarray:
    try:
        tif = tifffile.TiffFile(path)
    except Exception as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    with tif:
        try:
            page = tif.pages.first
        except Exception as exc:
            raise CorruptFile(f"{path}: {exc}") from exc
        if page.dtype != np.uint8:
            raise UnsupportedFormat(f"{path}: sample type {page.dtype}, need uint8")
        spp = page.samplesperpixel
        if spp not in (3, 4) or page.planarconfig != 1 or page.imagedepth != 1:
            raise UnsupportedFormat(
                f"{path}: need contiguous 8-bit RGB(A), got {spp} samples, planar={page.planarconfig}"
            )
        height, width = page.imagelength, page.imagewidth
        out = np.empty((height, width, 3), dtype=np.uint8)
        # one row of tiles (or a handful of strips) per read
        seg_h = page.tilelength if page.is_tiled else page.rowsperstrip
        buffersize = max(1 << 16, min(seg_h, height) * width * spp)
        try:
            for seg, (_, _, y, x, _), (_, h, w, _) in page.segments(
                maxworkers=1, buffersize=buffersize
            ):
                h = min(h, height - y)
                w = min(w, width - x)
                if seg is None:
                    out[y : y + h, x : x + w] = 0
                else:
                    out[y : y + h, x : x + w] = seg[0, :h, :w, :3]
        except (UnsupportedFormat, MemoryError):
            raise
        except Exception as exc:
            raise CorruptFile(f"{path}: {exc}") from exc
    return out


def decode_image(path) -> RasterImage:
    """Decode a TIFF (tiled or stripped) or PNG file into an RGB raster.

    TIFF data is decoded one tile row at a time straight into the output
    buffer, so a multi-gigabyte slide never needs a second full-size copy.
    Alpha channels are dropped; grayscale PNGs are expanded to RGB.
    """
    path = Path(path)
    kind = _sniff(path)
    arr = _decode_png(path) if kind == "png" else _decode_tiff(path)
    return RasterImage(arr)


# -- pruning ----------------------------------------------------------------


def background_profiles(data: np.ndarray, threshold: int) -> tuple[np.ndarray, np.ndarray]:
    """Count background pixels per row and per column, scanning in strips."""
    h, w, _ = data.shape
    row_bg = np.empty(h, dtype=np.int64)
    col_bg = np.zeros(w, dtype=np.int64)
    for y in range(0, h, _STRIP_ROWS):
        blk = data[y : y + _STRIP_ROWS]
        lo = np.minimum(np.minimum(blk[..., 0], blk[..., 1]), blk[..., 2])
        bg = lo >= threshold
        row_bg[y : y + len(bg)] = np.count_nonzero(bg, axis=1)
        col_bg += np.count_nonzero(bg, axis=0)
    return row_bg, col_bg


def _content_span(bg_counts: np.ndarray, length: int, fraction: float):
    nonempty = np.flatnonzero(bg_counts < fraction * length)
    if nonempty.size == 0:
        return None
    return int(nonempty[0]), int(nonempty[-1]) + 1


def prune_bounds(data: np.ndarray, policy: BackgroundPolicy = BackgroundPolicy()):
    """Return ``(top, bottom, left, right)`` half-open crop bounds.

    Emptiness is judged on full rows and columns of the current raster, then
    re-judged on the crop until nothing changes. The fixed point makes
    pruning idempotent even when sparse foreground sits in the margins.
    """
    top, left = 0, 0
    bottom, right = data.shape[0], data.shape[1]
    while True:
        view = data[top:bottom, left:right]
        h, w, _ = view.shape
        row_bg, col_bg = background_profiles(view, policy.background_threshold)
        rows = _content_span(row_bg, w, policy.empty_fraction)
        cols = _content_span(col_bg, h, policy.empty_fraction)
        if rows is None or cols is None:
            raise EmptyImage("every row or column of the raster is background")
        if rows == (0, h) and cols == (0, w):
            return top, bottom, left, right
        top, bottom = top + rows[0], top + rows[1]
        left, right = left + cols[0], left + cols[1]


def prune(img: RasterImage, policy: BackgroundPolicy = BackgroundPolicy()) -> RasterImage:
    """Crop away empty background rows and columns (returns a view)."""
    top, bottom, left, right = prune_bounds(img.data, policy)
    return RasterImage(img.data[top:bottom, left:right])


# -- orientation and resizing -------------------------------------------------


def orient(img: RasterImage) -> RasterImage:
    """Mirror portrait rasters across the main diagonal so width >= height."""
    if img.height > img.width:
        return RasterImage(img.data.transpose(1, 0, 2))
    return img


def _linear_taps(n_out: int, n_in: int):
    # half-pixel centre convention: output pixel i samples input (i + 0.5) * scale - 0.5
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_array(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample of an ``(H, W, C)`` uint8 array to ``(height, width, C)``.

    Only the (at most ``2 * height``) source rows and (``2 * width``) source
    columns the kernel reads are gathered, so the source can be a huge view.
    """
    if height < 1 or width < 1:
        raise ValueError("target size must be positive")
    src_h, src_w = data.shape[:2]
    y0, y1, wy = _linear_taps(height, src_h)
    x0, x1, wx = _linear_taps(width, src_w)
    cols = np.unique(np.concatenate([x0, x1]))
    cx0, cx1 = np.searchsorted(cols, x0), np.searchsorted(cols, x1)
    extra = (1,) * (data.ndim - 2)
    wx = wx.reshape((1, width) + extra)
    out = np.empty((height, width) + data.shape[2:], dtype=np.uint8)
    for start in range(0, height, _STRIP_ROWS):
        sl = slice(start, min(start + _STRIP_ROWS, height))
        rows = np.unique(np.concatenate([y0[sl], y1[sl]]))
        block = data[np.ix_(rows, cols)].astype(np.float64)
        top = block[np.searchsorted(rows, y0[sl])]
        bot = block[np.searchsorted(rows, y1[sl])]
        fy = wy[sl].reshape((-1, 1) + extra)
        vert = top * (1.0 - fy) + bot * fy
        val = vert[:, cx0] * (1.0 - wx) + vert[:, cx1] * wx
        out[sl] = np.clip(np.floor(val + 0.5), 0, 255).astype(np.uint8)
    return out


def resize(img: RasterImage, side: int = 1024) -> RasterImage:
    """Stretch to ``side x side`` with bilinear interpolation (aspect not kept)."""
    if side < 1:
        raise ValueError("side must be >= 1")
    if img.height == side and img.width == side:
        return RasterImage(np.array(img.data, copy=True))
    return RasterImage(resize_array(img.data, side, side))


# -- per-image driver -----------------------------------------------------------


@dataclass(frozen=True)
class PreprocessSummary:
    image_id: str
    orig_w: int
    orig_h: int
    crop_w: int
    crop_h: int
    oriented_w: int
    oriented_h: int
    out_path: str
    seconds: float


def write_png(data: np.ndarray, path) -> None:
    """Write atomically: encode into a sibling temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(np.ascontiguousarray(data), mode="RGB").save(
                fh, format="PNG", compress_level=6
            )
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def preprocess_one(in_path, out_path, policy: BackgroundPolicy = BackgroundPolicy(),
                   side: int = 1024, image_id: str | None = None) -> PreprocessSummary:
    """Decode, prune, orient and resize one slide, writing the result as PNG."""
    t0 = time.perf_counter()
    img = decode_image(in_path)
    cropped = prune(img, policy)
    oriented = orient(cropped)
    small = resize(oriented, side)
    write_png(small.data, out_path)
    return PreprocessSummary(
        image_id=image_id if image_id is not None else Path(in_path).stem,
        orig_w=img.width,
        orig_h=img.height,
        crop_w=cropped.width,
        crop_h=cropped.height,
        oriented_w=oriented.width,
        oriented_h=oriented.height,
        out_path=str(out_path),
        seconds=time.perf_counter() - t0,
    )


@dataclass(frozen=True)
class PreprocessFailure:
    image_id: str
    in_path: str
    error: str


def preprocess_batch(jobs_list, out_dir, policy: BackgroundPolicy = BackgroundPolicy(),
                     side: int = 1024, jobs: int = 1):
    """Run :func:`preprocess_one` over ``(image_id, in_path)`` pairs.

    Failures are collected rather than raised. Both result lists come back
    sorted by image id, so the outcome does not depend on ``jobs``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        image_id, in_path = item
        try:
            return preprocess_one(in_path, out_dir / f"{image_id}.png", policy, side, image_id)
        except (RasterError, OSError) as exc:
            return PreprocessFailure(image_id, str(in_path), f"{type(exc).__name__}: {exc}")

    items = list(jobs_list)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, items))
        # results arrive in submission order already
    else:
        results = [work(item) for item in items]
    done = sorted((r for r in results if isinstance(r, PreprocessSummary)), key=lambda r: r.image_id)
    failed = sorted((r for r in results if isinstance(r, PreprocessFailure)), key=lambda r: r.image_id)
    for r in done:
        log.info("preprocessed %s %dx%d -> crop %dx%d", r.image_id, r.orig_w, r.orig_h, r.crop_w, r.crop_h)
    for f in failed:
        log.warning("failed %s: %s", f.image_id, f.error)
    return done, failed


MANIFEST_COLUMNS = ("image_id", "orig_w", "orig_h", "crop_w", "crop_h", "out_path")


def write_manifest(summaries, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in summaries:
            writer.writerow([s.image_id, s.orig_w, s.orig_h, s.crop_w, s.crop_h, s.out_path])
