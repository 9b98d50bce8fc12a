"""Grayscale image I/O, bicubic resampling, degradation and patch sampling.

Images live in memory as ``float32`` arrays of shape (height, width) with
values in [0, 1]. On disk they are binary netpbm files: P5 (gray) is read
and written, P6 (RGB) is read and converted with Rec. 601 luma weights.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagicError,
    ImageFormatError,
    ManifestError,
    ParameterError,
    ShapeError,
    TruncatedImageError,
)

PATCH_SIZE = 64
SCALE = 4
LUMA = (0.299, 0.587, 0.114)


@dataclass(eq=False)
class GrayImage:
    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        self.pixels = np.clip(arr, 0.0, 1.0)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)


@dataclass(eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ShapeError(f"BinaryMask needs a 2-D array, got shape {arr.shape}")
        self.bits = (arr != 0).astype(np.uint8)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


@dataclass
class PatchPair:
    hr: GrayImage
    lr_small: GrayImage
    lr_input: GrayImage


# ---------------------------------------------------------------------------
# netpbm


def _read_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: expected P5 or P6 magic, got {data[:2]!r}")
    fields: list[int] = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= n:
                raise TruncatedImageError(f"{path}: header ends early")
            raise ImageFormatError(f"{path}: malformed header near byte {pos}")
        fields.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise TruncatedImageError(f"{path}: header ends early")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit files (maxval 255) are supported, got {maxval}")
    return data[:2], width, height, maxval, pos + 1


def load_image(path) -> GrayImage:
    """Read a P5 or P6 file into a GrayImage (bytes scaled by 1/255)."""
    data = Path(path).read_bytes()
    magic, width, height, _, offset = _read_header(data, path)
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise TruncatedImageError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}")
    raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 1:
        gray = raw.reshape(height, width)
    else:
        rgb = raw.reshape(height, width, 3)
        gray = rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2]
    return GrayImage(gray / 255.0)


def _to_bytes(pixels: np.ndarray) -> bytes:
    q = np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8).tobytes()


def encode_pgm(img: GrayImage) -> bytes:
    return f"P5\n{img.width} {img.height}\n255\n".encode("ascii") + _to_bytes(img.pixels)


def save_image(img: GrayImage, path) -> None:
    """Write ``img`` as an 8-bit P5 file."""
    try:
        Path(path).write_bytes(encode_pgm(img))
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def load_mask(path) -> BinaryMask:
    img = load_image(path)
    return BinaryMask(img.pixels >= 0.5)


def save_mask(mask: BinaryMask, path) -> None:
    save_image(GrayImage(mask.bits.astype(np.float32)), path)


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@functools.lru_cache(maxsize=64)
def resize_matrix(in_n: int, out_n: int) -> np.ndarray:
    """(out_n, in_n) matrix of normalised bicubic taps along one axis.

    Pixel centres are aligned (src = (dst + 0.5) * scale - 0.5); when
    shrinking, the kernel is stretched by the scale factor; out-of-range
    taps are clamped onto the border pixel.
    """
    scale = in_n / out_n
    stretch = max(scale, 1.0)
    centre = (np.arange(out_n) + 0.5) * scale - 0.5
    lo = np.floor(centre - 2 * stretch).astype(np.int64)
    taps = int(math.ceil(4 * stretch)) + 2
    idx = lo[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((idx - centre[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_n, in_n))
    rows = np.repeat(np.arange(out_n), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, in_n - 1).ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def bicubic_resize(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"output size must be positive, got {out_w}x{out_h}")
    ry = resize_matrix(img.height, out_h)
    rx = resize_matrix(img.width, out_w)
    out = ry @ img.pixels.astype(np.float64) @ rx.T
    return GrayImage(np.clip(out, 0.0, 1.0))


def crop_to_multiple(img: GrayImage, factor: int) -> GrayImage:
    h = img.height - img.height % factor
    w = img.width - img.width % factor
    if h == img.height and w == img.width:
        return img
    return GrayImage(img.pixels[:h, :w])


def degrade(hr: GrayImage, factor: int = SCALE) -> tuple[GrayImage, GrayImage]:
    """Bicubic ×factor shrink, then bicubic re-enlargement to the (cropped) HR size.

    Images whose sides are not multiples of ``factor`` are cropped to the
    largest divisible top-left region first; use :func:`crop_to_multiple`
    on the reference image before comparing.
    """
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    if hr.width < factor or hr.height < factor:
        raise ParameterError(
            f"image {hr.width}x{hr.height} is smaller than the degradation factor {factor}")
    hr = crop_to_multiple(hr, factor)
    lr_small = bicubic_resize(hr, hr.width // factor, hr.height // factor)
    lr_input = bicubic_resize(lr_small, hr.width, hr.height)
    return lr_small, lr_input


def sample_patches(img: GrayImage, count: int, rng_seed, size: int = PATCH_SIZE,
                   factor: int = SCALE) -> list[PatchPair]:
    """Cut ``count`` uniformly placed size×size HR patches and their LR versions."""
    if img.width < size or img.height < size:
        raise ParameterError(
            f"image {img.width}x{img.height} is smaller than the {size}x{size} patch size")
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(rng_seed)
    ys = rng.integers(0, img.height - size + 1, size=count)
    xs = rng.integers(0, img.width - size + 1, size=count)
    pairs = []
    for y, x in zip(ys, xs):
        hr = GrayImage(img.pixels[y:y + size, x:x + size])
        lr_small = bicubic_resize(hr, size // factor, size // factor)
        lr_input = bicubic_resize(lr_small, size, size)
        pairs.append(PatchPair(hr, lr_small, lr_input))
    return pairs


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    dataset_id: int
    mask: Path | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    dataset_names: dict[int, str] = field(default_factory=dict)

    def counts(self) -> dict[int, int]:
        out = {i: 0 for i in self.dataset_names}
        for e in self.entries:
            out[e.dataset_id] = out.get(e.dataset_id, 0) + 1
        return out

    def dataset_ids(self) -> list[int]:
        return sorted({e.dataset_id for e in self.entries})

    def subset(self, entries) -> DatasetManifest:
        entries = list(entries)
        used = {e.dataset_id for e in entries}
        return DatasetManifest(entries, {i: n for i, n in self.dataset_names.items() if i in used})


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest: ``dataset <id> <name>`` lines, then ``<id>\\t<image>[\\t<mask>]``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError("manifest file does not exist", path=path) from None
    base = path.parent
    names: dict[int, str] = {}
    pending: list[tuple[int, ManifestEntry]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if line.startswith("dataset ") or line.startswith("dataset\t"):
            parts = line.split(None, 2)
            if len(parts) != 3 or not _is_int(parts[1]):
                raise ManifestError(f"malformed dataset declaration {line!r}", lineno, path)
            names[int(parts[1])] = parts[2].strip()
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3) or not _is_int(parts[0]) or not parts[1]:
            raise ManifestError(f"malformed entry {line!r}", lineno, path)
        image = base / parts[1]
        mask = base / parts[2] if len(parts) == 3 and parts[2] else None
        pending.append((lineno, ManifestEntry(image, int(parts[0]), mask)))

    for lineno, e in pending:
        if e.dataset_id not in names:
            raise ManifestError(f"unknown dataset_id {e.dataset_id}", lineno, path)
        if not e.image.is_file():
            raise ManifestError(f"image file not found: {e.image}", lineno, path)
        if e.mask is not None and not e.mask.is_file():
            raise ManifestError(f"mask file not found: {e.mask}", lineno, path)
    return DatasetManifest([e for _, e in pending], names)


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = [f"dataset {i} {n}" for i, n in sorted(manifest.dataset_names.items())]
    for e in manifest.entries:
        cols = [str(e.dataset_id), _relative(e.image, base)]
        if e.mask is not None:
            cols.append(_relative(e.mask, base))
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relative(p: Path, base: Path) -> str:
    return os.path.relpath(Path(p).resolve(), base).replace(os.sep, "/")


def combine_manifests(parts: list[tuple[str, DatasetManifest]]) -> DatasetManifest:
    """Merge manifests, giving each part its own dataset id 0..K-1."""
    entries = []
    names = {}
    for new_id, (name, m) in enumerate(parts):
        names[new_id] = name
        entries.extend(ManifestEntry(e.image, new_id, e.mask) for e in m.entries)
    return DatasetManifest(entries, names)


# ---------------------------------------------------------------------------
# synthetic data

ROOT_THRESHOLD = 0.45


def render_roots(width: int, height: int, rng: np.random.Generator, *, strokes=(3, 10),
                 stroke_width=(1, 5), blur_sigma=None, noise_sigma: float = 0.02
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Dark textured soil with bright Bézier roots. Returns (image, mask).

    ``blur_sigma=None`` draws the blur from U[0, 1.5]. Background never
    exceeds 0.35 and roots are at least 0.55, so without blur and noise the
    mask is exactly ``image >= ROOT_THRESHOLD``.
    """
    soil = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=6.0, mode="reflect")
    soil = soil / (np.abs(soil).max() + 1e-12)
    img = np.clip(rng.uniform(0.1, 0.2) + 0.08 * soil, 0.0, 0.35)
    mask = np.zeros((height, width), dtype=bool)

    n_strokes = int(rng.integers(strokes[0], strokes[1] + 1))
    for _ in range(n_strokes):
        w = int(rng.choice(np.arange(stroke_width[0], stroke_width[1] + 1)))
        stroke = _bezier_stroke(width, height, w, rng)
        img[stroke] = rng.uniform(0.55, 0.9)
        mask |= stroke

    sigma = rng.uniform(0.0, 1.5) if blur_sigma is None else blur_sigma
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=sigma, mode="nearest")
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), mask


def _bezier_stroke(width: int, height: int, w: int, rng: np.random.Generator) -> np.ndarray:
    # roots enter from the top edge and wander downward
    p0 = np.array([rng.uniform(0, width), rng.uniform(-0.1, 0.3) * height])
    p3 = np.array([rng.uniform(0, width), rng.uniform(0.5, 1.1) * height])
    p1 = p0 + rng.normal(0, 0.3, 2) * [width, height]
    p2 = p3 + rng.normal(0, 0.3, 2) * [width, height]
    approx_len = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1) + np.linalg.norm(p3 - p2)
    t = np.linspace(0.0, 1.0, int(approx_len * 4) + 2)[:, None]
    pts = ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t**2 * p2
           + t**3 * p3)
    cols = np.floor(pts[:, 0]).astype(np.int64)
    rows = np.floor(pts[:, 1]).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    centre = np.zeros((height, width), dtype=bool)
    centre[rows[inside], cols[inside]] = True
    if w <= 1 or not centre.any():
        return centre
    dist = ndimage.distance_transform_edt(~centre)
    return dist <= (w - 1) / 2


def render_texture(width: int, height: int, rng: np.random.Generator,
                   noise_sigma: float = 0.02) -> np.ndarray:
    """Non-root content: oriented gratings over smooth blobs."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4.0, 16.0)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.05, 0.15) * np.sin(
            2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    blobs = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=4.0)
    img += 0.5 + 0.4 * blobs / (np.abs(blobs).max() + 1e-12)
    if noise_sigma > 0:
        img += rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(n_images: int, width: int, height: int, rng_seed, out_dir, *,
                           kind: str = "roots", dataset_id: int = 0, name: str | None = None,
                           prefix: str = "img", **render_kwargs) -> DatasetManifest:
    """Write ``n_images`` synthetic PGMs (plus exact masks for roots) and a manifest.tsv."""
    if width < PATCH_SIZE or height < PATCH_SIZE:
        raise ParameterError(
            f"synthetic images must be at least {PATCH_SIZE}x{PATCH_SIZE} "
            f"(the training patch size), got {width}x{height}")
    if kind not in ("roots", "texture"):
        raise ParameterError(f"unknown synthetic kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(rng_seed)
    entries = []
    for i in range(n_images):
        img_path = out / f"{prefix}_{i:04d}.pgm"
        if kind == "roots":
            pixels, mask = render_roots(width, height, rng, **render_kwargs)
            mask_path = out / f"{prefix}_{i:04d}_mask.pgm"
            save_mask(BinaryMask(mask), mask_path)
        else:
            pixels, mask_path = render_texture(width, height, rng, **render_kwargs), None
        save_image(GrayImage(pixels), img_path)
        entries.append(ManifestEntry(img_path, dataset_id, mask_path))
    manifest = DatasetManifest(entries, {dataset_id: name or f"synthetic-{kind}"})
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
