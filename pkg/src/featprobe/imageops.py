"""Deterministic input-space image manipulations on 8-bit RGB images.

Covers the geometric, photometric, and masking manipulation catalog.
Semantic manipulations are never executed here: they enter the pipeline only
as externally produced image/feature pairs referenced from a manifest, and
asking this module to apply one raises :class:`NonExecutableError`.

Conventions fixed by this module (and relied on elsewhere):
  * positive rotation angles are clockwise;
  * noise is added per channel in float, clipped to [0, 255], then rounded;
    the stream is PCG64 seeded directly from ``spec.seed`` (batch drivers
    derive one child seed per image via ``numpy.random.SeedSequence([seed,
    image_index])``);
  * grayscale uses BT.601 luma (0.299, 0.587, 0.114), replicated to all
    channels;
  * hue shift rotates H in HSV space, leaving S and V untouched;
  * a pixel is inside a polygon iff its center (x+0.5, y+0.5) satisfies the
    even-odd rule, which for integer-vertex axis-aligned rectangles yields
    half-open [x0, x1) x [y0, y1) footprints.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601 luma

EXECUTABLE_KINDS = (
    "rotate90",
    "rotate180",
    "rotate270",
    "mirror_h",
    "mirror_v",
    "gaussian_noise",
    "hue_shift",
    "grayscale",
    "mask_polygon",
)


class ImageOpsError(Exception):
    pass


class NonExecutableError(ImageOpsError):
    """Raised when a semantic (ingestion-only) manipulation is applied."""


class ParameterError(ImageOpsError):
    """Raised for invalid manipulation parameters (e.g. polygon out of bounds)."""


@dataclass(frozen=True)
class Image:
    """8-bit RGB image; pixels are a read-only [H, W, 3] uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ValueError(f"expected [H,W,3] uint8 pixels, got {arr.shape} {arr.dtype}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("image must be non-empty")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )


@dataclass
class ManipulationSpec:
    """One input manipulation with its parameters.

    ``kind == "semantic"`` is a pure tag for externally produced pairs and
    carries no executable parameters.
    """

    kind: str
    noise_std: float = 40.0
    hue_degrees: float = 60.0
    polygon: list[tuple[int, int]] = field(default_factory=list)
    fill: tuple[int, int, int] = (255, 0, 0)
    semantic_id: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in EXECUTABLE_KINDS and self.kind != "semantic":
            raise ParameterError(f"unknown manipulation kind {self.kind!r}")
        if self.kind == "semantic" and not self.semantic_id:
            raise ParameterError("semantic manipulation requires an id")
        if self.kind == "mask_polygon" and len(self.polygon) < 3:
            raise ParameterError("polygon needs at least 3 vertices")

    @property
    def executable(self) -> bool:
        return self.kind != "semantic"

    @property
    def manipulation_id(self) -> str:
        return f"semantic:{self.semantic_id}" if self.kind == "semantic" else self.kind


# ---------------------------------------------------------------------------
# Geometric ops (pixel permutations, bitwise exact)
# ---------------------------------------------------------------------------

def rotate90(img: Image) -> Image:
    """Rotate 90 degrees clockwise; output is W x H."""
    return Image(np.ascontiguousarray(np.rot90(img.pixels, k=-1)))


def rotate180(img: Image) -> Image:
    return Image(np.ascontiguousarray(np.rot90(img.pixels, k=2)))


def rotate270(img: Image) -> Image:
    """Rotate 270 degrees clockwise (= 90 counter-clockwise)."""
    return Image(np.ascontiguousarray(np.rot90(img.pixels, k=1)))


def mirror_h(img: Image) -> Image:
    """Horizontal mirror (flip left-right)."""
    return Image(np.ascontiguousarray(img.pixels[:, ::-1]))


def mirror_v(img: Image) -> Image:
    """Vertical mirror (flip top-bottom)."""
    return Image(np.ascontiguousarray(img.pixels[::-1]))


# ---------------------------------------------------------------------------
# Photometric ops
# ---------------------------------------------------------------------------

def noise_sample(shape: tuple[int, ...], std: float, seed: int) -> np.ndarray:
    """The (pre-clipping) Gaussian noise field added by gaussian_noise."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return rng.normal(0.0, std, size=shape)


def add_gaussian_noise(img: Image, std: float, seed: int) -> Image:
    if std < 0:
        raise ParameterError("noise std must be >= 0")
    if std == 0:
        return img
    noisy = img.pixels.astype(np.float64) + noise_sample(img.pixels.shape, std, seed)
    return Image(np.rint(np.clip(noisy, 0, 255)).astype(np.uint8))


def to_grayscale(img: Image) -> Image:
    luma = (
        GRAY_WEIGHTS[0] * img.pixels[..., 0].astype(np.float64)
        + GRAY_WEIGHTS[1] * img.pixels[..., 1]
        + GRAY_WEIGHTS[2] * img.pixels[..., 2]
    )
    gray = np.rint(np.clip(luma, 0, 255)).astype(np.uint8)
    return Image(np.repeat(gray[..., None], 3, axis=2))


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB->HSV; inputs in [0,1], H in degrees [0,360)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    delta = maxc - minc
    chromatic = delta > 0
    safe = np.where(chromatic, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    # tie precedence r, then g (same as colorsys)
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(chromatic, (h / 6.0) % 1.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h * 360.0, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] / 60.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def shift_hue(img: Image, degrees: float) -> Image:
    if degrees == 0:
        return img
    hsv = _rgb_to_hsv(img.pixels.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + degrees) % 360.0
    rgb = _hsv_to_rgb(hsv)
    return Image(np.rint(np.clip(rgb * 255.0, 0, 255)).astype(np.uint8))


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

def polygon_mask(width: int, height: int, polygon) -> np.ndarray:
    """[H, W] bool mask of pixels whose centers are inside (even-odd rule)."""
    verts = np.asarray(polygon, dtype=np.float64)
    px = np.arange(width, dtype=np.float64)[None, :] + 0.5
    py = np.arange(height, dtype=np.float64)[:, None] + 0.5
    inside = np.zeros((height, width), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xint)
    return inside


def fill_polygon(img: Image, polygon, fill: tuple[int, int, int]) -> Image:
    for x, y in polygon:
        if not (0 <= x <= img.width and 0 <= y <= img.height):
            raise ParameterError(
                f"polygon vertex ({x},{y}) outside {img.width}x{img.height} image"
            )
    mask = polygon_mask(img.width, img.height, polygon)
    out = img.pixels.copy()
    out[mask] = np.asarray(fill, dtype=np.uint8)
    return Image(out)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def apply_manipulation(img: Image, spec: ManipulationSpec) -> Image:
    """Apply one manipulation; deterministic given (img, spec) including seed."""
    if not spec.executable:
        raise NonExecutableError(
            f"semantic manipulation {spec.semantic_id!r} is ingestion-only"
        )
    if spec.kind == "rotate90":
        return rotate90(img)
    if spec.kind == "rotate180":
        return rotate180(img)
    if spec.kind == "rotate270":
        return rotate270(img)
    if spec.kind == "mirror_h":
        return mirror_h(img)
    if spec.kind == "mirror_v":
        return mirror_v(img)
    if spec.kind == "gaussian_noise":
        return add_gaussian_noise(img, spec.noise_std, spec.seed)
    if spec.kind == "hue_shift":
        return shift_hue(img, spec.hue_degrees)
    if spec.kind == "grayscale":
        return to_grayscale(img)
    if spec.kind == "mask_polygon":
        return fill_polygon(img, spec.polygon, spec.fill)
    raise ParameterError(f"unknown manipulation kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# PNG I/O (CLI surface)
# ---------------------------------------------------------------------------

def load_png(path) -> Image:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode in ("RGBA", "LA", "PA"):
            warnings.warn(f"{path}: alpha channel dropped, treating as RGB")
        rgb = im.convert("RGB")
        return Image(np.asarray(rgb, dtype=np.uint8))


def save_png(img: Image, path) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
