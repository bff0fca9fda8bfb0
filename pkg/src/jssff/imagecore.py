"""Raster containers, NetPBM I/O, convolution and the three edge detectors.

Images are stored as ``(height, width, channels)`` float64 arrays with
samples in ``[0, 1]``.  Every operation here is a pure function and returns
new arrays.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

CANNY_SIGMA = 1.4
CANNY_LOW = 0.1
CANNY_HIGH = 0.3

# peak responses below this are rounding residue of a flat image, not edges
FLAT_TOL = 1e-9

DETECTORS = ("canny", "sobel", "laplacian")


@dataclass(frozen=True)
class Image:
    data: np.ndarray  # (height, width, channels)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeError(f"image data must be (h, w, 1|3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("image samples must be finite")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The single channel of a grayscale image as a 2-D array."""
        if self.channels != 1:
            raise ShapeError("plane is only defined for 1-channel images")
        return self.data[:, :, 0]


@dataclass(frozen=True)
class EdgeMap:
    data: np.ndarray  # (height, width), values in [0, 1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Kernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ShapeError(f"kernel must be square with odd size, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


# --------------------------------------------------------------------------
# NetPBM


def _read_header(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace separated integers after the magic number.

    Returns the integers and the offset of the single whitespace byte that
    terminates the last one.
    """
    values = []
    pos = 2
    n = len(buf)
    while len(values) < count:
        while pos < n and buf[pos] in b" \t\r\n":
            pos += 1
        if pos < n and buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
            continue
        if pos >= n:
            raise FormatError(f"truncated header at offset {pos}")
        start = pos
        while pos < n and buf[pos] in b"0123456789":
            pos += 1
        if pos == start:
            raise FormatError(f"expected integer in header at offset {start}")
        values.append(int(buf[start:pos]))
    if pos >= n or buf[pos] not in b" \t\r\n":
        raise FormatError(f"missing whitespace after header at offset {pos}")
    return values, pos


def load_netpbm(buf: bytes) -> Image:
    """Decode a binary P5 (gray) or P6 (RGB) file with maxval 255."""
    if len(buf) < 2:
        raise FormatError("truncated magic number at offset 0")
    magic = buf[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"unsupported magic {magic!r} at offset 0")
    (width, height, maxval), pos = _read_header(buf, 3)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255) before offset {pos}")
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height} before offset {pos}")
    start = pos + 1
    size = width * height * channels
    payload = buf[start:start + size]
    if len(payload) < size:
        raise FormatError(
            f"truncated payload at offset {start + len(payload)}: expected {size} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return Image(arr.reshape(height, width, channels))


def dump_netpbm(img: Image | EdgeMap) -> bytes:
    """Encode as P5 (1 channel or EdgeMap) or P6 (3 channels)."""
    data = img.data
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    magic = b"P5" if c == 1 else b"P6"
    q = np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_image(path) -> Image:
    with open(path, "rb") as fh:
        return load_netpbm(fh.read())


# --------------------------------------------------------------------------
# pixel operations


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    return Image(img.data @ np.array(LUMA_WEIGHTS))


def _pad(plane: np.ndarray, r: int) -> np.ndarray:
    return np.pad(plane, r, mode="edge")


def convolve2d(img: Image, kernel: Kernel) -> Image:
    """Cross-correlate a 1-channel image with ``kernel`` (replicate borders).

    The kernel is applied as written (not flipped), so Sobel-x responds
    positively to intensity increasing left to right.  Output is not clamped.
    """
    plane = img.plane
    k = kernel.size
    r = k // 2
    padded = _pad(plane, r)
    h, w = plane.shape
    out = np.zeros_like(plane)
    for dy in range(k):
        for dx in range(k):
            wt = kernel.weights[dy, dx]
            if wt != 0.0:
                out += wt * padded[dy:dy + h, dx:dx + w]
    return Image(out)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    g = gaussian_kernel_1d(sigma)
    r = len(g) // 2
    plane = img.plane
    h, w = plane.shape
    padded = np.pad(plane, ((0, 0), (r, r)), mode="edge")
    tmp = sum(g[i] * padded[:, i:i + w] for i in range(len(g)))
    padded = np.pad(tmp, ((r, r), (0, 0)), mode="edge")
    out = sum(g[i] * padded[i:i + h, :] for i in range(len(g)))
    return Image(out)


def _normalize(mag: np.ndarray) -> EdgeMap:
    peak = mag.max() if mag.size else 0.0
    if peak <= FLAT_TOL:
        return EdgeMap(np.zeros_like(mag))
    return EdgeMap(mag / peak)


def sobel_gradients(img: Image) -> tuple[np.ndarray, np.ndarray]:
    gx = convolve2d(img, Kernel(SOBEL_X)).plane
    gy = convolve2d(img, Kernel(SOBEL_Y)).plane
    return gx, gy


def sobel_edges(img: Image) -> EdgeMap:
    gx, gy = sobel_gradients(img)
    return _normalize(np.hypot(gx, gy))


def laplacian_edges(img: Image) -> EdgeMap:
    return _normalize(np.abs(convolve2d(img, Kernel(LAPLACIAN_4)).plane))


# neighbour offsets (dy, dx) along the quantized gradient direction
_NMS_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    out = np.zeros_like(mag)
    for b, (dy, dx) in _NMS_OFFSETS.items():
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        # strict on one side so plateaus of width 2 thin to a single pixel
        keep = (bins == b) & (mag > bwd) & (mag >= fwd)
        out[keep] = mag[keep]
    return out


def _hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    strong = nms >= high
    weak = nms >= low
    out = np.zeros(nms.shape, dtype=bool)
    h, w = nms.shape
    queue = deque(zip(*np.nonzero(strong)))
    for y, x in queue:
        out[y, x] = True
    while queue:
        y, x = queue.popleft()
        for yy in range(max(y - 1, 0), min(y + 2, h)):
            for xx in range(max(x - 1, 0), min(x + 2, w)):
                if weak[yy, xx] and not out[yy, xx]:
                    out[yy, xx] = True
                    queue.append((yy, xx))
    return out


def canny_edges(img: Image, low_frac: float = CANNY_LOW, high_frac: float = CANNY_HIGH,
                sigma: float = CANNY_SIGMA) -> EdgeMap:
    if not (0.0 < low_frac < high_frac <= 1.0):
        raise ParameterError(
            f"need 0 < low_frac < high_frac <= 1, got low={low_frac}, high={high_frac}"
        )
    blurred = gaussian_blur(img, sigma)
    gx, gy = sobel_gradients(blurred)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= FLAT_TOL:
        return EdgeMap(np.zeros_like(mag))
    nms = _non_max_suppression(mag, gx, gy)
    edges = _hysteresis(nms, low_frac * peak, high_frac * peak)
    return EdgeMap(edges.astype(np.float64))


def detect_edges(gray: Image, detector: str, **params) -> EdgeMap:
    if detector == "sobel":
        return sobel_edges(gray)
    if detector == "laplacian":
        return laplacian_edges(gray)
    if detector == "canny":
        return canny_edges(gray, **params)
    raise ParameterError(f"unknown edge detector {detector!r}; expected one of {DETECTORS}")


def edge_aware_image(img: Image, detector: str, channels: int = 3, **params) -> Image:
    """Grayscale, detect edges, and replicate the map to ``channels`` planes."""
    edges = detect_edges(to_grayscale(img), detector, **params)
    return Image(np.repeat(edges.data[:, :, None], channels, axis=2))


def resize_bilinear(img: Image, w: int, h: int) -> Image:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    if w < 1 or h < 1:
        raise ParameterError(f"target size must be >= 1, got {w}x{h}")
    src = img.data
    sh, sw = src.shape[:2]
    if (sh, sw) == (h, w):
        return Image(src.copy())

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h, sh)
    x0, x1, fx = axis(w, sw)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    return Image(top * (1 - fy) + bot * fy)
