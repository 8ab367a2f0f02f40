"""Local Directional Pattern codes, images, and histogram statistics.

An LDP code marks, per pixel, which k of the eight Kirsch compass edge
responses have the largest magnitude. Codes are 8-bit with exactly k
bits set; ties between equal magnitudes go to the lower direction
index so the whole pipeline is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# The eight standard 3x3 Kirsch compass masks, one per direction, each a
# rotation of the East mask and each summing to zero. Rows run top to
# bottom (north to south), columns left to right (west to east). The
# direction order below is fixed: bit d of an LDP code corresponds to
# KIRSCH_DIRECTIONS[d].
KIRSCH_DIRECTIONS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")

KIRSCH_KERNELS = np.array([
    [[-3, -3, 5], [-3, 0, 5], [-3, -3, 5]],      # E
    [[-3, 5, 5], [-3, 0, 5], [-3, -3, -3]],      # NE
    [[5, 5, 5], [-3, 0, -3], [-3, -3, -3]],      # N
    [[5, 5, -3], [5, 0, -3], [-3, -3, -3]],      # NW
    [[5, -3, -3], [5, 0, -3], [5, -3, -3]],      # W
    [[-3, -3, -3], [5, 0, -3], [5, 5, -3]],      # SW
    [[-3, -3, -3], [-3, 0, -3], [5, 5, 5]],      # S
    [[-3, -3, -3], [-3, 0, 5], [-3, 5, 5]],      # SE
], dtype=np.int64)

# ITU-R BT.601 luma weights for RGB -> gray
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class LdpError(ValueError):
    pass


def kirsch_edge_responses(img: np.ndarray, row: int, col: int) -> np.ndarray:
    """Eight signed edge responses of the 3x3 neighborhood around an
    interior pixel, in direction order E, NE, N, NW, W, SW, S, SE."""
    img = np.asarray(img)
    h, w = img.shape
    if not (1 <= row <= h - 2 and 1 <= col <= w - 2):
        raise LdpError(f"pixel ({row}, {col}) is not interior to a {h}x{w} image")
    patch = img[row - 1:row + 2, col - 1:col + 2].astype(np.int64)
    return (KIRSCH_KERNELS * patch).sum(axis=(1, 2))


def ldp_code(responses, k: int) -> int:
    """8-bit code with bit d set iff |responses[d]| is among the k largest
    magnitudes; equal magnitudes resolve in favor of the lower index."""
    if not 1 <= k <= 8:
        raise LdpError(f"k must be in 1..8, got {k}")
    mags = np.abs(np.asarray(responses, dtype=np.float64))
    if mags.shape != (8,):
        raise LdpError(f"expected 8 responses, got shape {mags.shape}")
    order = np.argsort(-mags, kind="stable")
    code = 0
    for d in order[:k]:
        code |= 1 << int(d)
    return code


@dataclass
class LdpImage:
    """Per-pixel LDP codes at the source image's resolution (the source
    is edge-replicated by one pixel so border pixels get codes too)."""
    codes: np.ndarray          # uint8, shape (H, W)
    k: int
    border_policy: str = "replicate"

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]


def _response_stack(img: np.ndarray) -> np.ndarray:
    """All-pixel Kirsch responses via shifted sums on the replicated-pad
    image; returns int64 (8, H, W), bit-exact with the per-pixel route."""
    padded = np.pad(img.astype(np.int64), 1, mode="edge")
    h, w = img.shape
    out = np.zeros((8, h, w), dtype=np.int64)
    for d in range(8):
        kern = KIRSCH_KERNELS[d]
        for dr in range(3):
            for dc in range(3):
                c = kern[dr, dc]
                if c:
                    out[d] += c * padded[dr:dr + h, dc:dc + w]
    return out


def ldp_image(img: np.ndarray, k: int = 3) -> LdpImage:
    """LDP-code image of an 8-bit grayscale image (vectorized)."""
    if not 1 <= k <= 8:
        raise LdpError(f"k must be in 1..8, got {k}")
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise LdpError(f"image must be at least 3x3, got shape {img.shape}")
    responses = _response_stack(img)
    # stable argsort on -|r| puts the k strongest first, lower index on ties
    order = np.argsort(-np.abs(responses), axis=0, kind="stable")[:k]
    codes = np.zeros(img.shape, dtype=np.uint8)
    for row in order:
        codes |= np.uint8(1) << row.astype(np.uint8)
    return LdpImage(codes=codes, k=k)


def ldp_tensor(x: np.ndarray, k: int = 3) -> np.ndarray:
    """Local-pattern counterpart of a (B, T, C, H, W) image tensor.

    RGB converts to gray with the luma weights, is quantized to 8-bit,
    coded, rescaled to [0,1] by /255, and replicated across channels so
    the output shape equals the input shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise LdpError(f"expected a (B,T,C,H,W) tensor, got shape {x.shape}")
    b, t, c, h, w = x.shape
    if c == 3:
        gray = (LUMA_WEIGHTS[0] * x[:, :, 0] + LUMA_WEIGHTS[1] * x[:, :, 1]
                + LUMA_WEIGHTS[2] * x[:, :, 2])
    elif c == 1:
        gray = x[:, :, 0]
    else:
        raise LdpError(f"expected 1 or 3 channels, got {c}")
    gray8 = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    out = np.empty((b, t, h, w), dtype=np.float64)
    for bi in range(b):
        for ti in range(t):
            out[bi, ti] = ldp_image(gray8[bi, ti], k).codes / 255.0
    return np.repeat(out[:, :, None], c, axis=2)


def attainable_codes(k: int) -> np.ndarray:
    """The C(8,k) byte values with popcount exactly k, ascending."""
    codes = [c for c in range(256) if bin(c).count("1") == k]
    return np.array(codes, dtype=np.int64)


@dataclass
class RegionHistogramSet:
    """Grid of per-region LDP-code histograms with per-region weights."""
    histograms: np.ndarray     # (rows, cols, bins) counts
    weights: np.ndarray        # (rows, cols), >= 0
    codes: np.ndarray = field(repr=False)  # bin labels, the attainable codes

    @property
    def grid(self):
        return self.histograms.shape[:2]


def ldp_histograms(image: LdpImage, grid=(1, 1), weights=None) -> RegionHistogramSet:
    """Region-wise histograms of an LDP image over the attainable codes.

    ``weights`` defaults to 1.0 everywhere; pass a (rows, cols) array to
    emphasize particular regions.
    """
    rows, cols = grid
    codes = attainable_codes(image.k)
    lookup = np.full(256, -1, dtype=np.int64)
    lookup[codes] = np.arange(len(codes))
    hists = np.zeros((rows, cols, len(codes)), dtype=np.int64)
    for i, band in enumerate(np.array_split(image.codes, rows, axis=0)):
        for j, region in enumerate(np.array_split(band, cols, axis=1)):
            bins = lookup[region.ravel()]
            hists[i, j] = np.bincount(bins, minlength=len(codes))
    if weights is None:
        weights = np.ones((rows, cols))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (rows, cols):
        raise LdpError(f"weights shape {weights.shape} != grid {(rows, cols)}")
    if np.any(weights < 0):
        raise LdpError("region weights must be non-negative")
    return RegionHistogramSet(histograms=hists, weights=weights, codes=codes)


def weighted_chi_square(s: RegionHistogramSet, m: RegionHistogramSet) -> float:
    """Region-weighted chi-square distance between two histogram sets:
    sum over regions i and bins of w_i * (S - M)^2 / (S + M), where empty
    0/0 bins contribute zero. Weights are taken from ``s``."""
    if s.histograms.shape != m.histograms.shape:
        raise LdpError(f"histogram grids differ: {s.histograms.shape} vs "
                       f"{m.histograms.shape}")
    a = s.histograms.astype(np.float64)
    b = m.histograms.astype(np.float64)
    denom = a + b
    num = (a - b) ** 2
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float((s.weights[:, :, None] * terms).sum())
