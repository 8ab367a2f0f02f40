"""Patch-token views of image tensors and random patch masking.

An image tensor is (B, T, C, H, W); its patch view is (B, S, patch_dim)
with S = T * (H/p) * (W/p) tokens ordered frame-major then row-major
over the patch grid, and patch_dim = C * p * p (channel-major within a
token). patchify/unpatchify are exact inverses, bit for bit.

Mask plans are drawn per sample from counter-based Philox streams keyed
by (seed, epoch, step, sample), so any parallel or re-ordered execution
reproduces the same masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class ImageDims:
    b: int
    t: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, x) -> "ImageDims":
        if np.ndim(x) != 5:
            raise PatchError(f"expected (B,T,C,H,W), got shape {np.shape(x)}")
        return cls(*np.shape(x))


@dataclass
class PatchSet:
    tokens: np.ndarray         # (B, S, patch_dim)
    patch_size: int
    dims: ImageDims            # dims of the source image tensor

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.tokens.shape[2]


def token_count(dims: ImageDims, p: int) -> int:
    return dims.t * (dims.h // p) * (dims.w // p)


def _check_divisible(dims: ImageDims, p: int):
    if dims.h % p or dims.w % p:
        raise PatchError(f"spatial dims {dims.h}x{dims.w} not divisible by "
                         f"patch size {p}")


def patchify_tokens(x, p: int):
    """(B,T,C,H,W) -> (B,S,patch_dim) token layout; works on any array-like
    with numpy-style reshape/transpose (used for autodiff tensors too)."""
    b, t, c, h, w = x.shape
    gh, gw = h // p, w // p
    x = x.reshape((b, t, c, gh, p, gw, p))
    x = x.transpose((0, 1, 3, 5, 2, 4, 6))        # (B,T,gh,gw,C,p,p)
    return x.reshape((b, t * gh * gw, c * p * p))


def unpatchify_tokens(tokens, dims: ImageDims, p: int):
    """Exact inverse of patchify_tokens."""
    b, t, c, h, w = dims.b, dims.t, dims.c, dims.h, dims.w
    gh, gw = h // p, w // p
    x = tokens.reshape((b, t, gh, gw, c, p, p))
    x = x.transpose((0, 1, 4, 2, 5, 3, 6))        # (B,T,C,gh,p,gw,p)
    return x.reshape((b, t, c, h, w))


def patchify(x: np.ndarray, p: int) -> PatchSet:
    dims = ImageDims.of(x)
    _check_divisible(dims, p)
    tokens = patchify_tokens(np.asarray(x, dtype=np.float64), p).copy()
    return PatchSet(tokens=tokens, patch_size=p, dims=dims)


def unpatchify(patches: PatchSet, dims: ImageDims | None = None) -> np.ndarray:
    dims = dims or patches.dims
    p = patches.patch_size
    _check_divisible(dims, p)
    s = token_count(dims, p)
    pd = dims.c * p * p
    if patches.tokens.shape != (dims.b, s, pd):
        raise PatchError(f"token shape {patches.tokens.shape} inconsistent "
                         f"with dims {dims} and p={p}")
    return unpatchify_tokens(patches.tokens, dims, p).copy()


@dataclass
class MaskPlan:
    """Per-sample split of token indices into masked and visible sets.

    Both index arrays are sorted ascending per row; every row masks
    exactly floor(ratio * S) of the S tokens.
    """
    masked: np.ndarray         # (B, M) int64
    visible: np.ndarray        # (B, S-M) int64
    total: int                 # S
    ratio: float
    key: tuple                 # (seed, epoch, step) the plan was drawn from

    @property
    def batch(self) -> int:
        return self.masked.shape[0]

    @property
    def masked_count(self) -> int:
        return self.masked.shape[1]

    @property
    def visible_count(self) -> int:
        return self.visible.shape[1]


def _sample_rng(seed: int, epoch: int, step: int, sample: int):
    seq = np.random.SeedSequence(entropy=(seed, epoch, step, sample))
    return np.random.Generator(np.random.Philox(seq))


def sample_mask(batch: int, total: int, ratio: float, seed: int,
                epoch: int = 0, step: int = 0) -> MaskPlan:
    """Uniformly random mask of floor(ratio*total) token indices per
    sample, independent across samples, deterministic per key."""
    if not 0.0 <= ratio < 1.0:
        raise PatchError(f"mask ratio must be in [0, 1), got {ratio}")
    m = math.floor(ratio * total)
    masked = np.empty((batch, m), dtype=np.int64)
    visible = np.empty((batch, total - m), dtype=np.int64)
    for i in range(batch):
        perm = _sample_rng(seed, epoch, step, i).permutation(total)
        masked[i] = np.sort(perm[:m])
        visible[i] = np.sort(perm[m:])
    return MaskPlan(masked=masked, visible=visible, total=total, ratio=ratio,
                    key=(seed, epoch, step))


def gather_visible(patches: PatchSet, plan: MaskPlan) -> PatchSet:
    """Restrict a patch set to the plan's visible tokens (order preserved)."""
    if plan.total != patches.count or plan.batch != patches.batch:
        raise PatchError(f"plan for {plan.batch}x{plan.total} tokens does not "
                         f"match patches {patches.batch}x{patches.count}")
    kept = np.take_along_axis(patches.tokens, plan.visible[:, :, None], axis=1)
    return PatchSet(tokens=kept, patch_size=patches.patch_size,
                    dims=patches.dims)
