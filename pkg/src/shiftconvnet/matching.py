"""Cost-volume construction by shift concatenation and learned matching.

This module holds the matching primitives: `shift_concat` aligns two
feature maps at a candidate displacement, `shift_conv_layer` turns the
full displacement sweep into a learned cost volume (two wiring variants),
`correlation_1d` is the fixed multiplicative baseline, and
`warp_horizontal` / `auto_shift_conv` implement the disparity-guided
matching used by the refinement head.

Displacement conventions follow the rectified-stereo setup: ground-truth
disparity d >= 0 means left[x] corresponds to right[x - d].  Slicing the
left map from start column d (left-shift with right-side zero padding)
therefore lines it up with the right map, and the mirrored right-map slice
(right-shift with left-side zero padding) lines up with the left map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    ContractViolation,
    Tensor,
    accumulate_grad,
    add,
    concat_channels,
    conv2d,
    graph_out,
    hslice_pad,
    leaky_relu,
)

CONV_THEN_CONCAT = "conv_then_concat"
CONCAT_THEN_CONV = "concat_then_conv"
_VARIANTS = (CONV_THEN_CONCAT, CONCAT_THEN_CONV)


@dataclass
class ShiftConvConfig:
    """Shape of the shift-convolution sweep.

    `maxdisp` is the maximum displacement at feature-map scale.  The scale
    set is the left-sliced displacements 0..maxdisp plus, when
    `both_directions` is set, the right-sliced displacements -1..-maxdisp,
    giving S = 2*maxdisp + 1 scales (displacement 0 appears once).
    `clue_filters` is the number of matching-clue filters F per scale.
    """

    maxdisp: int = 40
    clue_filters: int = 16
    variant: str = CONV_THEN_CONCAT
    both_directions: bool = True

    def __post_init__(self):
        if self.maxdisp < 1:
            raise ContractViolation(f"maxdisp must be >= 1; got {self.maxdisp}")
        if self.clue_filters < 1:
            raise ContractViolation(
                f"clue_filters must be >= 1; got {self.clue_filters}"
            )
        if self.variant not in _VARIANTS:
            raise ContractViolation(
                f"unknown shift-conv variant {self.variant!r}; "
                f"expected one of {_VARIANTS}"
            )

    def scales(self) -> list[int]:
        """Ordered displacement set; index k owns output channel group k."""
        out = list(range(self.maxdisp + 1))
        if self.both_directions:
            out += [-d for d in range(1, self.maxdisp + 1)]
        return out

    @property
    def num_scales(self) -> int:
        return 2 * self.maxdisp + 1 if self.both_directions else self.maxdisp + 1

    def output_channels(self) -> int:
        # F * S for either variant; the variants differ only in parameters.
        return self.clue_filters * self.num_scales

    def weight_shape(self, feat_channels: int) -> tuple[int, int, int, int]:
        if self.variant == CONV_THEN_CONCAT:
            return (self.clue_filters, 2 * feat_channels, 3, 3)
        s = self.num_scales
        return (self.clue_filters * s, 2 * feat_channels * s, 3, 3)


def shift_concat(left: Tensor, right: Tensor, displacement: int) -> Tensor:
    """Align the pair at one displacement and stack channels.

    d >= 0: the left map sliced from column d (zeros on the right) is
    concatenated with the right map.  d < 0: the right map sliced with
    left-side zero padding is concatenated with the left map.  Output has
    2C channels and unchanged spatial extents.
    """
    if left.shape != right.shape:
        raise ContractViolation(
            f"shift_concat shape mismatch: {tuple(left.shape)} vs "
            f"{tuple(right.shape)}"
        )
    d = int(displacement)
    if abs(d) >= left.shape[3]:
        raise ContractViolation(
            f"|displacement| {abs(d)} must be < width {left.shape[3]}"
        )
    if d >= 0:
        return concat_channels([hslice_pad(left, d), right])
    return concat_channels([hslice_pad(right, d), left])


def shift_conv_layer(left: Tensor, right: Tensor, cfg: ShiftConvConfig,
                     w: Tensor, b: Tensor | None = None) -> Tensor:
    """Learned cost volume over the configured displacement sweep.

    CONV_THEN_CONCAT applies one shared 3x3 (2C -> F) convolution plus
    activation to every shift_concat result and concatenates the S outputs.
    CONCAT_THEN_CONV concatenates all S shift_concat outputs first and runs
    a single 3x3 (2C*S -> F*S) convolution plus activation.  Either way the
    output is (N, F*S, H, W) and channel group k (channels k*F..(k+1)*F-1)
    belongs to scale index k of `cfg.scales()`.
    """
    if left.shape != right.shape:
        raise ContractViolation(
            f"shift_conv_layer shape mismatch: {tuple(left.shape)} vs "
            f"{tuple(right.shape)}"
        )
    expected = cfg.weight_shape(left.shape[1])
    if tuple(w.shape) != expected:
        raise ContractViolation(
            f"shift_conv_layer weights for variant {cfg.variant} must have "
            f"shape {expected}; got {tuple(w.shape)}"
        )
    if cfg.maxdisp >= left.shape[3]:
        raise ContractViolation(
            f"maxdisp {cfg.maxdisp} must be < feature width {left.shape[3]}"
        )

    if cfg.variant == CONV_THEN_CONCAT:
        groups = [
            leaky_relu(conv2d(shift_concat(left, right, d), w, b, padding=1))
            for d in cfg.scales()
        ]
        return concat_channels(groups)

    stacked = concat_channels([shift_concat(left, right, d) for d in cfg.scales()])
    return leaky_relu(conv2d(stacked, w, b, padding=1))


def correlation_1d(left: Tensor, right: Tensor, maxdisp: int) -> Tensor:
    """Fixed multiplicative patch comparison over horizontal displacements.

    Channel d at pixel (y, x) is the channel mean of
    left[:, y, x] * right[:, y, x - d] (zero where x - d is out of range),
    for d in 0..maxdisp.  Differentiable in both inputs.
    """
    if left.shape != right.shape:
        raise ContractViolation(
            f"correlation_1d shape mismatch: {tuple(left.shape)} vs "
            f"{tuple(right.shape)}"
        )
    n, c, h, w = left.shape
    if maxdisp >= w:
        raise ContractViolation(f"maxdisp {maxdisp} must be < width {w}")
    if maxdisp < 0:
        raise ContractViolation(f"maxdisp must be >= 0; got {maxdisp}")

    inv_c = left.dtype.type(1.0 / c)
    out = np.zeros((n, maxdisp + 1, h, w), dtype=left.data.dtype)
    for d in range(maxdisp + 1):
        out[:, d, :, d:] = np.einsum(
            "nchw->nhw", left.data[:, :, :, d:] * right.data[:, :, :, : w - d]
        ) * inv_c

    def bwd(g):
        dl = np.zeros_like(left.data) if left.requires_grad else None
        dr = np.zeros_like(right.data) if right.requires_grad else None
        for d in range(maxdisp + 1):
            gd = g[:, d : d + 1, :, d:] * inv_c
            if dl is not None:
                dl[:, :, :, d:] += gd * right.data[:, :, :, : w - d]
            if dr is not None:
                dr[:, :, :, : w - d] += gd * left.data[:, :, :, d:]
        if dl is not None:
            accumulate_grad(left, dl)
        if dr is not None:
            accumulate_grad(right, dr)

    return graph_out(out, (left, right), bwd)


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (not banker's)."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _normalize_disparity(disparity: np.ndarray, n: int, h: int, w: int,
                         op: str) -> np.ndarray:
    disp = np.asarray(disparity)
    if disp.ndim == 2 and disp.shape == (h, w):
        disp = np.broadcast_to(disp, (n, h, w))
    if disp.shape != (n, h, w):
        raise ContractViolation(
            f"{op} disparity shape {disp.shape} does not match source "
            f"spatial extents ({n}, {h}, {w})"
        )
    return disp


def warp_horizontal(source: Tensor, disparity: np.ndarray) -> Tensor:
    """Gather source columns at x - round(disparity), zero out of range.

    `disparity` is a plain (H, W) or (N, H, W) array in pixels; the warp is
    a nearest-neighbor gather, differentiable in `source` only.
    """
    n, c, h, w = source.shape
    disp = _normalize_disparity(disparity, n, h, w, "warp_horizontal")
    xs = np.arange(w)[None, None, :]
    idx = (xs - round_half_away(disp)).astype(np.int64)
    valid = (idx >= 0) & (idx < w)
    idx_c = np.clip(idx, 0, w - 1)[:, None, :, :]  # (N, 1, H, W)
    gathered = np.take_along_axis(
        source.data, np.broadcast_to(idx_c, source.shape), axis=3
    )
    mask = valid[:, None, :, :].astype(source.data.dtype)
    out = gathered * mask

    def bwd(g):
        if not source.requires_grad:
            return
        ds = np.zeros_like(source.data)
        gm = g * mask
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        yy = np.arange(h)[None, None, :, None]
        np.add.at(ds, (nn, cc, yy, np.broadcast_to(idx_c, source.shape)), gm)
        accumulate_grad(source, ds)

    return graph_out(out, (source,), bwd)


def auto_shift_conv(left_img: Tensor, right_img: Tensor, base_disp: np.ndarray,
                    w: Tensor, b: Tensor | None = None,
                    delta_range: int = 2) -> Tensor:
    """Disparity-guided matching map on the image pair.

    For each delta in [-delta_range, delta_range] the right image is warped
    by base_disp + delta, channel-concatenated with the left image, and run
    through one shared 3x3 convolution plus activation; the per-delta
    results are summed elementwise, so the output channel count equals the
    filter count regardless of how many deltas are swept.
    """
    if left_img.shape != right_img.shape:
        raise ContractViolation(
            f"auto_shift_conv image shape mismatch: {tuple(left_img.shape)} "
            f"vs {tuple(right_img.shape)}"
        )
    n, c, h, wd = left_img.shape
    disp = _normalize_disparity(base_disp, n, h, wd, "auto_shift_conv")
    if w.shape[1] != 2 * c:
        raise ContractViolation(
            f"auto_shift_conv weights must take {2 * c} input channels; "
            f"got {w.shape[1]}"
        )
    total = None
    for delta in range(-delta_range, delta_range + 1):
        warped = warp_horizontal(right_img, disp + delta)
        branch = leaky_relu(
            conv2d(concat_channels([left_img, warped]), w, b, padding=1)
        )
        total = branch if total is None else add(total, branch)
    return total
