"""Differentiable operators mapping raw activations to structured point tensors.

The pipeline is: per-channel spatial softmax turns raw activations into
probability maps, soft-argmax reduces each map to a 2D expected position, and
Gaussian re-projection renders each position back into a fixed-width spatial
bump. Every operator is a pure function and keeps gradients flowing.

Coordinate convention (used everywhere in this package): normalized
(row, col) pairs in [-1, 1]. Pixel i of an n-pixel axis sits at
-1 + 2*i/(n-1), so corner pixels land exactly on +/-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

__all__ = [
    "HeatmapTensor",
    "LandmarkSet",
    "StructureMap",
    "axis_coords",
    "coordinate_grid",
    "spatial_softmax",
    "soft_argmax",
    "render_gaussian",
    "structure_bottleneck",
    "mean_pairwise_distance",
]

NORMALIZATION_TOL = 1e-4


def axis_coords(n: int, *, dtype=None, device=None) -> torch.Tensor:
    """Normalized coordinates of the n pixel centers along one axis."""
    if n < 1:
        raise ValueError(f"axis needs at least one pixel, got {n}")
    if n == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)


def coordinate_grid(height: int, width: int, *, dtype=None, device=None):
    """(row, col) coordinate maps of shape (height, width) each."""
    rows = axis_coords(height, dtype=dtype, device=device)
    cols = axis_coords(width, dtype=dtype, device=device)
    return torch.meshgrid(rows, cols, indexing="ij")


def _require_bkhw(t: torch.Tensor, name: str) -> None:
    if t.dim() != 4:
        raise ValueError(f"{name} must have shape (batch, K, H, W), got {tuple(t.shape)}")


@dataclass
class HeatmapTensor:
    """Per-channel spatial probability maps, shape (batch, K, H, W).

    Each channel is nonnegative and sums to 1 over its H*W positions.
    """

    values: torch.Tensor

    def validate(self, tol: float = NORMALIZATION_TOL) -> None:
        _require_bkhw(self.values, "heatmaps")
        if (self.values < 0).any():
            raise ValueError("heatmaps must be nonnegative")
        sums = self.values.flatten(2).sum(dim=-1)
        if (sums - 1.0).abs().max().item() > tol:
            raise ValueError("each heatmap channel must sum to 1")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LandmarkSet:
    """Soft-argmax positions, shape (batch, K, 2), normalized (row, col)."""

    coords: torch.Tensor

    def validate(self) -> None:
        if self.coords.dim() != 3 or self.coords.shape[-1] != 2:
            raise ValueError(f"coords must have shape (batch, K, 2), got {tuple(self.coords.shape)}")
        if self.coords.abs().max().item() > 1.0 + 1e-6:
            raise ValueError("coordinates must lie in [-1, 1]")

    @property
    def shape(self):
        return self.coords.shape


@dataclass
class StructureMap:
    """Rendered Gaussian bumps y, shape (batch, K, H, W), unit peak amplitude."""

    values: torch.Tensor
    sigma_render: float

    def validate(self) -> None:
        _require_bkhw(self.values, "structure map")
        if self.sigma_render <= 0:
            raise ValueError("sigma_render must be positive")

    @property
    def shape(self):
        return self.values.shape


def spatial_softmax(raw: torch.Tensor) -> HeatmapTensor:
    """Normalize raw activations into per-channel spatial probability maps.

    The softmax runs over the H*W positions of each (batch, channel) slice,
    so the argmax position is preserved and adding a constant to a channel's
    logits leaves the output unchanged.
    """
    _require_bkhw(raw, "raw activations")
    finite = torch.isfinite(raw).flatten(2).all(dim=-1)
    if not finite.all():
        b, k = (i.item() for i in (~finite).nonzero()[0])
        raise ValueError(f"non-finite activations in batch sample {b}, channel {k}")
    flat = raw.flatten(2)
    probs = torch.softmax(flat, dim=-1)
    return HeatmapTensor(probs.view_as(raw))


def soft_argmax(h: HeatmapTensor) -> LandmarkSet:
    """Expected (row, col) position of each normalized heatmap channel.

    Only accepts normalized maps; a channel summing to (near) zero means a
    raw, pre-softmax tensor leaked into this op and is rejected.
    """
    values = h.values
    _require_bkhw(values, "heatmaps")
    flat = values.flatten(2)
    sums = flat.sum(dim=-1)
    degenerate = sums.abs() < 1e-8
    if degenerate.any():
        b, k = (i.item() for i in degenerate.nonzero()[0])
        raise ValueError(
            f"heatmap channel sums to zero (batch sample {b}, channel {k}); "
            "soft_argmax requires spatial_softmax output"
        )
    if (sums - 1.0).abs().max().item() > NORMALIZATION_TOL:
        raise ValueError("heatmap channels must sum to 1; run spatial_softmax first")
    grid_r, grid_c = coordinate_grid(
        values.shape[-2], values.shape[-1], dtype=values.dtype, device=values.device
    )
    row = (flat * grid_r.flatten()).sum(dim=-1)
    col = (flat * grid_c.flatten()).sum(dim=-1)
    return LandmarkSet(torch.stack([row, col], dim=-1))


def render_gaussian(points: LandmarkSet, height: int, width: int, sigma_render: float) -> StructureMap:
    """Render each landmark as an unnormalized Gaussian bump with unit peak.

    The value at pixel p is exp(-||p - c||^2 / (2 * sigma_render^2)) with the
    distance measured in pixels and c the landmark mapped back to pixel
    space. Differentiable with respect to the landmark coordinates; no
    truncation window is applied.
    """
    if sigma_render <= 0:
        raise ValueError(f"sigma_render must be positive, got {sigma_render}")
    if height < 2 or width < 2:
        raise ValueError("rendering needs a grid of at least 2x2 pixels")
    points.validate()
    coords = points.coords
    # normalized [-1, 1] back to pixel units
    row_px = (coords[..., 0] + 1.0) * (height - 1) / 2.0
    col_px = (coords[..., 1] + 1.0) * (width - 1) / 2.0
    ii = torch.arange(height, dtype=coords.dtype, device=coords.device)
    jj = torch.arange(width, dtype=coords.dtype, device=coords.device)
    d2 = (ii[None, None, :, None] - row_px[..., None, None]) ** 2 + (
        jj[None, None, None, :] - col_px[..., None, None]
    ) ** 2
    values = torch.exp(-d2 / (2.0 * sigma_render**2))
    return StructureMap(values, float(sigma_render))


def structure_bottleneck(
    raw: torch.Tensor, sigma_render: float
) -> tuple[HeatmapTensor, LandmarkSet, StructureMap]:
    """softmax -> soft-argmax -> Gaussian re-projection, returning all stages."""
    heatmaps = spatial_softmax(raw)
    points = soft_argmax(heatmaps)
    structure = render_gaussian(points, raw.shape[-2], raw.shape[-1], sigma_render)
    return heatmaps, points, structure


def mean_pairwise_distance(points: LandmarkSet) -> torch.Tensor:
    """Mean Euclidean distance over all landmark pairs, per batch sample.

    Returns a (batch,) tensor; zero when K == 1. Used to monitor whether the
    discovered points spread out or collapse to a single location.
    """
    coords = points.coords
    k = coords.shape[1]
    if k < 2:
        return coords.new_zeros(coords.shape[0])
    diff = coords[:, :, None, :] - coords[:, None, :, :]
    dist = diff.pow(2).sum(-1).clamp_min(1e-12).sqrt()
    iu = torch.triu_indices(k, k, offset=1)
    return dist[:, iu[0], iu[1]].mean(dim=-1)
