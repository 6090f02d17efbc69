"""The three training loss terms and their weighted total.

prior = separation + concentration pushes the heatmap channels apart while
concentrating each one at a single location; reconstruction is L1 plus an
optional multi-layer perceptual term; the KL term is the closed form for two
isotropic unit-variance Gaussians, half the squared distance between means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .geometry import HeatmapTensor, coordinate_grid, soft_argmax

__all__ = [
    "TrainingFault",
    "LossWeights",
    "LossBundle",
    "FeatureExtractor",
    "IdentityFeatures",
    "Vgg19Features",
    "separation_loss",
    "concentration_loss",
    "reconstruction_loss",
    "kl_loss",
    "total_loss",
]

# Any fixed multi-layer feature map: image batch -> list of feature tensors.
FeatureExtractor = Callable[[torch.Tensor], list[torch.Tensor]]


class TrainingFault(RuntimeError):
    """Raised when a loss component turns non-finite during training."""

    def __init__(self, component: str, message: str | None = None):
        self.component = component
        super().__init__(message or f"non-finite loss component: {component}")


@dataclass
class LossWeights:
    """Relative weights of the three loss terms plus per-layer perceptual weights."""

    w_prior: float = 1.0
    w_recon: float = 1.0
    w_kl: float = 0.1
    perceptual_layer_weights: tuple[float, ...] = (1.0,)

    def validate(self) -> None:
        weights = (self.w_prior, self.w_recon, self.w_kl, *self.perceptual_layer_weights)
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be nonnegative")
        if not any(w > 0 for w in (self.w_prior, self.w_recon, self.w_kl)):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossBundle:
    """Named scalar losses; total is the weighted combination used for backward."""

    prior: torch.Tensor
    separation: torch.Tensor
    concentration: torch.Tensor
    recon_l1: torch.Tensor
    recon_perceptual: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def detached(self) -> "LossBundle":
        return LossBundle(*(t.detach() for t in self._fields()))

    def as_dict(self) -> dict[str, float]:
        names = ("prior", "separation", "concentration", "recon_l1", "recon_perceptual", "kl", "total")
        return {n: float(t) for n, t in zip(names, self._fields())}

    def _fields(self):
        return (
            self.prior,
            self.separation,
            self.concentration,
            self.recon_l1,
            self.recon_perceptual,
            self.kl,
            self.total,
        )


class IdentityFeatures:
    """Feature map that returns the image itself as its single layer."""

    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]


class Vgg19Features:
    """Relu features of an ImageNet-pretrained 19-layer VGG, frozen.

    Expects images in [-1, 1]; converts to the classifier's input statistics
    internally. Construction needs the pretrained weights on disk or an
    internet connection; otherwise raises with a pointer to the identity
    extractor / the no-perceptual ablation.
    """

    # feature indices just after relu1_1 .. relu4_1 in torchvision's layout
    DEFAULT_SLICES = (2, 7, 12, 21)

    def __init__(self, slice_points: Sequence[int] = DEFAULT_SLICES):
        try:
            from torchvision.models import VGG19_Weights, vgg19

            backbone = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        except Exception as exc:  # pragma: no cover - depends on weight availability
            raise RuntimeError(
                "pretrained VGG-19 weights are unavailable; use IdentityFeatures or "
                "train with the no-perceptual ablation"
            ) from exc
        backbone.eval()
        for p in backbone.parameters():
            p.requires_grad_(False)
        self._stages = []
        prev = 0
        for point in slice_points:
            self._stages.append(torch.nn.Sequential(*backbone[prev:point]))
            prev = point
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        self._mean, self._std = mean, std

    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = ((x + 1.0) / 2.0 - self._mean.to(x)) / self._std.to(x)
        feats = []
        for stage in self._stages:
            x = stage(x)
            feats.append(x)
        return feats


def separation_loss(
    h: HeatmapTensor, sigma_sep: float, *, operand: str = "heatmaps"
) -> torch.Tensor:
    """Pairwise exponential penalty pushing distinct channels apart.

    sum over ordered pairs i != j of exp(-||h_i - h_j||^2 / (2 sigma_sep^2)),
    averaged over the batch. ``operand="coordinates"`` swaps the heatmap L2
    distance for the soft-argmax coordinate distance (experimental variant).
    """
    if sigma_sep <= 0:
        raise ValueError(f"sigma_sep must be positive, got {sigma_sep}")
    if operand == "heatmaps":
        flat = h.values.flatten(2)  # (B, K, P)
    elif operand == "coordinates":
        flat = soft_argmax(h).coords
    else:
        raise ValueError(f"unknown separation operand: {operand!r}")
    k = flat.shape[1]
    if k < 2:
        return flat.new_zeros(())
    sq_norms = flat.pow(2).sum(-1)
    d2 = sq_norms[:, :, None] + sq_norms[:, None, :] - 2.0 * flat @ flat.transpose(1, 2)
    d2 = d2.clamp_min(0.0)
    pair = torch.exp(-d2 / (2.0 * sigma_sep**2))
    # diagonal terms are exp(0) = 1 each; drop them from the ordered-pair sum
    return (pair.sum(dim=(-2, -1)) - k).mean()


def concentration_loss(h: HeatmapTensor) -> torch.Tensor:
    """Spatial variance of each channel about its soft-argmax position.

    Var = sum_p h[p] * ||grid(p) - mu||^2 in normalized-coordinate units^2,
    averaged over batch and channels. Zero exactly for a point mass.
    """
    values = h.values
    mu = soft_argmax(h).coords  # (B, K, 2)
    grid_r, grid_c = coordinate_grid(
        values.shape[-2], values.shape[-1], dtype=values.dtype, device=values.device
    )
    flat = values.flatten(2)
    d2 = (grid_r.flatten()[None, None] - mu[..., 0:1]) ** 2 + (
        grid_c.flatten()[None, None] - mu[..., 1:2]
    ) ** 2
    return (flat * d2).sum(-1).mean()


def reconstruction_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    features: FeatureExtractor | None = None,
    layer_weights: Sequence[float] = (),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-element L1 error plus the weighted multi-layer perceptual L1 term.

    With ``features=None`` (or no layers) the perceptual term is exactly 0,
    which is the no-perceptual ablation.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    l1 = (x - x_hat).abs().mean()
    perceptual = x.new_zeros(())
    if features is not None:
        feats_x = features(x)
        feats_hat = features(x_hat)
        if len(feats_x) != len(feats_hat):
            raise ValueError("feature extractor returned inconsistent layer counts")
        if len(layer_weights) < len(feats_x):
            raise ValueError(
                f"{len(feats_x)} feature layers but only {len(layer_weights)} layer weights"
            )
        for weight, fx, fh in zip(layer_weights, feats_x, feats_hat):
            perceptual = perceptual + weight * (fx - fh).abs().mean()
    return l1, perceptual


def kl_loss(mu_q: torch.Tensor, mu_p: torch.Tensor) -> torch.Tensor:
    """KL divergence of two isotropic unit-variance Gaussians: 0.5 ||mu_q - mu_p||^2.

    Averaged over the batch dimension.
    """
    if mu_q.shape != mu_p.shape:
        raise ValueError(f"dimension mismatch: {tuple(mu_q.shape)} vs {tuple(mu_p.shape)}")
    return 0.5 * (mu_q - mu_p).pow(2).sum(-1).mean()


def total_loss(
    separation: torch.Tensor,
    concentration: torch.Tensor,
    recon_l1: torch.Tensor,
    recon_perceptual: torch.Tensor,
    kl: torch.Tensor,
    weights: LossWeights,
) -> LossBundle:
    """Combine the parts into a LossBundle with the configured weights."""
    weights.validate()
    parts = {
        "separation": separation,
        "concentration": concentration,
        "recon_l1": recon_l1,
        "recon_perceptual": recon_perceptual,
        "kl": kl,
    }
    for name, part in parts.items():
        if not torch.isfinite(part).all():
            raise TrainingFault(name)
    prior = separation + concentration
    total = (
        weights.w_prior * prior
        + weights.w_recon * (recon_l1 + recon_perceptual)
        + weights.w_kl * kl
    )
    return LossBundle(
        prior=prior,
        separation=separation,
        concentration=concentration,
        recon_l1=recon_l1,
        recon_perceptual=recon_perceptual,
        kl=kl,
        total=total,
    )
