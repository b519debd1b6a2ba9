"""Content-preservation losses over noise-predictor encoder features.

All losses return 0-dim torch tensors. The differentiation contract: when the
generated estimate is passed in with ``requires_grad=True``, the returned
scalar is differentiable with respect to it and the gradient is obtained with
``torch.autograd.grad``. Reference-image features are detached, so gradients
flow only through the generated side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import GuidanceError

DEFAULT_TEMPERATURE = 0.07
DEFAULT_LAYER_IDS = ("enc0", "enc1", "enc2")
DEFAULT_LOCATIONS_PER_LAYER = 256


@dataclass
class FeatureStack:
    """Ordered per-layer spatial feature maps, each of shape (C_l, H_l, W_l)."""

    layers: list[tuple[str, torch.Tensor]]

    def get(self, layer_id: str) -> torch.Tensor:
        for lid, fmap in self.layers:
            if lid == layer_id:
                return fmap
        raise GuidanceError(f"layer {layer_id!r} not in stack "
                            f"({[lid for lid, _ in self.layers]})")

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class ContrastiveConfig:
    layer_ids: tuple[str, ...] = DEFAULT_LAYER_IDS
    locations_per_layer: int = DEFAULT_LOCATIONS_PER_LAYER
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.layer_ids:
            raise GuidanceError("layer_ids must be nonempty")
        if len(set(self.layer_ids)) != len(self.layer_ids):
            raise GuidanceError(f"duplicate layer ids in {self.layer_ids}")
        if self.locations_per_layer < 2:
            raise GuidanceError("locations_per_layer must be >= 2 "
                                "(need at least one negative)")
        if not self.temperature > 0:
            raise GuidanceError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class ContentWeights:
    zecon: float = 100.0
    vgg: float = 10.0
    mse: float = 5000.0

    def __post_init__(self):
        for name in ("zecon", "vgg", "mse"):
            if getattr(self, name) < 0:
                raise GuidanceError(f"weight {name} must be >= 0")


def _unit(v: torch.Tensor) -> torch.Tensor:
    """L2-normalize along the last axis; zero-norm vectors are an error."""
    norm = torch.linalg.vector_norm(v.detach(), dim=-1)
    if not bool((norm > 0).all()):
        raise GuidanceError("cannot normalize a zero-norm feature vector")
    return v / torch.linalg.vector_norm(v, dim=-1, keepdim=True)


def infonce(v, v_pos, v_negs, tau: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Softmax cross-entropy of one positive pair against N negative pairs.

    Vectors are L2-normalized before the dot products; the log-sum-exp is
    shifted by the max logit so uniform logits give exactly log(1+N).
    """
    if not tau > 0:
        raise GuidanceError(f"temperature must be > 0, got {tau}")
    v = torch.as_tensor(v)
    v_pos = torch.as_tensor(v_pos)
    negs = [torch.as_tensor(n) for n in v_negs]
    if not negs:
        raise GuidanceError("infonce needs at least one negative")
    dims = {tuple(u.shape) for u in (v, v_pos, *negs)}
    if len(dims) != 1 or len(v.shape) != 1:
        raise GuidanceError(f"all vectors must be 1-D of equal size, got shapes {dims}")
    v = _unit(v)
    keys = _unit(torch.stack([v_pos, *negs]))
    logits = keys @ v / tau  # positive first
    shift = logits.detach().max()
    return torch.log(torch.exp(logits - shift).sum()) - (logits[0] - shift)


def _sample_locations(rng: np.random.Generator, n_locations: int, wanted: int) -> np.ndarray:
    n = min(wanted, n_locations)
    if n < 2:
        raise GuidanceError(f"need at least 2 sampled locations, layer has {n_locations}")
    return rng.choice(n_locations, size=n, replace=False)


def zecon_loss(x0_hat: torch.Tensor, x0: torch.Tensor, model, t: int,
               cfg: ContrastiveConfig, rng: np.random.Generator) -> torch.Tensor:
    """Patch-wise contrastive loss between encoder features of the two images.

    Both images go through the noise predictor's encoder at timestep ``t``.
    For every sampled spatial location the query comes from ``x0_hat``, the
    positive is the same location of ``x0`` and negatives are the other
    sampled locations of ``x0``. Summed over layers and locations.
    """
    if not getattr(model, "has_encoder_features", False):
        raise GuidanceError("model lacks feature extraction (encoder_features)")
    if x0_hat.shape != x0.shape:
        raise GuidanceError(f"image shapes differ: {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    # canonical layer order, so the loss is invariant to how cfg lists them
    layer_ids = tuple(sorted(cfg.layer_ids))
    feats_hat = model.encoder_features(x0_hat, t, layer_ids)
    feats_ref = model.encoder_features(x0.detach(), t, layer_ids)
    total = (x0_hat * 0.0).sum()
    for lid in layer_ids:
        z_hat = feats_hat.get(lid)
        z_ref = feats_ref.get(lid).detach()
        c = z_hat.shape[0]
        flat_hat = z_hat.reshape(c, -1).T  # (S, C)
        flat_ref = z_ref.reshape(c, -1).T
        idx = _sample_locations(rng, flat_hat.shape[0], cfg.locations_per_layer)
        q = _unit(flat_hat[idx])
        k = _unit(flat_ref[idx])
        logits = q @ k.T / cfg.temperature  # (n, n); diagonal = positives
        total = total + (torch.logsumexp(logits, dim=1) - logits.diagonal()).sum()
    return total


def perceptual_loss(x0_hat: torch.Tensor, x0: torch.Tensor, extractor) -> torch.Tensor:
    """Mean-squared error between feature maps, averaged over declared layers."""
    feats_hat = extractor.features(x0_hat)
    feats_ref = extractor.features(x0)
    losses = []
    for (lid_a, fa), (lid_b, fb) in zip(feats_hat.layers, feats_ref.layers):
        if lid_a != lid_b:
            raise GuidanceError(f"extractor returned mismatched layers {lid_a!r}/{lid_b!r}")
        losses.append(((fa - fb.detach()) ** 2).mean())
    if not losses:
        raise GuidanceError("extractor declared no layers")
    return torch.stack(losses).mean()


def pixel_loss(x0_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Mean of squared elementwise differences."""
    if x0_hat.shape != x0.shape:
        raise GuidanceError(f"image shapes differ: {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    return ((x0_hat - x0.detach()) ** 2).mean()


def content_loss(x0_hat: torch.Tensor, x0: torch.Tensor, model, t: int,
                 weights: ContentWeights, cfg: ContrastiveConfig,
                 rng: np.random.Generator, extractor=None) -> torch.Tensor:
    """Weighted sum of the three content terms; zero-weight terms are skipped."""
    total = (x0_hat * 0.0).sum()
    for name, weight, evaluate in (
        ("zecon", weights.zecon, lambda: zecon_loss(x0_hat, x0, model, t, cfg, rng)),
        ("vgg", weights.vgg, lambda: perceptual_loss(x0_hat, x0, extractor)),
        ("mse", weights.mse, lambda: pixel_loss(x0_hat, x0)),
    ):
        if weight == 0:
            continue
        if name == "vgg" and extractor is None:
            raise GuidanceError("content_loss[vgg]: no perceptual extractor configured")
        try:
            total = total + weight * evaluate()
        except GuidanceError as e:
            raise GuidanceError(f"content_loss[{name}]: {e}") from e
    return total
