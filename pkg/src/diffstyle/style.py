"""Text-driven style losses over augmented random crops.

Losses return differentiable 0-dim torch tensors (same contract as the content
losses). Crop geometry and warp parameters depend only on the run-local random
stream, never on image values, so the image-to-loss map stays smooth for
gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .errors import GuidanceError

DEFAULT_N_PATCHES = 96
REDUCED_N_PATCHES = 32
DEFAULT_SCALE_RANGE = (0.01, 0.3)
TEXTURE_SCALE_RANGE = (0.01, 0.05)
PERSPECTIVE_DISTORTION = 0.5
MAX_ROTATION_DEG = 15.0


@dataclass(frozen=True)
class PatchPolicy:
    """How many crops to take, how large, and whether to warp them."""

    n_patches: int = DEFAULT_N_PATCHES
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE
    augment: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise GuidanceError(f"scale_range must satisfy 0 < min <= max <= 1, "
                                f"got {self.scale_range}")
        if self.n_patches < 1:
            raise GuidanceError(f"n_patches must be >= 1, got {self.n_patches}")


# Image translation / manipulation mode: one unwarped full-frame "patch"
WHOLE_IMAGE_POLICY = PatchPolicy(n_patches=1, scale_range=(1.0, 1.0), augment=False)


@dataclass(frozen=True)
class PromptPair:
    p_source: str
    p_target: str

    def __post_init__(self):
        if not self.p_target:
            raise GuidanceError("target prompt must be nonempty")


@dataclass(frozen=True)
class StyleWeights:
    global_clip: float = 5000.0
    directional: float = 5000.0

    def __post_init__(self):
        if self.global_clip < 0 or self.directional < 0:
            raise GuidanceError("style weights must be >= 0")


@dataclass
class PatchBatch:
    """Cropped (and possibly warped) patches plus their crop geometry."""

    patches: torch.Tensor  # (N, C, out, out)
    boxes: list[tuple[int, int, int]]  # (top, left, side) in source pixels
    image_size: int

    @property
    def fractions(self) -> list[float]:
        return [side / self.image_size for _, _, side in self.boxes]

    def __len__(self) -> int:
        return self.patches.shape[0]

    def __iter__(self):
        return iter(self.patches)


def _crop_side_bounds(policy: PatchPolicy, size: int) -> tuple[int, int]:
    lo_frac, hi_frac = policy.scale_range
    hi = math.floor(hi_frac * size)
    if hi < 1:
        raise GuidanceError(
            f"crop smaller than 1 pixel: max fraction {hi_frac} of a {size}px image")
    lo = max(math.ceil(lo_frac * size), 1)
    if lo > hi:
        raise GuidanceError(
            f"scale_range {policy.scale_range} admits no integer crop side on "
            f"a {size}px image")
    return lo, hi


def _inverse_homography(startpoints, endpoints) -> np.ndarray | None:
    """Coefficients (a..h) mapping endpoint coords back onto startpoint coords.

    Returns None when the correspondence is singular or the denominator
    g*x + h*y + 1 is poorly conditioned anywhere over the target square,
    which is where NaN pixels would come from.
    """
    a_mat = np.zeros((8, 8))
    b_vec = np.zeros(8)
    for i, ((sx, sy), (ex, ey)) in enumerate(zip(startpoints, endpoints)):
        a_mat[2 * i] = [ex, ey, 1, 0, 0, 0, -sx * ex, -sx * ey]
        a_mat[2 * i + 1] = [0, 0, 0, ex, ey, 1, -sy * ex, -sy * ey]
        b_vec[2 * i] = sx
        b_vec[2 * i + 1] = sy
    try:
        theta = np.linalg.solve(a_mat, b_vec)
    except np.linalg.LinAlgError:
        return None
    g, h = theta[6], theta[7]
    corners = np.asarray(startpoints, dtype=np.float64)
    denom = corners[:, 0] * g + corners[:, 1] * h + 1.0
    if np.any(denom < 0.3):  # vanishing line too close to the patch
        return None
    return theta


def _perspective_warp(patch: torch.Tensor, theta: np.ndarray, side: int) -> torch.Tensor:
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    denom = theta[6] * xs + theta[7] * ys + 1.0
    src_x = (theta[0] * xs + theta[1] * ys + theta[2]) / denom
    src_y = (theta[3] * xs + theta[4] * ys + theta[5]) / denom
    half = (side - 1) / 2.0
    grid = torch.from_numpy(
        np.stack([src_x / half - 1.0, src_y / half - 1.0], axis=-1))
    out = torch.nn.functional.grid_sample(
        patch[None], grid[None].to(patch.dtype), mode="bilinear",
        padding_mode="zeros", align_corners=True)
    return out[0]


def _random_perspective(patch: torch.Tensor, rng: np.random.Generator,
                        side: int) -> torch.Tensor:
    # each corner moves inward by up to distortion * half-side, like the
    # standard random-perspective transform; ill-conditioned draws are retried
    half_w = int(PERSPECTIVE_DISTORTION * side / 2)
    jitter = lambda: int(rng.integers(0, half_w + 1))
    corners = [[0, 0], [side - 1, 0], [side - 1, side - 1], [0, side - 1]]
    for _ in range(20):
        endpoints = [
            [jitter(), jitter()],
            [side - 1 - jitter(), jitter()],
            [side - 1 - jitter(), side - 1 - jitter()],
            [jitter(), side - 1 - jitter()],
        ]
        theta = _inverse_homography(corners, endpoints)
        if theta is not None:
            return _perspective_warp(patch, theta, side)
    return patch


def crop_and_augment(image: torch.Tensor, policy: PatchPolicy,
                     rng: np.random.Generator, out_size: int) -> PatchBatch:
    """Take N random square crops, optionally warp them, resize to ``out_size``.

    Crop sides are drawn uniformly over the integer pixel sizes inside
    ``scale_range``, so every recorded fraction lands inside the range.
    """
    if image.dim() != 3 or image.shape[-1] != image.shape[-2]:
        raise GuidanceError(f"expected a square (C,H,W) image, got {tuple(image.shape)}")
    size = image.shape[-1]
    lo, hi = _crop_side_bounds(policy, size)
    patches = []
    boxes = []
    for _ in range(policy.n_patches):
        side = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, size - side + 1))
        left = int(rng.integers(0, size - side + 1))
        patch = image[:, top:top + side, left:left + side]
        # below 4px the integer corner displacements quantize to zero and the
        # warps are a no-op; skip them
        if policy.augment and side >= 4:
            patch = _random_perspective(patch, rng, side)
            angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
            patch = TF.rotate(patch, angle, interpolation=TF.InterpolationMode.BILINEAR)
        patch = torch.nn.functional.interpolate(
            patch[None], size=(out_size, out_size), mode="bilinear",
            align_corners=False)[0]
        patches.append(patch)
        boxes.append((top, left, side))
    return PatchBatch(patches=torch.stack(patches), boxes=boxes, image_size=size)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x[None]
    if x.dim() == 4:
        if x.shape[0] == 0:
            raise GuidanceError("empty patch batch")
        return x
    raise GuidanceError(f"expected (C,H,W) or (N,C,H,W), got dim {x.dim()}")


def global_clip_loss(x: torch.Tensor, p_target: str, embedder) -> torch.Tensor:
    """Mean cosine distance between image embeddings and the target text."""
    img_emb = embedder.embed_image(_as_batch(x))
    txt_emb = embedder.embed_text(p_target).to(img_emb.dtype)
    cos = torch.nn.functional.cosine_similarity(img_emb, txt_emb[None], dim=-1)
    return (1.0 - cos).mean()


def directional_clip_loss(x_hat: torch.Tensor, x0: torch.Tensor,
                          pp: PromptPair, embedder) -> torch.Tensor:
    """Misalignment between the image-embedding shift and the prompt shift.

    The text direction runs source -> target; the image direction compares the
    full source image against each generated patch.
    """
    if not pp.p_source or not pp.p_target:
        raise GuidanceError("directional loss needs nonempty source and target prompts")
    delta_t = (embedder.embed_text(pp.p_source) - embedder.embed_text(pp.p_target))
    t_norm = torch.linalg.vector_norm(delta_t)
    if not bool(t_norm > 0):
        raise GuidanceError("degenerate text direction: source and target prompts "
                            "embed identically")
    src_emb = embedder.embed_image(x0).detach()
    hat_emb = embedder.embed_image(_as_batch(x_hat))
    delta_i = src_emb[None] - hat_emb
    i_norms = torch.linalg.vector_norm(delta_i, dim=-1)
    if not bool((i_norms.detach() > 0).all()):
        raise GuidanceError("degenerate image direction: a patch embeds identically "
                            "to the source image")
    delta_t = delta_t.to(delta_i.dtype)
    cos = (delta_i @ delta_t) / (i_norms * t_norm.to(delta_i.dtype))
    return (1.0 - cos).mean()


def style_loss(x_hat: torch.Tensor, x0: torch.Tensor, pp: PromptPair,
               policy: PatchPolicy, weights: StyleWeights, embedder,
               rng: np.random.Generator) -> torch.Tensor:
    """Weighted global + directional text-image loss over a fresh patch batch."""
    total = (x_hat * 0.0).sum()
    if weights.global_clip == 0 and weights.directional == 0:
        return total
    batch = crop_and_augment(x_hat, policy, rng, out_size=embedder.image_size)
    for name, weight, evaluate in (
        ("global", weights.global_clip,
         lambda: global_clip_loss(batch.patches, pp.p_target, embedder)),
        ("directional", weights.directional,
         lambda: directional_clip_loss(batch.patches, x0, pp, embedder)),
    ):
        if weight == 0:
            continue
        try:
            total = total + weight * evaluate()
        except GuidanceError as e:
            raise GuidanceError(f"style_loss[{name}]: {e}") from e
    return total
