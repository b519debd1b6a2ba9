"""Adapter contracts for score networks and embedders, plus desk-scale references.

Adapters are read-only after construction and safe to share across runs. None
of the reference implementations requires external weights; full-scale
checkpoints are wired in through the loader registry instead of being bundled.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .content import FeatureStack
from .errors import AdapterError, RegistryError, ScheduleMismatchError
from .schedule import NoiseSchedule, make_linear_schedule


class ScoreAdapter:
    """Capability contract around a noise predictor.

    ``predict_eps(x_t, t)`` must be differentiable w.r.t. ``x_t`` and
    shape-preserving; ``t`` is a timestep on the original training grid.
    Encoder-feature extraction is optional and declared via
    ``has_encoder_features``.
    """

    native_schedule: NoiseSchedule | None = None

    def predict_eps(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        raise NotImplementedError

    @property
    def has_encoder_features(self) -> bool:
        return False

    def encoder_features(self, x: torch.Tensor, t: int, layer_ids) -> FeatureStack:
        raise AdapterError(f"{type(self).__name__} does not expose encoder features")


class EmbedderAdapter:
    """Text/image embedder contract: unit-norm vectors, image side differentiable."""

    image_size: int

    def embed_image(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed_text(self, text: str) -> torch.Tensor:
        raise NotImplementedError


class FeatureExtractor:
    """Perceptual-feature contract: named layers, ``features(x) -> FeatureStack``."""

    layer_ids: tuple[str, ...]

    def features(self, x: torch.Tensor) -> FeatureStack:
        raise NotImplementedError


class AnalyticGaussianScore(ScoreAdapter):
    """Exact noise predictor for data drawn from an isotropic Gaussian.

    For x0 ~ N(mu, s2*I) the marginal at noise level abar is Gaussian, so the
    optimal eps prediction has the closed form used here. Serves as the ground
    -truth oracle in sampler tests.
    """

    def __init__(self, mu: torch.Tensor, s2: float, schedule: NoiseSchedule):
        if s2 < 0:
            raise AdapterError(f"variance s2 must be >= 0, got {s2}")
        self.mu = torch.as_tensor(mu)
        self.s2 = float(s2)
        self.native_schedule = schedule

    def predict_eps(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        abar = self.native_schedule.alpha_bar(t)
        denom = abar * self.s2 + (1.0 - abar)
        if denom == 0:
            raise AdapterError(f"degenerate marginal at t={t}: abar*s2 + (1-abar) == 0")
        mu = self.mu.to(dtype=x_t.dtype)
        return math.sqrt(1.0 - abar) * (x_t - math.sqrt(abar) * mu) / denom


def analytic_gaussian_score(mu, s2: float, schedule: NoiseSchedule | None = None) -> AnalyticGaussianScore:
    if schedule is None:
        schedule = make_linear_schedule()
    return AnalyticGaussianScore(mu, s2, schedule)


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :].to(t.device)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    # SiLU keeps the input-to-output map smooth, which finite-difference
    # gradient checks rely on
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.SiLU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.SiLU(),
    )


class ToyUNet(nn.Module):
    """Small encoder-decoder noise predictor with named encoder taps.

    Encoder block ``enc{i}`` runs at spatial resolution H / 2**i; features are
    time-conditioned so they change with the queried timestep.
    """

    def __init__(self, base_channels: int = 16, depth: int = 3, in_channels: int = 3):
        super().__init__()
        if depth < 2:
            raise AdapterError(f"toy UNet depth must be >= 2, got {depth}")
        if base_channels < 1:
            raise AdapterError(f"base_channels must be >= 1, got {base_channels}")
        self.depth = depth
        self.base_channels = base_channels
        time_dim = base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        chans = [base_channels * 2**i for i in range(depth)]
        self.enc_blocks = nn.ModuleList()
        self.time_proj = nn.ModuleList()
        self.downs = nn.ModuleList()
        in_ch = in_channels
        for i, ch in enumerate(chans):
            self.enc_blocks.append(_conv_block(in_ch, ch))
            self.time_proj.append(nn.Linear(time_dim, ch))
            self.downs.append(
                nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < depth - 1 else nn.Identity()
            )
            in_ch = ch
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(depth - 1)):
            self.ups.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 4, stride=2, padding=1))
            self.dec_blocks.append(_conv_block(2 * chans[i], chans[i]))
        self.head = nn.Conv2d(chans[0], in_channels, 3, padding=1)
        # zero-initialized output head: the untrained net predicts zero noise,
        # which keeps deterministic round trips exact until it is trained
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(f"enc{i}" for i in range(self.depth))

    def _encode(self, x: torch.Tensor, temb: torch.Tensor) -> dict[str, torch.Tensor]:
        taps = {}
        h = x
        for i, (block, proj, down) in enumerate(zip(self.enc_blocks, self.time_proj, self.downs)):
            h = block(h) + proj(temb)[:, :, None, None]
            taps[f"enc{i}"] = h
            h = down(h)
        return taps

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(_sinusoidal_embedding(t, self.base_channels))
        taps = self._encode(x, temb)
        h = taps[f"enc{self.depth - 1}"]
        for j, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            i = self.depth - 2 - j
            h = up(h)
            h = block(torch.cat([h, taps[f"enc{i}"]], dim=1))
        return self.head(h)


class ToyUNetAdapter(ScoreAdapter):
    def __init__(self, module: ToyUNet):
        self.module = module.eval()
        self.module.requires_grad_(False)

    @property
    def has_encoder_features(self) -> bool:
        return True

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return self.module.layer_ids

    def _batched(self, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
        if x.dim() == 3:
            return x[None], True
        if x.dim() == 4:
            return x, False
        raise AdapterError(f"expected a (C,H,W) or (B,C,H,W) tensor, got dim {x.dim()}")

    def predict_eps(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        xb, squeeze = self._batched(x_t)
        tb = torch.full((xb.shape[0],), float(t), dtype=xb.dtype, device=xb.device)
        out = self.module(xb, tb)
        return out[0] if squeeze else out

    def encoder_features(self, x: torch.Tensor, t: int, layer_ids) -> FeatureStack:
        known = set(self.module.layer_ids)
        missing = [lid for lid in layer_ids if lid not in known]
        if missing:
            raise AdapterError(f"unknown encoder layers {missing}; available: {sorted(known)}")
        xb, squeeze = self._batched(x)
        tb = torch.full((xb.shape[0],), float(t), dtype=xb.dtype, device=xb.device)
        temb = self.module.time_mlp(_sinusoidal_embedding(tb, self.module.base_channels))
        taps = self.module._encode(xb, temb)
        layers = [(lid, taps[lid][0] if squeeze else taps[lid]) for lid in layer_ids]
        return FeatureStack(layers)

    def double(self) -> "ToyUNetAdapter":
        self.module.double()
        return self

    def float(self) -> "ToyUNetAdapter":
        self.module.float()
        return self


def build_toy_unet(channels: int = 16, depth: int = 3, seed: int = 0) -> ToyUNetAdapter:
    """Randomly initialized toy UNet; identical seed gives identical weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = ToyUNet(base_channels=channels, depth=depth)
    return ToyUNetAdapter(module)


def train_toy_unet(adapter: ToyUNetAdapter, schedule: NoiseSchedule, *,
                   iters: int = 200, image_size: int = 32, batch_size: int = 8,
                   lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Brief denoising training on synthetic blob images, for smoke runs only."""
    rng = np.random.default_rng(seed)
    module = adapter.module.train().requires_grad_(True)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    losses = []
    for _ in range(iters):
        x0 = torch.from_numpy(_blob_batch(rng, batch_size, image_size)).float()
        t_idx = rng.integers(0, schedule.T, size=batch_size)
        abar = torch.from_numpy(schedule.alpha_bars[t_idx]).float()[:, None, None, None]
        eps = torch.from_numpy(rng.standard_normal(x0.shape)).float()
        x_t = abar.sqrt() * x0 + (1 - abar).sqrt() * eps
        pred = module(x_t, torch.from_numpy(t_idx).float())
        loss = ((pred - eps) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    module.eval().requires_grad_(False)
    return losses


def _blob_batch(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    imgs = np.empty((n, 3, size, size))
    for i in range(n):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.1, 0.3)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r**2))
        color = rng.uniform(-1, 1, size=3)
        imgs[i] = color[:, None, None] * blob[None] + rng.uniform(-0.2, 0.2)
    return np.clip(imgs, -1, 1)


class StubEmbedder(EmbedderAdapter):
    """Fixed linear map + L2 normalization; deterministic text hashing.

    Small enough for tests, differentiable on the image side, and stable
    across platforms (text vectors are seeded from a SHA-256 digest).
    """

    def __init__(self, dim: int = 64, image_size: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.image_size = image_size
        n_in = 3 * image_size * image_size
        self.weight = torch.from_numpy(rng.standard_normal((dim, n_in)) / math.sqrt(n_in))

    def embed_image(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        xb = x[None] if single else x
        if xb.shape[-1] != self.image_size or xb.shape[-2] != self.image_size:
            xb = torch.nn.functional.interpolate(
                xb, size=(self.image_size, self.image_size), mode="bilinear",
                align_corners=False,
            )
        flat = xb.reshape(xb.shape[0], -1)
        emb = flat @ self.weight.to(flat.dtype).T
        norm = torch.linalg.vector_norm(emb, dim=-1, keepdim=True)
        if not bool((norm.detach() > 0).all()):
            raise AdapterError("image embedding has zero norm")
        emb = emb / norm
        return emb[0] if single else emb

    def embed_text(self, text: str) -> torch.Tensor:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.dim)
        return torch.from_numpy(vec / np.linalg.norm(vec))


class IdentityFeatures(FeatureExtractor):
    """Features are the pixels themselves; perceptual loss collapses to pixel MSE."""

    layer_ids = ("pixels",)

    def features(self, x: torch.Tensor) -> FeatureStack:
        return FeatureStack([("pixels", x)])


class LinearFeatures(FeatureExtractor):
    """Single dense layer with a fixed (or user-supplied) matrix over flat pixels."""

    layer_ids = ("linear",)

    def __init__(self, matrix: torch.Tensor | None = None, *,
                 n_in: int | None = None, dim: int = 32, seed: int = 0):
        if matrix is None:
            if n_in is None:
                raise AdapterError("LinearFeatures needs a matrix or n_in to draw one")
            rng = np.random.default_rng(seed)
            matrix = torch.from_numpy(rng.standard_normal((dim, n_in)) / math.sqrt(n_in))
        self.matrix = torch.as_tensor(matrix)

    def features(self, x: torch.Tensor) -> FeatureStack:
        flat = x.reshape(-1)
        if flat.shape[0] != self.matrix.shape[1]:
            raise AdapterError(
                f"image has {flat.shape[0]} values, matrix expects {self.matrix.shape[1]}"
            )
        return FeatureStack([("linear", self.matrix.to(flat.dtype) @ flat)])


@dataclass(frozen=True)
class CheckpointDescriptor:
    """Plain description of an external model: type name, weights, geometry."""

    name: str
    path: str | None = None
    image_size: int = 256
    channels: int = 3
    schedule: dict | None = None  # T / beta_start / beta_end of the training grid
    layer_ids: tuple[str, ...] | None = None
    params: dict = field(default_factory=dict)


_LOADERS: dict[str, Callable[[CheckpointDescriptor], object]] = {}


def register_loader(name: str, loader: Callable[[CheckpointDescriptor], object]) -> None:
    _LOADERS[name] = loader


def registered_types() -> list[str]:
    return sorted(_LOADERS)


def load_pretrained(desc: CheckpointDescriptor):
    """Build the adapter a descriptor names; populate its native schedule."""
    if desc.name not in _LOADERS:
        raise RegistryError(
            f"unknown adapter type {desc.name!r}; registered types: {registered_types()}"
        )
    if desc.path is not None and not Path(desc.path).exists():
        raise AdapterError(f"weight file not found: {desc.path}")
    adapter = _LOADERS[desc.name](desc)
    if desc.schedule is not None:
        adapter.native_schedule = make_linear_schedule(
            T=int(desc.schedule["T"]),
            beta_start=float(desc.schedule.get("beta_start", 1e-4)),
            beta_end=float(desc.schedule.get("beta_end", 0.02)),
        )
    return adapter


def schedules_equal(a: NoiseSchedule, b: NoiseSchedule) -> bool:
    return a.T == b.T and bool(np.allclose(a.betas, b.betas, rtol=0.0, atol=1e-12))


def resolve_base_schedule(adapter, configured: NoiseSchedule,
                          configured_explicit: bool) -> NoiseSchedule:
    """Pick between the run config's schedule and the checkpoint's native one.

    An explicitly configured schedule that conflicts with the checkpoint is a
    hard error; when the config left the schedule at defaults, the checkpoint
    knows best.
    """
    native = getattr(adapter, "native_schedule", None)
    if native is None or schedules_equal(native, configured):
        return configured
    if configured_explicit:
        raise ScheduleMismatchError(
            f"configured schedule (T={configured.T}) conflicts with the "
            f"checkpoint's native schedule (T={native.T}); align the config "
            f"or drop its [schedule] section"
        )
    return native


def _load_toy_unet(desc: CheckpointDescriptor) -> ToyUNetAdapter:
    adapter = build_toy_unet(
        channels=int(desc.params.get("channels", 16)),
        depth=int(desc.params.get("depth", 3)),
        seed=int(desc.params.get("seed", 0)),
    )
    if desc.path is not None:
        state = torch.load(desc.path, map_location="cpu", weights_only=True)
        adapter.module.load_state_dict(state)
    return adapter


def _load_stub_embedder(desc: CheckpointDescriptor) -> StubEmbedder:
    return StubEmbedder(
        dim=int(desc.params.get("dim", 64)),
        image_size=desc.image_size,
        seed=int(desc.params.get("seed", 0)),
    )


def _load_analytic_gaussian(desc: CheckpointDescriptor) -> AnalyticGaussianScore:
    mu = float(desc.params.get("mu", 0.0)) * torch.ones(
        desc.channels, desc.image_size, desc.image_size
    )
    return analytic_gaussian_score(mu, float(desc.params.get("s2", 1.0)))


def _load_identity_features(desc: CheckpointDescriptor) -> IdentityFeatures:
    return IdentityFeatures()


def _load_linear_features(desc: CheckpointDescriptor) -> LinearFeatures:
    return LinearFeatures(
        n_in=desc.channels * desc.image_size**2,
        dim=int(desc.params.get("dim", 32)),
        seed=int(desc.params.get("seed", 0)),
    )


register_loader("toy_unet", _load_toy_unet)
register_loader("stub_embedder", _load_stub_embedder)
register_loader("analytic_gaussian", _load_analytic_gaussian)
register_loader("identity_features", _load_identity_features)
register_loader("linear_features", _load_linear_features)
