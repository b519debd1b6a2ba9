"""Forward encoding and the guided reverse-diffusion loop.

One sampling run is strictly sequential and owns its state and random stream;
schedules and model adapters are treated as read-only. Images are 3-channel
tensors nominally in [-1, 1]; only the final output is clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import SamplingError
from .schedule import NoiseSchedule, forward_diffuse

FORWARD_MODES = ("ddim_deterministic", "ddpm_stochastic")
REVERSE_MODES = ("ddpm", "ddim")

# Guidance evaluators are callables (x0_hat, t, rng) -> (grad | None, losses);
# grad is descent-signed and added verbatim to the denoised estimate.
GuidanceFn = Callable[[torch.Tensor, int, np.random.Generator],
                      tuple[torch.Tensor | None, dict[str, float]]]


@dataclass(frozen=True)
class DiffusionState:
    """Current latent and its respaced step index (k = -1 once finished)."""

    x_t: torch.Tensor
    k: int


@dataclass(frozen=True)
class SamplerConfig:
    forward_mode: str = "ddim_deterministic"
    reverse_mode: str = "ddpm"
    eta: float = 0.0
    t0_index: int = 25
    T_prime: int = 50
    rederive_eps_after_guidance: bool = False

    def __post_init__(self):
        if self.forward_mode not in FORWARD_MODES:
            raise SamplingError(f"forward_mode must be one of {FORWARD_MODES}, "
                                f"got {self.forward_mode!r}")
        if self.reverse_mode not in REVERSE_MODES:
            raise SamplingError(f"reverse_mode must be one of {REVERSE_MODES}, "
                                f"got {self.reverse_mode!r}")
        if self.eta < 0:
            raise SamplingError(f"eta must be >= 0, got {self.eta}")
        if not 0 <= self.t0_index < self.T_prime:
            raise SamplingError(f"t0_index must be in [0, T_prime={self.T_prime}), "
                                f"got {self.t0_index}")


def _check_schedule(s: NoiseSchedule, config: SamplerConfig):
    if s.T != config.T_prime:
        raise SamplingError(f"schedule has {s.T} steps but config.T_prime={config.T_prime}")


def denoised_estimate(s: NoiseSchedule, eps_pred: torch.Tensor,
                      x_t: torch.Tensor, k: int) -> torch.Tensor:
    """One-shot clean-image prediction: (x_t - sqrt(1-abar)*eps) / sqrt(abar)."""
    if eps_pred.shape != x_t.shape:
        raise SamplingError(f"eps_pred shape {tuple(eps_pred.shape)} != "
                            f"x_t shape {tuple(x_t.shape)}")
    abar = s.alpha_bar(k)
    if abar == 0:
        raise SamplingError(f"degenerate schedule: alpha_bar[{k}] == 0")
    return (x_t - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def apply_guidance(x0_hat: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Add a descent-signed loss gradient to the denoised estimate."""
    if grad.shape != x0_hat.shape:
        raise SamplingError(f"grad shape {tuple(grad.shape)} != "
                            f"x0_hat shape {tuple(x0_hat.shape)}")
    if not bool(torch.isfinite(grad).all()):
        raise SamplingError("non-finite guidance gradient")
    return x0_hat + grad


def reverse_step(s: NoiseSchedule, state: DiffusionState, eps_pred: torch.Tensor,
                 x0_hat_guided: torch.Tensor, config: SamplerConfig,
                 noise: torch.Tensor | None = None) -> DiffusionState:
    """One transition k -> k-1 of the clean-estimate-form reverse process.

    x_{k-1} = sqrt(abar[k-1]) * x0_hat + sqrt(1 - abar[k-1] - sigma^2) * eps
              + sigma * noise
    with sigma the ancestral value for reverse_mode="ddpm" and eta times it
    for "ddim". The step into k-1 == 0 adds no noise; at k == 0 the guided
    estimate itself is emitted.
    """
    k = state.k
    if k < 0:
        raise SamplingError("state is already final", step=k)
    if k == 0:
        return DiffusionState(x_t=x0_hat_guided, k=-1)
    s._check_index(k)
    abar_prev = float(s.alpha_bars[k - 1])
    abar = float(s.alpha_bars[k])
    eta = 1.0 if config.reverse_mode == "ddpm" else config.eta
    # sigma^2 = eta^2 * (1-abar_prev) * ratio, with ratio in [0, 1); keeping the
    # factored form makes the radicand provably nonnegative for eta <= 1
    ratio = (1.0 - abar / abar_prev) / (1.0 - abar)
    radicand = (1.0 - abar_prev) * (1.0 - eta * eta * ratio)
    if radicand < 0:
        raise SamplingError(
            f"negative radicand 1 - abar[k-1] - sigma^2 = {radicand:.3e} "
            f"(eta={eta} is inconsistent with the schedule)", step=k)
    sigma = eta * math.sqrt((1.0 - abar_prev) * ratio)
    x_prev = math.sqrt(abar_prev) * x0_hat_guided + math.sqrt(radicand) * eps_pred
    if k - 1 > 0 and sigma > 0:
        if noise is None:
            raise SamplingError("stochastic step requires a noise tensor", step=k)
        x_prev = x_prev + sigma * noise
    return DiffusionState(x_t=x_prev, k=k - 1)


def _predict(model, x: torch.Tensor, t: int, k: int) -> torch.Tensor:
    try:
        return model.predict_eps(x, t)
    except SamplingError:
        raise
    except Exception as e:
        raise SamplingError(f"noise predictor failed: {e}", step=k) from e


def _gaussian(rng: np.random.Generator, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(tuple(like.shape))).to(like.dtype)


_INVERSION_MAX_ITERS = 32


def _invert_step(model, x_prev: torch.Tensor, a_prev: float, a_next: float,
                 eps0: torch.Tensor, t_next: int, k: int) -> torch.Tensor:
    """Solve the noise-free reverse transition for its higher-noise endpoint.

    Finds x with sqrt(a_prev)*x0_hat(x) + sqrt(1-a_prev)*eps(x) == x_prev by
    fixed-point iteration, starting from the one-shot estimate that reuses the
    previous state's eps. The eps coefficient of the map is O(1/T'), so the
    iteration contracts for any moderately Lipschitz predictor.
    """
    c_prev = math.sqrt(a_next / a_prev) * math.sqrt(1.0 - a_prev)
    c_next = math.sqrt(1.0 - a_next)

    def step_from(eps: torch.Tensor) -> torch.Tensor:
        return math.sqrt(a_next / a_prev) * x_prev + (c_next - c_prev) * eps

    x = step_from(eps0)
    tol = 16 * torch.finfo(x.dtype).eps * max(1.0, float(x.abs().max()))
    prev_delta = math.inf
    for _ in range(_INVERSION_MAX_ITERS):
        x_new = step_from(_predict(model, x, t_next, k))
        delta = float((x_new - x).abs().max())
        x = x_new
        if delta <= tol or delta >= prev_delta:
            break
        prev_delta = delta
    return x


@torch.no_grad()
def forward_encode(s: NoiseSchedule, x0: torch.Tensor, config: SamplerConfig,
                   model, rng: np.random.Generator) -> DiffusionState:
    """Produce the latent at index t0: one noising draw, or deterministic inversion.

    Deterministic mode inverts the noise-free reverse transitions one by one
    (including the final clean-image emission), so an unguided eta=0 reverse
    pass from the result reconstructs x0 to solver precision.
    """
    _check_schedule(s, config)
    t0 = config.t0_index
    if config.forward_mode == "ddpm_stochastic":
        return DiffusionState(x_t=forward_diffuse(s, x0, t0, _gaussian(rng, x0)), k=t0)
    if t0 == 0:
        return DiffusionState(x_t=x0, k=t0)
    # clean image -> state at index 0 (inverse of the final x0_hat emission)
    eps0 = _predict(model, x0, s.base_timestep(0), 0)
    x = _invert_step(model, x0, 1.0, float(s.alpha_bars[0]), eps0,
                     s.base_timestep(0), 0)
    for k in range(1, t0 + 1):
        eps0 = _predict(model, x, s.base_timestep(k - 1), k)
        x = _invert_step(model, x, float(s.alpha_bars[k - 1]), float(s.alpha_bars[k]),
                         eps0, s.base_timestep(k), k)
        if not bool(torch.isfinite(x).all()):
            raise SamplingError("non-finite latent during inversion", step=k)
    return DiffusionState(x_t=x, k=t0)


def sample(s: NoiseSchedule, x0: torch.Tensor, config: SamplerConfig, model,
           guidance: GuidanceFn | None = None,
           rng: np.random.Generator | None = None,
           step_callback: Callable[[int, dict[str, float]], None] | None = None,
           ) -> torch.Tensor:
    """Encode to t0, then run the guided reverse loop down to the clean image.

    Each step predicts noise, forms the denoised estimate, shifts it by the
    guidance gradient, and takes one reverse transition. The loop runs without
    autograd; evaluators build their own graphs under ``torch.enable_grad``.
    The returned image is clamped to [-1, 1]; intermediate latents are not.
    """
    _check_schedule(s, config)
    if rng is None:
        rng = np.random.default_rng(0)
    stochastic = config.reverse_mode == "ddpm" or config.eta > 0
    state = forward_encode(s, x0, config, model, rng)
    while state.k >= 0:
        k = state.k
        t = s.base_timestep(k)
        with torch.no_grad():
            eps = _predict(model, state.x_t, t, k)
            x0_hat = denoised_estimate(s, eps, state.x_t, k)
        losses: dict[str, float] = {}
        if guidance is not None:
            try:
                grad, losses = guidance(x0_hat, t, rng)
            except SamplingError:
                raise
            except Exception as e:
                raise SamplingError(f"guidance failed: {e}", step=k) from e
            if grad is not None:
                try:
                    x0_hat = apply_guidance(x0_hat, grad)
                except SamplingError as e:
                    raise SamplingError(str(e), step=k) from e
        if config.rederive_eps_after_guidance and k > 0:
            abar = float(s.alpha_bars[k])
            eps = (state.x_t - math.sqrt(abar) * x0_hat) / math.sqrt(1.0 - abar)
        noise = _gaussian(rng, state.x_t) if stochastic and k > 1 else None
        state = reverse_step(s, state, eps, x0_hat, config, noise)
        if not bool(torch.isfinite(state.x_t).all()):
            raise SamplingError("non-finite latent after reverse step", step=k)
        if step_callback is not None:
            step_callback(k, losses)
    return state.x_t.clamp(-1.0, 1.0)
