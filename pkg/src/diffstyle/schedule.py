"""Noise schedules: construction, respacing, and closed-form coefficients.

All arrays are float64 numpy; schedules are frozen after construction and can
be shared freely across concurrent sampling runs. Timestep indices are
0-based: ``alpha_bars[t]`` is the cumulative product of ``alphas[0..t]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ScheduleError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance increments and the arrays derived from them.

    ``betas[t]`` is the per-step variance increment in (0, 1),
    ``alphas[t] = 1 - betas[t]`` and ``alpha_bars[t]`` the running product
    of alphas, i.e. the fraction of signal retained after t+1 noising steps.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            getattr(self, name).setflags(write=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def base_timestep(self, k: int) -> int:
        """Map a step index of this schedule onto the original timestep grid."""
        self._check_index(k)
        return int(k)

    def alpha_bar(self, t: int) -> float:
        self._check_index(t)
        return float(self.alpha_bars[t])

    def _check_index(self, t: int):
        if not 0 <= t < self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T})")


@dataclass(frozen=True)
class RespacedSchedule(NoiseSchedule):
    """A schedule running on a strict subsequence of a base schedule's steps.

    The recomputed betas satisfy ``alpha_bars[k] == base.alpha_bars[index_map[k]]``,
    so a model trained on the base grid sees consistent noise levels when
    queried at ``base_timestep(k)``.
    """

    base: NoiseSchedule = None  # type: ignore[assignment]
    index_map: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        super().__post_init__()
        self.index_map.setflags(write=False)

    @property
    def T_prime(self) -> int:
        return self.T

    @property
    def betas_prime(self) -> np.ndarray:
        return self.betas

    def base_timestep(self, k: int) -> int:
        self._check_index(k)
        return int(self.index_map[k])


def _derive(betas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    alphas = 1.0 - betas
    return alphas, np.cumprod(alphas)


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly interpolated betas from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas, alpha_bars = _derive(betas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def respace(s: NoiseSchedule, T_prime: int) -> RespacedSchedule:
    """Shorten ``s`` to ``T_prime`` steps on a uniform-stride subsequence.

    Betas are recomputed as ``1 - abar[k]/abar[k-1]`` so cumulative products
    at the selected steps are preserved exactly (up to float rounding).
    """
    if not 1 <= T_prime <= s.T:
        raise ScheduleError(f"T_prime must be in [1, {s.T}], got {T_prime}")
    index_map = np.floor(np.arange(T_prime, dtype=np.float64) * s.T / T_prime).astype(np.int64)
    if T_prime == s.T:
        betas = s.betas.copy()  # identity respacing is exact, skip the divide
    else:
        mapped = s.alpha_bars[index_map]
        betas = np.empty(T_prime, dtype=np.float64)
        betas[0] = 1.0 - mapped[0]
        betas[1:] = 1.0 - mapped[1:] / mapped[:-1]
    alphas, alpha_bars = _derive(betas)
    return RespacedSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        base=s,
        index_map=index_map,
    )


def forward_diffuse(s: NoiseSchedule, x0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Noise a clean image directly to level ``t``: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    if x0.shape != eps.shape:
        raise ScheduleError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    abar = s.alpha_bar(t)
    return float(np.sqrt(abar)) * x0 + float(np.sqrt(1.0 - abar)) * eps


def ddpm_sigma(s: NoiseSchedule, t: int) -> float:
    """Per-step noise scale that makes the clean-estimate update match ancestral sampling.

    Defined as sqrt((1-abar[t-1])/(1-abar[t])) * sqrt(1 - abar[t]/abar[t-1]);
    zero at t=0 by convention (the chain has no step below it).
    """
    s._check_index(t)
    if t == 0:
        return 0.0
    abar_prev = float(s.alpha_bars[t - 1])
    abar = float(s.alpha_bars[t])
    return float(np.sqrt((1.0 - abar_prev) / (1.0 - abar)) * np.sqrt(1.0 - abar / abar_prev))


def dump_params(path: str | Path, T: int, beta_start: float, beta_end: float,
                T_prime: int | None = None) -> None:
    """Write the construction parameters as plain ``key = value`` lines."""
    lines = [f"T = {T}", f"beta_start = {beta_start!r}", f"beta_end = {beta_end!r}"]
    if T_prime is not None:
        lines.append(f"T_prime = {T_prime}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path: str | Path) -> dict:
    """Read parameters written by :func:`dump_params`."""
    params: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ScheduleError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in ("T", "T_prime"):
            params[key] = int(value)
        elif key in ("beta_start", "beta_end"):
            params[key] = float(value)
        else:
            raise ScheduleError(f"{path}:{lineno}: unknown key {key!r}")
    return params
