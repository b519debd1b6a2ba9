"""Quantitative evaluation: text-image alignment scores, identity distance, timing.

Alignment is reported as cosine *similarity* (higher is better); the guidance
losses minimize the corresponding distance, so ``score == 1 - loss`` for the
whole-image case. The REFERENCE_* constants below are published full-scale
values (256x256 runs with pretrained ImageNET/FFHQ checkpoints) kept for
orientation only; the bundled toy models cannot reach them and nothing
asserts them.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import MetricUnavailableError
from .style import PatchPolicy, crop_and_augment

REFERENCE_CLIP_SCORE_FULL_SCALE = 0.1479
REFERENCE_FACE_ID_FULL_SCALE = 0.3881
REFERENCE_INFERENCE_SECONDS_FULL_SCALE = 38.0


def clip_score(x: torch.Tensor, p_target: str, embedder,
               policy: PatchPolicy | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Cosine similarity between the image (or its patches) and the target text."""
    txt = embedder.embed_text(p_target)
    if policy is None:
        img = embedder.embed_image(x)
        return float(torch.nn.functional.cosine_similarity(
            img, txt.to(img.dtype), dim=-1))
    if rng is None:
        rng = np.random.default_rng(0)
    batch = crop_and_augment(x, policy, rng, out_size=embedder.image_size)
    img = embedder.embed_image(batch.patches)
    cos = torch.nn.functional.cosine_similarity(img, txt.to(img.dtype)[None], dim=-1)
    return float(cos.mean())


def identity_distance(x: torch.Tensor, x_ref: torch.Tensor, face_embedder) -> float:
    """Cosine distance between face embeddings; lower means identity preserved."""
    if face_embedder is None:
        raise MetricUnavailableError(
            "identity distance needs a registered face-embedder adapter; none is bundled")
    a = face_embedder.embed_image(x)
    b = face_embedder.embed_image(x_ref)
    return float(1.0 - torch.nn.functional.cosine_similarity(a, b.to(a.dtype), dim=-1))


@dataclass
class BenchmarkResult:
    times: list[float]

    @property
    def median(self) -> float:
        return statistics.median(self.times)

    @property
    def spread(self) -> tuple[float, float]:
        return (min(self.times), max(self.times))


def benchmark(task, cfg, repetitions: int = 3) -> BenchmarkResult:
    """Median and spread of end-to-end wall time for one task."""
    from .pipeline import run_task

    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    times = []
    for _ in range(repetitions):
        start = time.monotonic()
        run_task(task, cfg)
        times.append(time.monotonic() - start)
    return BenchmarkResult(times=times)


@dataclass
class ImageEval:
    image_id: str
    clip_global: float
    clip_patch: float
    identity_distance: float | None
    seconds: float


@dataclass
class EvalReport:
    per_image: list[ImageEval]
    aggregates: dict[str, float | None] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["image_id\tclip_global\tclip_patch\tidentity\tseconds"]
        for row in self.per_image:
            ident = "unavailable" if row.identity_distance is None \
                else f"{row.identity_distance:.6f}"
            lines.append(f"{row.image_id}\t{row.clip_global:.6f}\t"
                         f"{row.clip_patch:.6f}\t{ident}\t{row.seconds:.3f}")
        lines.append("")
        lines.append("# aggregates")
        for key in sorted(self.aggregates):
            value = self.aggregates[key]
            rendered = "unavailable" if value is None else f"{value:.6f}"
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def build_report(rows: list[ImageEval]) -> EvalReport:
    aggregates = {
        "clip_global_mean": _mean([r.clip_global for r in rows]),
        "clip_patch_mean": _mean([r.clip_patch for r in rows]),
        "identity_mean": _mean([r.identity_distance for r in rows
                                if r.identity_distance is not None]),
        "seconds_mean": _mean([r.seconds for r in rows]),
    }
    return EvalReport(per_image=list(rows), aggregates=aggregates)


def evaluate_image(image_id: str, x: torch.Tensor, p_target: str, embedder,
                   policy: PatchPolicy, x_ref: torch.Tensor | None = None,
                   face_embedder=None, seconds: float = 0.0,
                   rng: np.random.Generator | None = None) -> ImageEval:
    """Score one output image globally and patch-wise; identity when possible."""
    ident = None
    if face_embedder is not None and x_ref is not None:
        ident = identity_distance(x, x_ref, face_embedder)
    return ImageEval(
        image_id=image_id,
        clip_global=clip_score(x, p_target, embedder),
        clip_patch=clip_score(x, p_target, embedder, policy=policy, rng=rng),
        identity_distance=ident,
        seconds=seconds,
    )
