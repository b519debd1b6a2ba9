"""End-to-end task execution: load, sample with guidance, write image + manifest.

A manifest is a JSON file written next to the output image. It embeds the full
resolved config text, the seed, the per-step loss trace and a hash of the
output bytes, so ``run_from_manifest`` can reproduce the run exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import models
from .config import (MODE_WHOLE_IMAGE, RunConfig, TASK_MODES, dump_config,
                     validate_config)
from .content import ContrastiveConfig, content_loss
from .errors import ConfigError, DiffstyleError
from .sampler import sample
from .schedule import make_linear_schedule, respace
from .style import WHOLE_IMAGE_POLICY, PatchPolicy, PromptPair, style_loss

CHECKPOINT_DIR_ENV = "DIFFSTYLE_CHECKPOINT_DIR"


@dataclass(frozen=True)
class StyleTask:
    """One unit of CLI work: an input image, a prompt pair, a seed, a destination."""

    source_image_path: str
    output_path: str
    prompts: PromptPair
    seed: int = 0
    mode: str = "style_transfer_patch"

    def __post_init__(self):
        if self.mode not in TASK_MODES:
            raise ConfigError([("task.mode", f"must be one of {TASK_MODES}, "
                                f"got {self.mode!r}")])


@dataclass
class RunResult:
    output_path: str
    manifest_path: str
    manifest: dict
    image: torch.Tensor


def load_image(path: str | Path, size: int) -> torch.Tensor:
    """Read an 8-bit RGB file, require a square frame, map to [-1, 1] floats."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.width != img.height:
                raise ConfigError([("task.source_image_path",
                                    f"image must be square, got {img.width}x{img.height}")])
            if img.width != size:
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except FileNotFoundError:
        raise ConfigError([("task.source_image_path", f"no such file: {path}")])
    x = arr / 127.5 - 1.0  # 0 -> -1, 255 -> ~1
    return torch.from_numpy(x).permute(2, 0, 1).contiguous()


def quantize(x: torch.Tensor) -> np.ndarray:
    """Map [-1, 1] floats to uint8 with round-half-even, the inverse of load_image."""
    arr = (x.detach().clamp(-1, 1).cpu().numpy() + 1.0) * 127.5
    return np.rint(arr).clip(0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(x: torch.Tensor, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(x)).save(path)


def resolve_checkpoint_path(desc: models.CheckpointDescriptor) -> models.CheckpointDescriptor:
    """Resolve relative weight paths against the checkpoint root env var."""
    root = os.environ.get(CHECKPOINT_DIR_ENV)
    if desc.path and root and not os.path.isabs(desc.path):
        return replace(desc, path=str(Path(root) / desc.path))
    return desc


class GuidanceEvaluator:
    """Binds the composite loss to one task's source image and prompts.

    Called once per reverse step with the current denoised estimate; returns
    the descent-signed gradient and the step's loss values. With every weight
    at zero it touches neither the embedder nor the random stream, so outputs
    cannot depend on prompts.
    """

    def __init__(self, source_image: torch.Tensor, prompts: PromptPair, *,
                 model, embedder, extractor, weights, patch_policy: PatchPolicy,
                 contrastive: ContrastiveConfig):
        self.source_image = source_image.detach()
        self.prompts = prompts
        self.model = model
        self.embedder = embedder
        self.extractor = extractor
        self.weights = weights
        self.patch_policy = patch_policy
        self.contrastive = contrastive

    def __call__(self, x0_hat: torch.Tensor, t: int, rng: np.random.Generator,
                 ) -> tuple[torch.Tensor | None, dict[str, float]]:
        w = self.weights
        if w.all_zero:
            return None, {"content": 0.0, "style": 0.0, "total": 0.0}
        x = x0_hat.detach().requires_grad_(True)
        with torch.enable_grad():
            parts = {"content": (x * 0.0).sum(), "style": (x * 0.0).sum()}
            if w.zecon or w.vgg or w.mse:
                parts["content"] = content_loss(
                    x, self.source_image, self.model, t, w.content(),
                    self.contrastive, rng, extractor=self.extractor)
            if w.clip_global or w.clip_directional:
                parts["style"] = style_loss(
                    x, self.source_image, self.prompts, self.patch_policy,
                    w.style(), self.embedder, rng)
            total = parts["content"] + parts["style"]
            grad = torch.autograd.grad(total, x)[0]
        losses = {name: value.item() for name, value in parts.items()}
        losses["total"] = total.item()
        return -grad, losses


def _validate_task_against_config(task: StyleTask, cfg: RunConfig):
    if cfg.weights.clip_directional > 0 and not task.prompts.p_source:
        raise ConfigError([("task.prompts.p_source",
                            "directional loss weight > 0 requires a source prompt")])
    if task.mode == MODE_WHOLE_IMAGE and not task.prompts.p_source:
        raise ConfigError([("task.prompts.p_source",
                            "whole-image mode requires both prompts")])


def _build_adapters(cfg: RunConfig):
    model = models.load_pretrained(resolve_checkpoint_path(cfg.model))
    embedder = models.load_pretrained(resolve_checkpoint_path(cfg.embedder))
    extractor = None
    if cfg.perceptual is not None:
        extractor = models.load_pretrained(cfg.perceptual)
    return model, embedder, extractor


def run_task(task: StyleTask, cfg: RunConfig) -> RunResult:
    """Execute one guided style-transfer run and write image + manifest."""
    started = time.time()
    _validate_task_against_config(task, cfg)
    model, embedder, extractor = _build_adapters(cfg)

    configured = make_linear_schedule(cfg.schedule_T, cfg.schedule_beta_start,
                                      cfg.schedule_beta_end)
    base = models.resolve_base_schedule(model, configured, cfg.schedule_explicit)
    respaced = respace(base, cfg.sampler.T_prime)

    x0 = load_image(task.source_image_path, cfg.model.image_size)
    policy = WHOLE_IMAGE_POLICY if task.mode == MODE_WHOLE_IMAGE else cfg.patch
    contrastive = cfg.contrastive
    if cfg.model.layer_ids:
        contrastive = replace(contrastive, layer_ids=cfg.model.layer_ids)
    evaluator = GuidanceEvaluator(
        x0, task.prompts, model=model, embedder=embedder, extractor=extractor,
        weights=cfg.weights, patch_policy=policy, contrastive=contrastive)

    rng = np.random.default_rng(task.seed)
    trace: list[dict] = []
    t_sample = time.monotonic()
    out = sample(respaced, x0, cfg.sampler, model, evaluator, rng,
                 step_callback=lambda k, losses: trace.append({"k": k, **losses}))
    sample_seconds = time.monotonic() - t_sample

    save_image(out, task.output_path)
    output_bytes = Path(task.output_path).read_bytes()
    manifest = {
        "task": {
            "source_image_path": str(task.source_image_path),
            "output_path": str(task.output_path),
            "p_source": task.prompts.p_source,
            "p_target": task.prompts.p_target,
            "seed": task.seed,
            "mode": task.mode,
        },
        "config_text": dump_config(cfg),
        "loss_trace": trace,
        "output_sha256": hashlib.sha256(output_bytes).hexdigest(),
        "timings": {
            "started_at": started,
            "sample_seconds": sample_seconds,
            "total_seconds": time.time() - started,
        },
    }
    manifest_path = str(task.output_path) + ".manifest.json"
    Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunResult(output_path=str(task.output_path), manifest_path=manifest_path,
                     manifest=manifest, image=out)


def task_from_manifest(manifest: dict, output_path: str | None = None,
                       ) -> tuple[StyleTask, RunConfig]:
    t = manifest["task"]
    task = StyleTask(
        source_image_path=t["source_image_path"],
        output_path=output_path or t["output_path"],
        prompts=PromptPair(p_source=t["p_source"], p_target=t["p_target"]),
        seed=int(t["seed"]),
        mode=t["mode"],
    )
    return task, validate_config(manifest["config_text"])


def run_from_manifest(manifest_path: str | Path,
                      output_path: str | None = None) -> RunResult:
    manifest = json.loads(Path(manifest_path).read_text())
    task, cfg = task_from_manifest(manifest, output_path)
    return run_task(task, cfg)


def derive_seeds(seed: int, n: int) -> list[int]:
    """Independent per-task seeds for batch runs, all derived from one root."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def run_batch(tasks: list[StyleTask], cfg: RunConfig,
              max_workers: int = 2) -> list[RunResult]:
    """Run independent tasks concurrently; adapters are rebuilt per task."""
    if not tasks:
        raise DiffstyleError("run_batch needs at least one task")
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run_task, task, cfg) for task in tasks]
        return [f.result() for f in futures]
