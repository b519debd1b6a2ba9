"""Run configuration: flat INI-style text with one section per subsystem.

``validate_config`` parses text into a fully resolved :class:`RunConfig`,
applying defaults and reporting violations by field path, either first-error
or all at once. ``dump_config`` writes the resolved config back out, which is
what run manifests embed for reproduction.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from importlib import resources

from .content import ContentWeights, ContrastiveConfig, DEFAULT_LAYER_IDS
from .errors import ConfigError, DiffstyleError
from .models import CheckpointDescriptor, registered_types
from .sampler import FORWARD_MODES, REVERSE_MODES, SamplerConfig
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T
from .style import PatchPolicy, PromptPair, StyleWeights

MODE_STYLE_TRANSFER = "style_transfer_patch"
MODE_WHOLE_IMAGE = "whole_image"
TASK_MODES = (MODE_STYLE_TRANSFER, MODE_WHOLE_IMAGE)


@dataclass(frozen=True)
class GuidanceWeights:
    """All five loss weights of a run."""

    clip_global: float = 5000.0
    clip_directional: float = 5000.0
    zecon: float = 100.0
    mse: float = 5000.0
    vgg: float = 10.0

    def __post_init__(self):
        for name in ("clip_global", "clip_directional", "zecon", "mse", "vgg"):
            if getattr(self, name) < 0:
                raise ConfigError([(f"weights.{name}", "must be >= 0")])

    def content(self) -> ContentWeights:
        return ContentWeights(zecon=self.zecon, vgg=self.vgg, mse=self.mse)

    def style(self) -> StyleWeights:
        return StyleWeights(global_clip=self.clip_global, directional=self.clip_directional)

    @property
    def all_zero(self) -> bool:
        return not any((self.clip_global, self.clip_directional,
                        self.zecon, self.mse, self.vgg))


@dataclass(frozen=True)
class RunConfig:
    schedule_T: int = DEFAULT_T
    schedule_beta_start: float = DEFAULT_BETA_START
    schedule_beta_end: float = DEFAULT_BETA_END
    schedule_explicit: bool = False  # True when the config text pinned [schedule]
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    patch: PatchPolicy = field(default_factory=PatchPolicy)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    model: CheckpointDescriptor = field(default_factory=lambda: CheckpointDescriptor(
        name="toy_unet", image_size=32, params={"channels": 16, "depth": 3, "seed": 0}))
    embedder: CheckpointDescriptor = field(default_factory=lambda: CheckpointDescriptor(
        name="stub_embedder", image_size=32, params={"dim": 64, "seed": 0}))
    perceptual: CheckpointDescriptor | None = field(
        default_factory=lambda: CheckpointDescriptor(name="identity_features", image_size=32))
    prompts: PromptPair | None = None  # suggested pair; task-level flags win


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "on": True,
                "false": False, "0": False, "no": False, "off": False}

_KNOWN_KEYS = {
    "schedule": {"T", "beta_start", "beta_end"},
    "sampler": {"forward_mode", "reverse_mode", "eta", "t0_index", "T_prime",
                "rederive_eps_after_guidance"},
    "weights": {"clip_global", "clip_directional", "zecon", "mse", "vgg"},
    "patch": {"n_patches", "scale_min", "scale_max", "augment"},
    "contrastive": {"layer_ids", "locations_per_layer", "temperature"},
    "model": {"type", "path", "image_size", "channels", "base_channels", "depth",
              "seed", "layer_ids", "schedule_T", "schedule_beta_start",
              "schedule_beta_end"},
    "embedder": {"type", "path", "image_size", "dim", "seed"},
    "perceptual": {"type", "dim", "seed"},
    "prompts": {"p_source", "p_target"},
}


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL_VALUES[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {raw!r}")


def _parse_layer_ids(raw: str) -> tuple[str, ...]:
    ids = tuple(part.strip() for part in raw.split(",") if part.strip())
    if not ids:
        raise ValueError(f"empty layer list: {raw!r}")
    return ids


class _Reader:
    """Typed option access that records violations instead of raising."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser
        self.errors: list[tuple[str, str]] = []

    def get(self, section: str, key: str, cast, default):
        if not self.parser.has_option(section, key):
            return default
        raw = self.parser.get(section, key)
        try:
            return cast(raw)
        except (ValueError, TypeError) as e:
            self.errors.append((f"{section}.{key}", str(e) or f"invalid value {raw!r}"))
            return default

    def require(self, condition: bool, path: str, message: str):
        if not condition:
            self.errors.append((path, message))


def validate_config(text: str, all_errors: bool = False) -> RunConfig:
    """Parse config text, apply defaults, reject contradictions.

    Raises :class:`ConfigError` carrying either the first violation or, with
    ``all_errors=True``, every violation found.
    """
    # strict=False merges repeated sections (later keys win), so preset text
    # can be composed with override fragments
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       strict=False)
    parser.optionxform = str  # keep option case: T and T_prime are capitalized
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError([("config", f"unparseable: {e}")])

    r = _Reader(parser)
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            r.errors.append((section, f"unknown section; known: {sorted(_KNOWN_KEYS)}"))
            continue
        for key in parser.options(section):
            if key not in _KNOWN_KEYS[section]:
                r.errors.append((f"{section}.{key}",
                                 f"unknown key; known: {sorted(_KNOWN_KEYS[section])}"))

    schedule_T = r.get("schedule", "T", int, DEFAULT_T)
    beta_start = r.get("schedule", "beta_start", float, DEFAULT_BETA_START)
    beta_end = r.get("schedule", "beta_end", float, DEFAULT_BETA_END)
    schedule_explicit = parser.has_section("schedule") and bool(parser.options("schedule"))
    r.require(schedule_T >= 2, "schedule.T", f"must be >= 2, got {schedule_T}")
    r.require(0 < beta_start <= beta_end < 1, "schedule.beta_start",
              f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")

    forward_mode = r.get("sampler", "forward_mode", str, "ddim_deterministic")
    reverse_mode = r.get("sampler", "reverse_mode", str, "ddpm")
    eta = r.get("sampler", "eta", float, 0.0)
    t0_index = r.get("sampler", "t0_index", int, 25)
    T_prime = r.get("sampler", "T_prime", int, 50)
    rederive = r.get("sampler", "rederive_eps_after_guidance", _parse_bool, False)
    r.require(forward_mode in FORWARD_MODES, "sampler.forward_mode",
              f"must be one of {FORWARD_MODES}, got {forward_mode!r}")
    r.require(reverse_mode in REVERSE_MODES, "sampler.reverse_mode",
              f"must be one of {REVERSE_MODES}, got {reverse_mode!r}")
    r.require(eta >= 0, "sampler.eta", f"must be >= 0, got {eta}")
    r.require(1 <= T_prime <= schedule_T, "sampler.T_prime",
              f"T_prime={T_prime} must be in [1, schedule.T={schedule_T}]")
    r.require(0 <= t0_index < T_prime, "sampler.t0_index",
              f"t0_index={t0_index} must be in [0, T_prime={T_prime}) (sampler.T_prime)")

    weights_kw = {}
    for name in ("clip_global", "clip_directional", "zecon", "mse", "vgg"):
        value = r.get("weights", name, float, getattr(GuidanceWeights(), name))
        r.require(value >= 0, f"weights.{name}", f"must be >= 0, got {value}")
        weights_kw[name] = max(value, 0.0)

    n_patches = r.get("patch", "n_patches", int, 96)
    scale_min = r.get("patch", "scale_min", float, 0.01)
    scale_max = r.get("patch", "scale_max", float, 0.3)
    augment = r.get("patch", "augment", _parse_bool, True)
    r.require(n_patches >= 1, "patch.n_patches", f"must be >= 1, got {n_patches}")
    r.require(0 < scale_min <= 1, "patch.scale_min", f"must be in (0, 1], got {scale_min}")
    r.require(scale_min <= scale_max <= 1, "patch.scale_min",
              f"scale_min={scale_min} must be <= scale_max={scale_max} (patch.scale_max)")

    layer_ids = r.get("contrastive", "layer_ids", _parse_layer_ids, DEFAULT_LAYER_IDS)
    locations = r.get("contrastive", "locations_per_layer", int, 256)
    temperature = r.get("contrastive", "temperature", float, 0.07)
    r.require(locations >= 2, "contrastive.locations_per_layer",
              f"must be >= 2, got {locations}")
    r.require(temperature > 0, "contrastive.temperature",
              f"must be > 0, got {temperature}")

    model_type = r.get("model", "type", str, "toy_unet")
    model_image_size = r.get("model", "image_size", int, 32)
    model_channels = r.get("model", "channels", int, 3)
    r.require(model_type in registered_types(), "model.type",
              f"unknown adapter type {model_type!r}; registered: {registered_types()}")
    r.require(model_image_size >= 4, "model.image_size",
              f"must be >= 4, got {model_image_size}")
    model_schedule = None
    if parser.has_option("model", "schedule_T"):
        model_schedule = {
            "T": r.get("model", "schedule_T", int, DEFAULT_T),
            "beta_start": r.get("model", "schedule_beta_start", float, DEFAULT_BETA_START),
            "beta_end": r.get("model", "schedule_beta_end", float, DEFAULT_BETA_END),
        }
    model_layers = r.get("model", "layer_ids", _parse_layer_ids, None)

    embedder_type = r.get("embedder", "type", str, "stub_embedder")
    embedder_size = r.get("embedder", "image_size", int, 32)
    r.require(embedder_type in registered_types(), "embedder.type",
              f"unknown adapter type {embedder_type!r}; registered: {registered_types()}")

    prompt_source = r.get("prompts", "p_source", str, "")
    prompt_target = r.get("prompts", "p_target", str, "")
    r.require(not parser.has_section("prompts") or bool(prompt_target),
              "prompts.p_target", "must be nonempty when [prompts] is present")

    perceptual_type = r.get("perceptual", "type", str, "identity_features")
    r.require(perceptual_type == "none" or perceptual_type in registered_types(),
              "perceptual.type",
              f"unknown adapter type {perceptual_type!r}; registered: "
              f"{registered_types()} or 'none'")
    r.require(perceptual_type != "none" or weights_kw["vgg"] == 0, "perceptual.type",
              "perceptual extractor disabled but weights.vgg > 0")

    if r.errors:
        raise ConfigError(r.errors if all_errors else r.errors[:1])

    try:
        return RunConfig(
            schedule_T=schedule_T,
            schedule_beta_start=beta_start,
            schedule_beta_end=beta_end,
            schedule_explicit=schedule_explicit,
            sampler=SamplerConfig(
                forward_mode=forward_mode, reverse_mode=reverse_mode, eta=eta,
                t0_index=t0_index, T_prime=T_prime,
                rederive_eps_after_guidance=rederive,
            ),
            weights=GuidanceWeights(**weights_kw),
            patch=PatchPolicy(n_patches=n_patches, scale_range=(scale_min, scale_max),
                              augment=augment),
            contrastive=ContrastiveConfig(layer_ids=layer_ids,
                                          locations_per_layer=locations,
                                          temperature=temperature),
            model=CheckpointDescriptor(
                name=model_type,
                path=r.get("model", "path", str, None),
                image_size=model_image_size,
                channels=model_channels,
                schedule=model_schedule,
                layer_ids=model_layers,
                params={
                    "channels": r.get("model", "base_channels", int, 16),
                    "depth": r.get("model", "depth", int, 3),
                    "seed": r.get("model", "seed", int, 0),
                },
            ),
            embedder=CheckpointDescriptor(
                name=embedder_type,
                path=r.get("embedder", "path", str, None),
                image_size=embedder_size,
                params={
                    "dim": r.get("embedder", "dim", int, 64),
                    "seed": r.get("embedder", "seed", int, 0),
                },
            ),
            perceptual=None if perceptual_type == "none" else CheckpointDescriptor(
                name=perceptual_type,
                image_size=model_image_size,
                channels=model_channels,
                params={
                    "dim": r.get("perceptual", "dim", int, 32),
                    "seed": r.get("perceptual", "seed", int, 0),
                },
            ),
            prompts=PromptPair(prompt_source, prompt_target) if prompt_target else None,
        )
    except DiffstyleError as e:
        raise ConfigError([("config", str(e))]) from e


def dump_config(cfg: RunConfig) -> str:
    """Serialize a resolved config back to text; round-trips through validate."""
    lines = [
        "[schedule]",
        f"T = {cfg.schedule_T}",
        f"beta_start = {cfg.schedule_beta_start!r}",
        f"beta_end = {cfg.schedule_beta_end!r}",
        "",
        "[sampler]",
        f"forward_mode = {cfg.sampler.forward_mode}",
        f"reverse_mode = {cfg.sampler.reverse_mode}",
        f"eta = {cfg.sampler.eta!r}",
        f"t0_index = {cfg.sampler.t0_index}",
        f"T_prime = {cfg.sampler.T_prime}",
        f"rederive_eps_after_guidance = {str(cfg.sampler.rederive_eps_after_guidance).lower()}",
        "",
        "[weights]",
        f"clip_global = {cfg.weights.clip_global!r}",
        f"clip_directional = {cfg.weights.clip_directional!r}",
        f"zecon = {cfg.weights.zecon!r}",
        f"mse = {cfg.weights.mse!r}",
        f"vgg = {cfg.weights.vgg!r}",
        "",
        "[patch]",
        f"n_patches = {cfg.patch.n_patches}",
        f"scale_min = {cfg.patch.scale_range[0]!r}",
        f"scale_max = {cfg.patch.scale_range[1]!r}",
        f"augment = {str(cfg.patch.augment).lower()}",
        "",
        "[contrastive]",
        f"layer_ids = {', '.join(cfg.contrastive.layer_ids)}",
        f"locations_per_layer = {cfg.contrastive.locations_per_layer}",
        f"temperature = {cfg.contrastive.temperature!r}",
        "",
        "[model]",
        f"type = {cfg.model.name}",
        f"image_size = {cfg.model.image_size}",
        f"channels = {cfg.model.channels}",
        f"base_channels = {cfg.model.params.get('channels', 16)}",
        f"depth = {cfg.model.params.get('depth', 3)}",
        f"seed = {cfg.model.params.get('seed', 0)}",
    ]
    if cfg.model.path:
        lines.append(f"path = {cfg.model.path}")
    if cfg.model.layer_ids:
        lines.append(f"layer_ids = {', '.join(cfg.model.layer_ids)}")
    if cfg.model.schedule:
        lines.append(f"schedule_T = {cfg.model.schedule['T']}")
        lines.append(f"schedule_beta_start = {cfg.model.schedule['beta_start']!r}")
        lines.append(f"schedule_beta_end = {cfg.model.schedule['beta_end']!r}")
    lines += [
        "",
        "[embedder]",
        f"type = {cfg.embedder.name}",
        f"image_size = {cfg.embedder.image_size}",
        f"dim = {cfg.embedder.params.get('dim', 64)}",
        f"seed = {cfg.embedder.params.get('seed', 0)}",
    ]
    if cfg.embedder.path:
        lines.append(f"path = {cfg.embedder.path}")
    lines += ["", "[perceptual]"]
    if cfg.perceptual is None:
        lines.append("type = none")
    else:
        lines += [
            f"type = {cfg.perceptual.name}",
            f"dim = {cfg.perceptual.params.get('dim', 32)}",
            f"seed = {cfg.perceptual.params.get('seed', 0)}",
        ]
    if cfg.prompts is not None:
        lines += [
            "",
            "[prompts]",
            f"p_source = {cfg.prompts.p_source}",
            f"p_target = {cfg.prompts.p_target}",
        ]
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, t0_index: int | None = None,
                   T_prime: int | None = None) -> RunConfig:
    """Apply CLI-level sampler overrides and revalidate the cross-field rules."""
    if t0_index is None and T_prime is None:
        return cfg
    new_t0 = cfg.sampler.t0_index if t0_index is None else t0_index
    new_tp = cfg.sampler.T_prime if T_prime is None else T_prime
    if not 1 <= new_tp <= cfg.schedule_T:
        raise ConfigError([("sampler.T_prime",
                            f"T_prime={new_tp} must be in [1, schedule.T={cfg.schedule_T}]")])
    if not 0 <= new_t0 < new_tp:
        raise ConfigError([("sampler.t0_index",
                            f"t0_index={new_t0} must be in [0, T_prime={new_tp}) "
                            f"(sampler.T_prime)")])
    return replace(cfg, sampler=replace(cfg.sampler, t0_index=new_t0, T_prime=new_tp))


def list_presets() -> list[str]:
    root = resources.files("diffstyle") / "presets"
    return sorted(p.name.removesuffix(".cfg") for p in root.iterdir()
                  if p.name.endswith(".cfg"))


def preset_text(name: str) -> str:
    root = resources.files("diffstyle") / "presets"
    candidate = root / f"{name}.cfg"
    if not candidate.is_file():
        raise ConfigError([("preset", f"unknown preset {name!r}; "
                            f"available: {list_presets()}")])
    return candidate.read_text()


def load_preset(name: str) -> RunConfig:
    return validate_config(preset_text(name))
