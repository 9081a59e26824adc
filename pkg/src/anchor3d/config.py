"""Toolkit configuration: a nested YAML file validated at load time.

Every error names the file and line of the offending key. Omitted keys take
the desk-scale defaults below; ``--set section.key=value`` overrides are
applied on top of the parsed file before validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any, Optional

import yaml

from .assignment import AssignmentConfig
from .geometry import AnchorSpec, ConfigError
from .inference import PipelineConfig
from .losses import LossParams
from .synthetic import DESK_ANCHORS, SyntheticSpec


@dataclass(frozen=True)
class PipelineSettings:
    """Pipeline settings with the size filter in cm^3, converted per voxel spacing."""

    patch_shape: tuple[int, int, int] = (64, 24, 64)
    per_patch_top_k: int = 3
    nms_iou_threshold: float = 0.1
    min_volume_cm3: float = 0.05
    max_volume_cm3: float = 30.0
    tile_min_slack: float = 0.05
    score_threshold: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_volume_cm3 < self.max_volume_cm3:
            raise ConfigError("need 0 <= min_volume_cm3 < max_volume_cm3")

    def resolve(self, voxel_spacing) -> PipelineConfig:
        mm3 = math.prod(voxel_spacing)
        return PipelineConfig(
            patch_shape=self.patch_shape,
            per_patch_top_k=self.per_patch_top_k,
            nms_iou_threshold=self.nms_iou_threshold,
            min_volume=self.min_volume_cm3 * 1000.0 / mm3,
            max_volume=self.max_volume_cm3 * 1000.0 / mm3,
            tile_min_slack=self.tile_min_slack,
            score_threshold=self.score_threshold,
        )


@dataclass(frozen=True)
class ToySettings:
    emb_dim: int = 64
    train_volumes: int = 30
    steps: int = 500
    learning_rate: float = 0.2
    volumes_per_step: int = 4
    classifier_steps: int = 300
    classifier_learning_rate: float = 0.5
    classifier_context: float = 1.5
    fusion_weight: float = 0.5
    pre_nms_top_n: int = 200

    def __post_init__(self):
        for name in ("emb_dim", "volumes_per_step", "pre_nms_top_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("train_volumes", "steps", "classifier_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("learning_rate", "classifier_learning_rate", "classifier_context"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise ConfigError("fusion_weight must lie in [0, 1]")


@dataclass(frozen=True)
class EvalSettings:
    hit_threshold: float = 0.0
    miss_as_zero: bool = False
    classification_threshold: float = 0.5
    size_bins_cm3: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 30.0)

    def __post_init__(self):
        object.__setattr__(self, "size_bins_cm3", tuple(float(e) for e in self.size_bins_cm3))
        e = self.size_bins_cm3
        if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
            raise ConfigError("size_bins_cm3 must be ascending with at least two entries")
        if not 0.0 <= self.hit_threshold < 1.0:
            raise ConfigError("hit_threshold must lie in [0, 1)")


@dataclass(frozen=True)
class Paths:
    dataset: Optional[str] = None
    model: Optional[str] = None
    detections: Optional[str] = None


@dataclass(frozen=True)
class ToolkitConfig:
    seed: int = 0
    anchors: AnchorSpec = DESK_ANCHORS
    assignment: AssignmentConfig = field(default_factory=AssignmentConfig)
    loss: LossParams = field(default_factory=LossParams)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    toy: ToySettings = field(default_factory=ToySettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    paths: Paths = field(default_factory=Paths)

    def pipeline_config(self) -> PipelineConfig:
        return self.pipeline.resolve(self.synthetic.voxel_spacing)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for f in fields(self):
            if f.name == "seed":
                continue
            section = getattr(self, f.name)
            hidden = _HIDDEN.get(f.name, set())
            out[f.name] = {g.name: _plain(getattr(section, g.name)) for g in fields(section)
                           if g.name not in hidden}
        return out


_SECTIONS = {
    "anchors": AnchorSpec,
    "assignment": AssignmentConfig,
    "loss": LossParams,
    "pipeline": PipelineSettings,
    "synthetic": SyntheticSpec,
    "toy": ToySettings,
    "evaluation": EvalSettings,
    "paths": Paths,
}
# synthetic.seed would shadow the top-level seed
_HIDDEN = {"synthetic": {"seed"}}
_VARIABLE_LENGTH = {"basic_sizes", "size_bins_cm3"}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _where(source: str, node) -> str:
    if node is None:
        return source
    if node.start_mark is None:
        return "command-line override"
    return f"{source}:{node.start_mark.line + 1}"


def _to_python(node):
    return yaml.safe_load(yaml.serialize(node))


def _coerce(name: str, value, template, where: str):
    """Check a value against the type of its default."""
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: {name} must be true or false, got {value!r}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {name} must be an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {name} must be a number, got {value!r}")
        return float(value)
    if isinstance(template, tuple):
        fixed = name.rsplit(".", 1)[-1] not in _VARIABLE_LENGTH
        if not isinstance(value, list) or (fixed and len(value) != len(template)):
            raise ConfigError(f"{where}: {name} must be a list of {len(template)} values, got {value!r}")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where}: {name} must contain only numbers, got {value!r}")
        return tuple(value)
    return value


def _build_section(name: str, cls, mapping_node, source: str):
    where_section = _where(source, mapping_node)
    if mapping_node is None:
        return cls() if cls is not AnchorSpec else DESK_ANCHORS
    if not isinstance(mapping_node, yaml.MappingNode):
        raise ConfigError(f"{where_section}: section {name!r} must be a mapping")
    defaults = DESK_ANCHORS if cls is AnchorSpec else cls()
    allowed = {f.name for f in fields(cls)} - _HIDDEN.get(name, set())
    kwargs, key_lines = {}, {}
    for key_node, value_node in mapping_node.value:
        key = key_node.value
        where = _where(source, key_node)
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {name}.{key} (expected one of {sorted(allowed)})")
        value = _to_python(value_node)
        template = getattr(defaults, key)
        if value is None and template is None:
            kwargs[key] = None
        elif template is None:
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(f"{name}.{key}", value, template, where)
        key_lines[key] = where
    try:
        merged = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        merged.update(kwargs)
        return cls(**merged)
    except (ConfigError, ValueError, TypeError) as exc:
        # point at the key the message names, else at the section
        msg = str(exc)
        where = next((w for k, w in key_lines.items() if k in msg), where_section)
        raise ConfigError(f"{where}: {name}: {msg}") from None


def _strip_marks(node) -> None:
    """Forget source positions so errors blame the override, not line 1."""
    node.start_mark = node.end_mark = None
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _strip_marks(k)
            _strip_marks(v)
    elif isinstance(node, yaml.SequenceNode):
        for v in node.value:
            _strip_marks(v)


def _apply_override(root: yaml.MappingNode, override: str) -> None:
    """Splice ``section.key=value`` into the composed document."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} must look like section.key=value")
    path, raw = override.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) not in (1, 2) or not all(parts):
        raise ConfigError(f"override {override!r}: key must be 'seed' or 'section.key'")
    value_node = yaml.compose(raw) or yaml.ScalarNode("tag:yaml.org,2002:null", "null")
    _strip_marks(value_node)
    node = root
    for depth, part in enumerate(parts):
        last = depth == len(parts) - 1
        for i, (k, v) in enumerate(node.value):
            if k.value == part:
                if last:
                    node.value[i] = (yaml.ScalarNode("tag:yaml.org,2002:str", part), value_node)
                else:
                    if not isinstance(v, yaml.MappingNode):
                        v = yaml.MappingNode("tag:yaml.org,2002:map", [])
                        node.value[i] = (k, v)
                    node = v
                break
        else:
            key = yaml.ScalarNode("tag:yaml.org,2002:str", part)
            if last:
                node.value.append((key, value_node))
            else:
                child = yaml.MappingNode("tag:yaml.org,2002:map", [])
                node.value.append((key, child))
                node = child


def parse_config(text: str, source: str = "<config>", overrides=()) -> ToolkitConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if root is None:
        root = yaml.MappingNode("tag:yaml.org,2002:map", [])
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{_where(source, root)}: top level must be a mapping")
    for ov in overrides:
        _apply_override(root, ov)

    sections: dict[str, Any] = {}
    seed = 0
    for key_node, value_node in root.value:
        key = key_node.value
        where = _where(source, key_node)
        if key == "seed":
            value = _to_python(value_node)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(f"{where}: seed must be a non-negative integer, got {value!r}")
            seed = value
        elif key in _SECTIONS:
            if key in sections:
                raise ConfigError(f"{where}: duplicate section {key!r}")
            sections[key] = value_node
        else:
            raise ConfigError(f"{where}: unknown section {key!r} (expected seed or one of {sorted(_SECTIONS)})")
    built = {name: _build_section(name, cls, sections.get(name), source) for name, cls in _SECTIONS.items()}
    return ToolkitConfig(seed=seed, **built)


def load_config(path: Optional[str] = None, overrides=()) -> ToolkitConfig:
    if path is None:
        return parse_config("", "<defaults>", overrides)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, str(path), overrides)


def dump_config(config: ToolkitConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
