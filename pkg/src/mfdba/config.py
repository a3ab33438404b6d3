"""INI-style dataset manifests and run configurations.

Both files are flat ``key = value`` text grouped in sections.  Values are
parsed against the type of the corresponding dataclass default, so every
field of the synthetic specs and pipeline configs can be set from a file or
overridden from the command line with ``section.key=value``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .factors import (Combined, ConfidenceProvider, Oracle, ResidualAdaptive, Scheduled,
                      Uniform)
from .geometry import CameraIntrinsics
from .solver import FactorSet, LmConfig
from .synth import NoiseSpec, SceneSpec, SyntheticWorld, TrajectorySpec, default_camera
from .system import MODES, PipelineConfig, WindowConfig

MANIFEST_NAME = "manifest.ini"
PROVIDERS = ("uniform", "oracle", "scheduled", "adaptive")


class ConfigError(ValueError):
    """Bad configuration or input; the CLI maps it to exit code 2."""


# ---------------------------------------------------------------------------
# value encoding


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(" ".join(format_value(x) for x in row) for row in v)
        return ", ".join(format_value(x) for x in v)
    return str(v)


def parse_value(text: str, like, key: str = "value"):
    """Parse ``text`` into the type of the example value ``like``."""
    s = text.strip()
    try:
        if isinstance(like, bool):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        if like is None:
            if s.lower() == "none":
                return None
            low = s.lower()
            if low in ("true", "false"):
                return low == "true"
            try:
                return int(s)
            except ValueError:
                return float(s)
        if isinstance(like, int):
            return int(s)
        if isinstance(like, float):
            return float(s)
        if isinstance(like, tuple):
            if not s:
                return ()
            if ";" in s or (like and isinstance(like[0], tuple)):
                return tuple(tuple(float(x) for x in row.split()) for row in s.split(";")
                             if row.strip())
            return tuple(float(x) for x in s.split(","))
        return s
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {s!r}: {exc}") from None


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.init}


def build(cls, values: dict, where: str, base=None):
    """Instantiate a dataclass from string values, checking keys."""
    defaults = _defaults(cls) if base is None else {
        f.name: getattr(base, f.name) for f in fields(cls) if f.init}
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    kw = {}
    for k, text in values.items():
        like = defaults[k]
        kw[k] = parse_value(text, like, f"{where}.{k}")
    try:
        return replace(base, **kw) if base is not None else cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def section(obj, skip=()) -> dict:
    return {f.name: format_value(getattr(obj, f.name)) for f in fields(obj)
            if f.init and f.name not in skip and _simple(getattr(obj, f.name))}


def _simple(v) -> bool:
    return v is None or isinstance(v, (bool, int, float, str, tuple))


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    return cp


def _read(path) -> configparser.ConfigParser:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise ConfigError(f"no such file: {p}")
    cp = _parser()
    try:
        cp.read_string(p.read_text(encoding="utf-8"), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return cp


def _dump(sections: dict) -> str:
    out = io.StringIO()
    for name, values in sections.items():
        out.write(f"[{name}]\n")
        for k, v in values.items():
            out.write(f"{k} = {v}\n")
        out.write("\n")
    return out.getvalue()


def apply_overrides(sections: dict, overrides) -> dict:
    """Merge ``section.key=value`` strings into a section dict (flags win)."""
    merged = {k: dict(v) for k, v in sections.items()}
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        merged.setdefault(sec, {})[key.strip()] = value.strip()
    return merged


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class DatasetSpec:
    """Everything needed to regenerate one synthetic sequence."""

    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    camera: CameraIntrinsics = field(default_factory=default_camera)
    stride: int = 8
    seed: int = 0

    def world(self) -> SyntheticWorld:
        return SyntheticWorld(self.trajectory, self.scene, self.noise, self.camera, self.stride)

    def with_seed(self, seed: int) -> "DatasetSpec":
        """Derive the component seeds from one master seed."""
        return replace(self, seed=seed, trajectory=replace(self.trajectory, seed=seed),
                       scene=replace(self.scene, seed=seed + 1),
                       noise=replace(self.noise, seed=seed + 2))

    def sections(self) -> dict:
        return {"dataset": {"seed": str(self.seed), "stride": str(self.stride)},
                "trajectory": section(self.trajectory, skip=("seed",)),
                "scene": section(self.scene, skip=("seed",)),
                "noise": section(self.noise, skip=("seed",)),
                "camera": section(self.camera)}

    def dumps(self) -> str:
        return _dump(self.sections())


_DATASET_SECTIONS = ("dataset", "trajectory", "scene", "noise", "camera")


def dataset_from_sections(secs: dict, seed: int | None = None) -> DatasetSpec:
    unknown = set(secs) - set(_DATASET_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    top = dict(secs.get("dataset", {}))
    bad = set(top) - {"seed", "stride"}
    if bad:
        raise ConfigError(f"[dataset] unknown keys: {', '.join(sorted(bad))}")
    master = parse_value(top.get("seed", "0"), 0, "dataset.seed") if seed is None else seed
    stride = parse_value(top.get("stride", "8"), 8, "dataset.stride")
    for name in ("trajectory", "scene", "noise"):
        if "seed" in secs.get(name, {}):
            raise ConfigError(f"[{name}] seed is derived from [dataset] seed")
    try:
        spec = DatasetSpec(build(TrajectorySpec, secs.get("trajectory", {}), "trajectory"),
                           build(SceneSpec, secs.get("scene", {}), "scene"),
                           build(NoiseSpec, secs.get("noise", {}), "noise"),
                           build(CameraIntrinsics, secs.get("camera", {}), "camera",
                                 base=default_camera()),
                           stride)
    except (TypeError, ValueError) as exc:     # generator-side validation
        raise ConfigError(f"invalid dataset spec: {exc}") from None
    if stride < 1:
        raise ConfigError("[dataset] stride must be >= 1")
    return spec.with_seed(master)


def load_dataset_spec(path, seed: int | None = None, overrides=()) -> DatasetSpec:
    """Read a dataset spec or manifest (a file, or a directory holding one)."""
    cp = _read(path)
    secs = {s: dict(cp[s]) for s in cp.sections()}
    return dataset_from_sections(apply_overrides(secs, overrides), seed)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    dataset: str = ""
    output: str = ""
    mode: str = "mono"
    reproj: bool = True
    featmetric: bool = False
    inertial: bool = False
    provider: str = "scheduled"
    outlier_oracle: bool = True       # take w^r from the generator's outlier mask
    provider_params: dict = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not (self.reproj or self.featmetric):
            raise ConfigError("at least one visual factor (reproj or featmetric) must be enabled")
        if self.provider not in PROVIDERS:
            raise ConfigError(f"provider must be one of {', '.join(PROVIDERS)}")
        make_provider(self.provider, self.provider_params, self.outlier_oracle)

    @property
    def factors(self) -> FactorSet:
        return FactorSet(self.reproj, self.featmetric, self.inertial)

    def pipeline_config(self) -> PipelineConfig:
        return replace(self.pipeline, mode=self.mode, factors=self.factors)

    def provider_instance(self) -> ConfidenceProvider:
        return make_provider(self.provider, self.provider_params, self.outlier_oracle)

    def sections(self) -> dict:
        p = self.pipeline
        run = {"dataset": self.dataset, "output": self.output, "mode": self.mode,
               "reproj": format_value(self.reproj), "featmetric": format_value(self.featmetric),
               "inertial": format_value(self.inertial), "provider": self.provider,
               "outlier_oracle": format_value(self.outlier_oracle)}
        return {"run": run, "provider": dict(self.provider_params),
                "pipeline": section(p, skip=("mode",)),
                "window": section(p.window), "lm": section(p.lm)}

    def dumps(self) -> str:
        return _dump(self.sections())


_PROVIDER_CLASSES = {"uniform": Uniform, "oracle": Oracle, "scheduled": Scheduled,
                     "adaptive": ResidualAdaptive}


def make_provider(name: str, params: dict, outlier_oracle: bool) -> ConfidenceProvider:
    cls = _PROVIDER_CLASSES.get(name)
    if cls is None:
        raise ConfigError(f"unknown provider {name!r}")
    allowed = {f.name for f in fields(cls) if f.init and f.name != "inlier_masks"}
    bad = set(params) - allowed
    if bad:
        raise ConfigError(f"[provider] {name} does not take: {', '.join(sorted(bad))}")
    prov = build(cls, dict(params), "provider")
    if outlier_oracle and name != "oracle":
        return Combined(Oracle(), prov, prov)
    return prov


_RUN_KEYS = {"dataset", "output", "mode", "reproj", "featmetric", "inertial", "provider",
             "outlier_oracle"}


def run_from_sections(secs: dict) -> RunConfig:
    unknown = set(secs) - {"run", "provider", "pipeline", "window", "lm"}
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    run = dict(secs.get("run", {}))
    bad = set(run) - _RUN_KEYS
    if bad:
        raise ConfigError(f"[run] unknown keys: {', '.join(sorted(bad))}")
    base = RunConfig()
    kw = {}
    for k, text in run.items():
        kw[k] = parse_value(text, getattr(base, k), f"run.{k}")
    window = build(WindowConfig, secs.get("window", {}), "window")
    lm = build(LmConfig, secs.get("lm", {}), "lm")
    pipe_vals = dict(secs.get("pipeline", {}))
    for k in ("mode", "factors", "window", "lm", "init_lm", "global_lm"):
        if k in pipe_vals:
            raise ConfigError(f"[pipeline] {k} is set elsewhere")
    try:
        pipeline = build(PipelineConfig, pipe_vals, "pipeline",
                         base=PipelineConfig(window=window, lm=lm))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(provider_params=dict(secs.get("provider", {})), pipeline=pipeline, **kw)
    cfg.validate()
    return cfg


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Read a run config file (optional) and apply ``section.key=value`` overrides."""
    secs = {}
    if path is not None:
        cp = _read(path)
        secs = {s: dict(cp[s]) for s in cp.sections()}
    return run_from_sections(apply_overrides(secs, overrides))


def manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p
