"""Pipeline configuration: a flat dataclass, loadable from YAML with
``key=value`` command-line overrides.

Every tunable of the five processing stages lives here exactly once, so a
config file fully determines a run.
"""

from dataclasses import asdict, dataclass, fields, replace

import yaml

from .errors import ConfigError


@dataclass
class PipelineConfig:
    # --- inputs / outputs ---------------------------------------------------
    source_path: str = ""
    target_path: str = ""
    cameras_path: str = ""
    source_image_paths: tuple = ()
    target_image_paths: tuple = ()
    source_features_path: str = ""     # precomputed point features, epoch 1
    target_features_path: str = ""     # precomputed point features, epoch 2
    observations_path: str = ""        # external displacement observations
    output_dir: str = "out"

    # --- tiling -------------------------------------------------------------
    max_points: int = 1_000_000        # source points per tile, upper bound
    overlap_margin: float = 10.0       # metres of target dilation per tile

    # --- hierarchical partitioning -------------------------------------------
    lambda_factors: tuple = (0.1, 0.5, 2.0)   # x mean feature variance
    min_patch: int = 10
    k_adj: int = 10                    # adjacency graph neighbours
    feature_k: int = 16                # covariance-feature neighbourhood

    # --- coarse matching ----------------------------------------------------
    feature_provider: str = "builtin"  # "builtin" | "import"
    voxel_factor: float = 2.0          # downsample voxel, x scan resolution
    use_images: bool = False           # enable the image channel
    top_k_images: int = 1
    ncc_stride: int = 8
    ncc_template_radius: int = 7
    ncc_search_window: int = 64
    min_conf: float = 0.5
    lift_radius_px: float = 2.0
    max_displacement: float = 10.0     # metres, plausibility gate
    min_support: int = 3               # support pairs needed to keep a match

    # --- refinement ---------------------------------------------------------
    delta1: float = 1.5                # metres, MADD acceptance threshold
    delta2: float = 0.1                # minimum passing pair fraction

    # --- fine matching ------------------------------------------------------
    icp_max_iter: int = 30
    icp_conv_tol: float = 1e-6
    icp_gate_factor: float = 5.0       # ICP pair gate, x scan resolution
    p2p_threshold_factor: float = 1.0  # point-pair gate, x scan resolution

    # --- evaluation ---------------------------------------------------------
    eval_radius: float = 15.0          # metres, mean-in-radius comparison
    coverage_voxel_factor: float = 4.0  # coverage voxel, x scan resolution

    # --- execution ----------------------------------------------------------
    n_workers: int = 1
    checkpoint_dir: str = ""           # resume coarse matches from here
    seed: int = 0

    def validate(self) -> None:
        if self.max_points < 1000:
            raise ConfigError(f"max_points must be >= 1000, got {self.max_points}")
        if self.overlap_margin < 0:
            raise ConfigError("overlap_margin must be >= 0")
        lf = tuple(self.lambda_factors)
        if len(lf) != 3 or not (0 < lf[0] < lf[1] < lf[2]):
            raise ConfigError(
                f"lambda_factors must be 3 increasing positive values, got {lf}")
        if self.min_patch < 1:
            raise ConfigError("min_patch must be >= 1")
        if self.feature_provider not in ("builtin", "import"):
            raise ConfigError(
                f"feature_provider must be builtin or import, got "
                f"{self.feature_provider!r}")
        if not 0.0 <= self.min_conf <= 1.0:
            raise ConfigError("min_conf must lie in [0, 1]")
        if self.delta1 <= 0:
            raise ConfigError("delta1 must be positive")
        if not 0.0 <= self.delta2 < 1.0:
            raise ConfigError("delta2 must lie in [0, 1)")
        if self.icp_max_iter < 1:
            raise ConfigError("icp_max_iter must be >= 1")
        for name in ("voxel_factor", "lift_radius_px", "max_displacement",
                     "icp_gate_factor", "p2p_threshold_factor", "eval_radius",
                     "coverage_voxel_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.top_k_images < 1:
            raise ConfigError("top_k_images must be >= 1")
        if self.min_support < 3:
            raise ConfigError("min_support must be >= 3 (rigid fit needs 3 pairs)")


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(name: str, value):
    """Cast a parsed YAML value to the declared field type."""
    default = _FIELDS[name].default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
    if isinstance(default, tuple) or _FIELDS[name].type == "tuple":
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(f"{name}: expected a list, got {value!r}")
    return str(value)


def config_from_mapping(mapping: dict) -> PipelineConfig:
    if not isinstance(mapping, dict):
        raise ConfigError(f"config root must be a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in mapping.items()}
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    """Parse a YAML config file; unknown keys are an error, not a warning."""
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_mapping(raw)


def apply_overrides(cfg: PipelineConfig, pairs) -> PipelineConfig:
    """Apply ``key=value`` strings (e.g. from ``--set``) on top of a config."""
    updates = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        updates[key] = _coerce(key, value)
    return replace(cfg, **updates)


def dump_config(path, cfg: PipelineConfig) -> None:
    data = asdict(cfg)
    for key, value in data.items():
        if isinstance(value, tuple):
            data[key] = list(value)
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
