"""
Run configuration: one dataclass per pipeline concern, loaded from JSON
(or from a previous stage's manifest) and overridden by CLI flags.
"""

import logging
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import artifacts
from baselines import GwrConfig
from errors import InputFileNotFound, InvalidConfig, MissingSeed
from neuralnet import ARCHITECTURES, ModelSpec, TrainConfig
from node_encodings import EncodingSettings, parse_encoding_combo
from spatial_cv import (ABLATION_DEPTHS, ABLATION_ENCODINGS, ABLATION_HOPS, ABLATION_KNN_K, BUFFER_ROLES,
                        DEFAULT_LOOCV_GROUPS, SCHEMES, SearchSpace)
from synth import SynthConfig

logger = logging.getLogger(__name__)

BASELINE_MODELS = ('ols', 'slm', 'gwr', 'external')


@dataclass
class PathsConfig:
    regions: Optional[str] = None
    features: Optional[str] = None
    targets: Optional[str] = None
    fixed_controls: Optional[str] = None
    location_embeddings: Optional[str] = None
    edges: Optional[str] = None
    node_features: Optional[str] = None
    model: Optional[str] = None
    external_predictions: Optional[str] = None


@dataclass
class GraphConfig:
    base: str = 'contiguity'
    k: int = 8
    hops: int = 2

    def __post_init__(self):
        if self.base not in ('contiguity', 'knn'):
            raise InvalidConfig(f"Unknown base graph {self.base!r} (expected contiguity or knn)")
        if self.k < 1 or self.hops < 1:
            raise InvalidConfig("Graph k and hops must be at least 1")


@dataclass
class EncodingConfig:
    """Encoding combination plus the settings every encoding kind reads"""
    combo: str = 'random_walk+location'
    spectral_dim: int = 8
    rw_steps: int = 1
    smooth_lambda: float = 1.0
    pca_dim: int = 8
    frequencies: int = 4

    def __post_init__(self):
        parse_encoding_combo(self.combo)
        if min(self.spectral_dim, self.rw_steps, self.pca_dim, self.frequencies) < 1:
            raise InvalidConfig("Encoding dimensions, steps and frequencies must be positive")

    def settings(self, location_path: Optional[str] = None) -> EncodingSettings:
        return EncodingSettings(spectral_dim=self.spectral_dim, rw_steps=self.rw_steps,
                                smooth_lambda=self.smooth_lambda, location_path=location_path,
                                pca_dim=self.pca_dim, frequencies=self.frequencies)


@dataclass
class PreprocessConfig:
    outcome: str = 'outcome'
    vif_threshold_free: float = 1000.0
    vif_threshold_fixed: float = 1500.0

    def __post_init__(self):
        if self.vif_threshold_free <= 1 or self.vif_threshold_fixed <= 1:
            raise InvalidConfig("VIF thresholds must exceed 1")


@dataclass
class CvConfig:
    scheme: str = 'tenfold'
    hops: Optional[int] = None
    buffer_role: str = 'train'
    search_rounds: int = 0
    groups: List[str] = field(default_factory=lambda: list(DEFAULT_LOOCV_GROUPS))

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidConfig(f"Unknown CV scheme {self.scheme!r} (expected one of {SCHEMES})")
        if self.buffer_role not in BUFFER_ROLES:
            raise InvalidConfig(f"Unknown buffer role {self.buffer_role!r} (expected one of {BUFFER_ROLES})")
        if self.hops is not None and self.hops < 0:
            raise InvalidConfig("Buffer hops must be non-negative")
        if self.search_rounds < 0:
            raise InvalidConfig("search_rounds must be non-negative")
        self.groups = [str(g) for g in self.groups]


@dataclass
class AblationConfig:
    architectures: List[str] = field(default_factory=lambda: list(ARCHITECTURES))
    graph_hops: List[int] = field(default_factory=lambda: list(ABLATION_HOPS))
    # None drops the k-NN graph from the spatial representation axis
    knn_k: Optional[int] = ABLATION_KNN_K
    depths: List[int] = field(default_factory=lambda: list(ABLATION_DEPTHS))
    encodings: List[str] = field(default_factory=lambda: list(ABLATION_ENCODINGS))
    budget: int = 0

    def __post_init__(self):
        if not (self.architectures and self.graph_hops and self.depths and self.encodings):
            raise InvalidConfig("Every ablation axis needs at least one option")
        if min(self.graph_hops) < 1 or min(self.depths) < 1:
            raise InvalidConfig("Ablation hops and depths must be at least 1")
        if self.knn_k is not None and self.knn_k < 1:
            raise InvalidConfig(f"Ablation knn_k must be at least 1, got {self.knn_k}")
        for combo in self.encodings:
            parse_encoding_combo(combo)


@dataclass
class BaselineConfig:
    models: List[str] = field(default_factory=lambda: ['ols', 'slm', 'gwr'])
    gwr: GwrConfig = field(default_factory=GwrConfig)

    def __post_init__(self):
        unknown = [m for m in self.models if m not in BASELINE_MODELS]
        if unknown:
            raise InvalidConfig(f"Unknown baselines {unknown} (expected some of {BASELINE_MODELS})")


@dataclass
class ExplainConfig:
    variance_target: float = 0.80

    def __post_init__(self):
        if not 0.0 < self.variance_target <= 1.0:
            raise InvalidConfig(f"variance_target must lie in (0, 1], got {self.variance_target}")


SECTIONS = {
    'paths': PathsConfig,
    'graph': GraphConfig,
    'encodings': EncodingConfig,
    'preprocess': PreprocessConfig,
    'model': ModelSpec,
    'train': TrainConfig,
    'cv': CvConfig,
    'search': SearchSpace,
    'ablation': AblationConfig,
    'baselines': BaselineConfig,
    'explain': ExplainConfig,
    'synth': SynthConfig,
}

SCALARS = ('seed', 'jobs', 'out')


def _build(cls, data: Any, label: str):
    """Instantiate a config dataclass from a mapping, recursing into nested dataclass fields"""
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise InvalidConfig(f"Config section {label!r} must be an object")
    known = {item.name: item for item in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise InvalidConfig(f"Unknown keys in {label!r}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        default_factory = known[name].default_factory
        if default_factory is not MISSING and is_dataclass(default_factory) and isinstance(value, Mapping):
            value = _build(default_factory, value, f"{label}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise InvalidConfig(f"Bad value in {label!r}: {e}")


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    encodings: EncodingConfig = field(default_factory=EncodingConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    search: SearchSpace = field(default_factory=SearchSpace)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: Optional[int] = None
    jobs: int = 1
    out: str = 'out'

    def __post_init__(self):
        if self.jobs < 1:
            raise InvalidConfig(f"jobs must be at least 1, got {self.jobs}")
        if self.seed is not None:
            self.seed = int(self.seed)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RunConfig':
        if 'command' in data and 'config' in data:
            data = data['config']
        unknown = sorted(set(data) - set(SECTIONS) - set(SCALARS))
        if unknown:
            raise InvalidConfig(f"Unknown config keys: {unknown}")
        kwargs = {name: _build(section, data.get(name), name) for name, section in SECTIONS.items()}
        kwargs.update({name: data[name] for name in SCALARS if name in data})
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> 'RunConfig':
        """Load a JSON config file, or the config recorded in a stage manifest"""
        path = Path(path)
        if not path.exists():
            raise InputFileNotFound(path)
        try:
            data = artifacts.read_json(path)
        except ValueError as e:
            raise InvalidConfig(f"{path} is not valid JSON: {e}", path=str(path))
        logger.info(f"Loaded run config from {path}")
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return artifacts.to_jsonable(asdict(self))

    def merge(self, overrides: Mapping[str, Any]) -> 'RunConfig':
        """New config with dotted-key overrides applied, e.g. {'cv.scheme': 'loocv'}"""
        data = self.to_dict()
        for key, value in overrides.items():
            target = data
            *parents, leaf = key.split('.')
            for part in parents:
                if not isinstance(target.get(part), dict):
                    raise InvalidConfig(f"Unknown config section in override {key!r}")
                target = target[part]
            if leaf not in target:
                raise InvalidConfig(f"Unknown config key {key!r}")
            target[leaf] = value
        return RunConfig.from_dict(data)

    def require_seed(self) -> int:
        if self.seed is None:
            raise MissingSeed()
        return self.seed

    def validate_paths(self, *names: str):
        """Every named path must be set and exist"""
        for name in names:
            value = getattr(self.paths, name)
            if value is None:
                raise InvalidConfig(f"paths.{name} is required for this command (use --{name.replace('_', '-')})")
            if not Path(value).exists():
                raise InputFileNotFound(value)
