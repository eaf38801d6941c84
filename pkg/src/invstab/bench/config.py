"""Benchmark configuration: YAML file parsed into validated dataclasses.

Every field has a default, so an empty file (or no file) describes the
default protocol: n=1024, m=512 Gaussian operator with variance 0.05,
noise std 0.03, 8192 training pairs, 100 test instances and eps = 0.2.
"""

import copy
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from invstab.attacks import AttackConfig
from invstab.errors import ParameterError
from invstab.solvers import SOLVER_IDS, SolverParams

TUNED = "tuned"
_SEED_STRIDE = 10**9


@dataclass
class OperatorSpec:
    mean: float = 0.0
    variance: float = 0.05


@dataclass
class SignalSpec:
    jump_count_range: tuple = (1, 10)
    height_range: tuple = (-1.0, 1.0)


@dataclass
class DatasetSizes:
    train: int = 8192
    validation: int = 16
    test: int = 100


@dataclass
class Seeds:
    """Seed record. The effective seed of each stream is ``base * 1e9 + stream``."""

    base: int = 0
    operator: int = 1
    test: int = 0
    validation: int = 10_000_000
    train: int = 20_000_000
    attack: int = 0
    perturbation: int = 0

    def effective(self, name):
        return int(self.base) * _SEED_STRIDE + int(getattr(self, name))


@dataclass
class SolverSpec:
    label: str
    id: str
    params: dict = field(default_factory=dict)
    ridge: float = 1e-3  # learned-linear only

    def alpha_is_tuned(self):
        return self.params.get("alpha") == TUNED

    def solver_params(self, tuned_alpha=None):
        params = dict(self.params)
        if params.get("alpha") == TUNED:
            if tuned_alpha is None:
                raise ParameterError(f"solver {self.label!r} uses the tuned alpha but no grid search ran")
            params["alpha"] = tuned_alpha
        known = {f.name for f in fields(SolverParams)}
        unknown = set(params) - known
        if unknown:
            raise ParameterError(f"solver {self.label!r}: unknown parameters {sorted(unknown)}")
        return SolverParams(**params).validate()


@dataclass
class GridSpec:
    solver: str = "tv-admm"
    low: float = 1e-4
    high: float = 1e2
    points: int = 20

    def values(self):
        import numpy as np

        return [float(x) for x in np.logspace(math.log10(self.low), math.log10(self.high), int(self.points))]


@dataclass
class CrossSpec:
    """Evaluate a quadratic regularizer's bound quantities on another solver's pairs."""

    solver: str = "TV"
    regularizer: str = "tikhonov"
    alpha: float = 1e2


@dataclass
class StabilitySpec:
    abs_tol: float = 1e-6
    rel_tol: float = 1e-8
    cross: list = field(default_factory=lambda: [CrossSpec()])


@dataclass
class AttackSpec:
    method: str = "fgsm"
    config: AttackConfig = field(default_factory=AttackConfig)


def default_solvers():
    return [
        SolverSpec("Tikhonov (alpha=1e-7)", "tikhonov", {"alpha": 1e-7}),
        SolverSpec("Tikhonov (alpha=1e2)", "tikhonov", {"alpha": 1e2}),
        SolverSpec("TV", "tv-admm", {"alpha": TUNED}),
        SolverSpec("PnP-TV", "pnp-pgd", {"alpha": TUNED, "denoiser": "tv"}),
        SolverSpec("Learned linear", "learned-linear", {}),
    ]


@dataclass
class BenchConfig:
    n: int = 1024
    m: int = 512
    operator: OperatorSpec = field(default_factory=OperatorSpec)
    noise_std: float = 0.03
    signal: SignalSpec = field(default_factory=SignalSpec)
    datasets: DatasetSizes = field(default_factory=DatasetSizes)
    seeds: Seeds = field(default_factory=Seeds)
    solvers: list = field(default_factory=default_solvers)
    grid: GridSpec = field(default_factory=GridSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    stability: StabilitySpec = field(default_factory=StabilitySpec)
    output: str = "bench-out"
    formats: tuple = ("csv", "json")
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)

    def validate(self):
        if self.n < 2 or self.m < 1:
            raise ParameterError(f"need n >= 2 and m >= 1, got n={self.n}, m={self.m}")
        if not self.operator.variance > 0:
            raise ParameterError(f"operator variance must be positive, got {self.operator.variance}")
        if not self.noise_std >= 0:
            raise ParameterError(f"noise_std must be nonnegative, got {self.noise_std}")
        sizes = self.datasets
        if sizes.test < 1:
            raise ParameterError("the benchmark needs at least one test instance")
        if sizes.train < 0 or sizes.validation < 0:
            raise ParameterError("dataset sizes must be nonnegative")
        if not self.solvers:
            raise ParameterError("solver list is empty")
        labels = [s.label for s in self.solvers]
        if len(set(labels)) != len(labels):
            raise ParameterError(f"duplicate solver labels in {labels}")
        tuned = False
        for spec in self.solvers:
            if spec.id not in SOLVER_IDS:
                raise ParameterError(f"solver {spec.label!r}: unknown id {spec.id!r}; expected one of {SOLVER_IDS}")
            if spec.id == "learned-linear":
                if sizes.train < 1:
                    raise ParameterError("learned-linear solver needs training data")
                if not spec.ridge >= 0:
                    raise ParameterError("learned-linear ridge must be nonnegative")
            if spec.alpha_is_tuned():
                tuned = True
                spec.solver_params(tuned_alpha=1.0)
            else:
                spec.solver_params()
        if tuned:
            if self.grid.solver not in SOLVER_IDS:
                raise ParameterError(f"grid-search solver {self.grid.solver!r} is unknown")
            if self.grid.points < 1 or not (0 < self.grid.low <= self.grid.high):
                raise ParameterError("grid needs points >= 1 and 0 < low <= high")
            if sizes.validation < 1:
                raise ParameterError("tuning alpha needs at least one validation instance")
        if self.attack.method not in ("fgsm", "pgd"):
            raise ParameterError(f"attack method must be 'fgsm' or 'pgd', got {self.attack.method!r}")
        self.attack.config.validate()
        for cross in self.stability.cross:
            if cross.solver not in labels:
                raise ParameterError(f"cross-regularizer check names unknown solver {cross.solver!r}")
            if cross.regularizer != "tikhonov" or not cross.alpha > 0:
                raise ParameterError("cross-regularizer checks support tikhonov with alpha > 0")
        bad = set(self.formats) - {"csv", "json"}
        if bad or not self.formats:
            raise ParameterError(f"formats must be a nonempty subset of csv, json; got {list(self.formats)}")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ParameterError(f"workers must be a positive integer, got {self.workers}")
        return self

    def to_dict(self):
        out = asdict(self)
        # execution details; results do not depend on them
        out.pop("workers")
        out.pop("output")
        return out


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ParameterError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ParameterError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _convert(cls, key, value, f"{where}.{key}")
    return cls(**kwargs)


_NESTED = {
    (BenchConfig, "operator"): OperatorSpec,
    (BenchConfig, "signal"): SignalSpec,
    (BenchConfig, "datasets"): DatasetSizes,
    (BenchConfig, "seeds"): Seeds,
    (BenchConfig, "grid"): GridSpec,
    (BenchConfig, "attack"): AttackSpec,
    (BenchConfig, "stability"): StabilitySpec,
    (AttackSpec, "config"): AttackConfig,
}


def _convert(cls, key, value, where):
    nested = _NESTED.get((cls, key))
    if nested is not None:
        return _build(nested, value, where)
    if cls is BenchConfig and key == "solvers":
        if not isinstance(value, list):
            raise ParameterError(f"{where}: expected a list")
        return [_build(SolverSpec, item, f"{where}[{i}]") for i, item in enumerate(value)]
    if cls is StabilitySpec and key == "cross":
        if not isinstance(value, list):
            raise ParameterError(f"{where}: expected a list")
        return [_build(CrossSpec, item, f"{where}[{i}]") for i, item in enumerate(value)]
    if key in ("jump_count_range", "height_range", "formats"):
        return tuple(value)
    return value


def config_from_dict(data):
    try:
        return _build(BenchConfig, data or {}, "config").validate()
    except TypeError as exc:
        raise ParameterError(f"config: {exc}") from None


def load_config(path=None):
    """Read a YAML config; ``None`` gives the defaults."""
    if path is None:
        return BenchConfig().validate()
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParameterError(f"{path}: not valid YAML ({exc})") from None
    return config_from_dict(data)


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_config(config, path=None):
    text = yaml.safe_dump(_plain(config), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def replace(config, **changes):
    """Deep copy of ``config`` with top-level fields replaced."""
    new = copy.deepcopy(config)
    for key, value in changes.items():
        setattr(new, key, value)
    return new
