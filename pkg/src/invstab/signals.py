"""Piecewise-constant ground truth, Gaussian operators, noisy measurements."""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from invstab import io
from invstab.errors import FormatError, ParameterError
from invstab.linops import LinearOperator

PRNG_NAME = "numpy.random.Generator(PCG64)"
PRNG_VERSION = np.__version__

# seed-stream tags keep signal/operator/noise draws independent for equal seeds
_STREAM_SIGNAL = 0x5167
_STREAM_OPERATOR = 0x0A0B
_STREAM_NOISE = 0x4E01


def rng_for(seed, stream=0):
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64([seed, stream]))


def prng_metadata():
    return {"prng": PRNG_NAME, "numpy": PRNG_VERSION}


def _freeze(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Signal:
    values: np.ndarray
    jumps: tuple  # ((index, height), ...) with height == values[index] - values[index - 1]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))

    @property
    def n(self):
        return self.values.shape[0]

    def total_variation(self):
        return total_variation(self.values)

    def jump_height_sum(self):
        return math.fsum(abs(h) for _, h in self.jumps)


def total_variation(values):
    """Sum of |values[i] - values[i-1]|, exactly rounded."""
    v = np.asarray(values, dtype=np.float64)
    return math.fsum(np.abs(np.diff(v)).tolist())


def _check_interval(name, interval):
    try:
        lo, hi = interval
    except (TypeError, ValueError):
        raise ParameterError(f"{name} must be a (low, high) pair, got {interval!r}") from None
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ParameterError(f"{name} must satisfy low <= high, got {interval!r}")
    return lo, hi


def generate_signal(n, jump_count_range=(1, 10), height_range=(-1.0, 1.0), seed=0,
                    baseline=0.0, normalize=None):
    """Piecewise-constant signal with a random number of jumps.

    The jump count is uniform on the closed integer interval
    ``jump_count_range``; jump positions are drawn without replacement from
    ``1..n-1``; heights are uniform on ``height_range`` (zero draws are
    redrawn). ``normalize``, when given, rescales so ``max |values|`` equals
    it. Recorded heights are the exact differences of the stored values.
    """
    if int(n) != n or n < 2:
        raise ParameterError(f"signal length must be >= 2, got {n}")
    n = int(n)
    kmin, kmax = _check_interval("jump_count_range", jump_count_range)
    if int(kmin) != kmin or int(kmax) != kmax or kmin < 0 or kmax > n - 1:
        raise ParameterError(f"jump_count_range must lie in [0, {n - 1}], got {jump_count_range!r}")
    hlo, hhi = _check_interval("height_range", height_range)
    if hlo == hhi == 0.0 and kmax > 0:
        raise ParameterError("height_range [0, 0] cannot produce jumps")
    if normalize is not None and not normalize > 0:
        raise ParameterError(f"normalize must be positive, got {normalize}")

    rng = rng_for(seed, _STREAM_SIGNAL)
    count = int(rng.integers(int(kmin), int(kmax) + 1))
    positions = np.sort(rng.choice(np.arange(1, n), size=count, replace=False))
    heights = rng.uniform(hlo, hhi, size=count)
    while np.any(heights == 0.0):
        zero = heights == 0.0
        heights[zero] = rng.uniform(hlo, hhi, size=int(zero.sum()))

    increments = np.zeros(n)
    increments[0] = baseline
    increments[positions] = heights
    values = np.cumsum(increments)
    if normalize is not None:
        peak = np.max(np.abs(values))
        if peak > 0:
            values = values * (normalize / peak)
    diffs = np.diff(values)
    idx = np.flatnonzero(diffs != 0.0) + 1
    jumps = tuple((int(i), float(values[i] - values[i - 1])) for i in idx)
    return Signal(values, jumps, int(seed))


def generate_operator(m, n, mean=0.0, variance=0.05, seed=0):
    """m x n matrix with i.i.d. N(mean, variance) entries."""
    if int(m) != m or int(n) != n or m < 1 or n < 1:
        raise ParameterError(f"operator dimensions must be positive, got {m} x {n}")
    if not variance > 0 or not math.isfinite(variance):
        raise ParameterError(f"variance must be positive, got {variance}")
    rng = rng_for(seed, _STREAM_OPERATOR)
    entries = mean + math.sqrt(variance) * rng.standard_normal((int(m), int(n)))
    generation = {
        "distribution": "gaussian",
        "mean": float(mean),
        "variance": float(variance),
        "seed": int(seed),
        **prng_metadata(),
    }
    return LinearOperator(entries, generation)


@dataclass(frozen=True)
class Measurement:
    values: np.ndarray
    noise: np.ndarray
    clean: np.ndarray
    provenance: dict

    def __post_init__(self):
        for name in ("values", "noise", "clean"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))


def measure(A, u, noise_std=0.03, seed=0):
    """``f = A u + n`` with ``n ~ N(0, noise_std^2 I)`` in measurement space.

    The stored ``noise`` is ``values - clean`` so that identity holds exactly
    in floating point.
    """
    u_values = np.asarray(getattr(u, "values", u), dtype=np.float64)
    if u_values.shape != (A.cols,):
        raise ParameterError(f"signal length {u_values.shape} does not match operator columns {A.cols}")
    if not noise_std >= 0 or not math.isfinite(noise_std):
        raise ParameterError(f"noise_std must be nonnegative, got {noise_std}")
    clean = A.entries @ u_values
    if noise_std == 0:
        values = clean.copy()
    else:
        rng = rng_for(seed, _STREAM_NOISE)
        values = clean + noise_std * rng.standard_normal(A.rows)
    noise = values - clean
    provenance = {
        "signal_seed": getattr(u, "seed", None),
        "operator_seed": A.generation.get("seed"),
        "noise_seed": int(seed),
        "noise_std": float(noise_std),
    }
    return Measurement(values, noise, clean, provenance)


def expected_noise_norms(m, noise_std):
    """(E||n||, E||n||^2) for n ~ N(0, noise_std^2 I_m)."""
    mean_sq = m * noise_std**2
    mean_norm = noise_std * math.sqrt(2.0) * math.exp(math.lgamma((m + 1) / 2) - math.lgamma(m / 2))
    return mean_norm, mean_sq


@dataclass
class Dataset:
    """A set of instances sharing one operator."""

    operator: LinearOperator
    signals: list
    measurements: list
    params: dict

    def __len__(self):
        return len(self.signals)

    def pairs(self):
        return list(zip(self.signals, self.measurements))


def make_dataset(operator, count, n, first_seed=0, noise_std=0.03,
                 jump_count_range=(1, 10), height_range=(-1.0, 1.0), normalize=None):
    """``count`` instances with signal/noise seeds ``first_seed + i``."""
    if count < 0:
        raise ParameterError(f"count must be nonnegative, got {count}")
    signals, measurements = [], []
    for i in range(int(count)):
        seed = int(first_seed) + i
        s = generate_signal(n, jump_count_range, height_range, seed, normalize=normalize)
        signals.append(s)
        measurements.append(measure(operator, s, noise_std, seed))
    params = {
        "n": int(n),
        "m": operator.rows,
        "count": int(count),
        "first_seed": int(first_seed),
        "noise_std": float(noise_std),
        "jump_count_range": list(jump_count_range),
        "height_range": list(height_range),
        "normalize": normalize,
    }
    return Dataset(operator, signals, measurements, params)


def save_dataset(dataset, directory, csv=False):
    """Write manifest.json plus stacked INVR arrays (one row per instance)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    A = dataset.operator
    io.write_array(directory / "operator.invr", A.entries)
    arrays = {
        "signals": [s.values for s in dataset.signals],
        "measurements": [f.values for f in dataset.measurements],
        "clean": [f.clean for f in dataset.measurements],
        "noise": [f.noise for f in dataset.measurements],
    }
    n, m = A.cols, A.rows
    widths = {"signals": n, "measurements": m, "clean": m, "noise": m}
    for name, rows in arrays.items():
        stacked = np.array(rows) if rows else np.zeros((0, widths[name]))
        io.write_array(directory / f"{name}.invr", stacked)
        if csv:
            io.write_vectors_csv(directory / f"{name}.csv", rows)
    manifest = {
        "format_version": io.FORMAT_VERSION,
        "n": n,
        "m": m,
        "operator": A.generation,
        "dataset": dataset.params,
        "seeds": [
            {"signal": s.seed, **{k: v for k, v in f.provenance.items() if k.endswith("seed")}}
            for s, f in zip(dataset.signals, dataset.measurements)
        ],
        "jumps": [[list(j) for j in s.jumps] for s in dataset.signals],
        "files": sorted(f"{name}.invr" for name in arrays) + ["operator.invr"],
    }
    io.dump_json(directory / "manifest.json", manifest)
    return directory


def load_dataset(directory):
    directory = Path(directory)
    manifest = io.load_json(directory / "manifest.json")
    if manifest.get("format_version") != io.FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format {manifest.get('format_version')}")
    A = LinearOperator(io.read_array(directory / "operator.invr"), manifest["operator"])
    sig = io.read_array(directory / "signals.invr")
    meas = io.read_array(directory / "measurements.invr")
    clean = io.read_array(directory / "clean.invr")
    noise = io.read_array(directory / "noise.invr")
    signals, measurements = [], []
    for i, seeds in enumerate(manifest["seeds"]):
        jumps = tuple((int(a), float(b)) for a, b in manifest["jumps"][i])
        signals.append(Signal(sig[i], jumps, seeds["signal"]))
        prov = {
            "signal_seed": seeds["signal"],
            "operator_seed": seeds.get("operator_seed"),
            "noise_seed": seeds.get("noise_seed"),
            "noise_std": manifest["dataset"].get("noise_std"),
        }
        measurements.append(Measurement(meas[i], noise[i], clean[i], prov))
    return Dataset(A, signals, measurements, manifest["dataset"])
