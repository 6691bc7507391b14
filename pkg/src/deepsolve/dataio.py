"""Load-scenario sampling, scaling-factor codec, dataset build and persistence.

The learned model works in scaling-factor space: every independent variable
x with box bounds maps to s in [0,1] via x = s*(x_max - x_min) + x_min.
Datasets pair sampled load vectors with the reference solver's encoded
independent variables, persisted as a JSON header line plus comma-separated
records at 17 significant digits (lossless for 64-bit floats).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netmodel import NetworkCase, build_admittance
from .opfref import solve_opf
from .powerflow import PfInit

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
MAX_DROP_FRACTION = 0.05


class DataError(Exception):
    pass


class CodecError(DataError):
    def __init__(self, var_id, message):
        self.var_id = var_id
        super().__init__(f"{var_id}: {message}")


@dataclass(frozen=True)
class ScalingEntry:
    var_id: str
    x_min: float
    x_max: float


@dataclass(frozen=True)
class ScalingSpec:
    """Ordered bounds for the model output: slack |V| then (P, |V|) per PV bus."""

    entries: tuple[ScalingEntry, ...]

    @property
    def dimension(self):
        return len(self.entries)

    @property
    def x_min(self):
        return np.array([e.x_min for e in self.entries])

    @property
    def x_max(self):
        return np.array([e.x_max for e in self.entries])

    @classmethod
    def from_case(cls, case: NetworkCase) -> "ScalingSpec":
        gen_at = case.gen_lookup()
        slack_bus = case.buses[case.slack_index]
        entries = [ScalingEntry(f"vm:{slack_bus.id}", slack_bus.v_min, slack_bus.v_max)]
        for i in case.pv_indices:
            bus = case.buses[i]
            gen = case.generators[gen_at[i]]
            entries.append(ScalingEntry(f"pg:{bus.id}", gen.p_min, gen.p_max))
            entries.append(ScalingEntry(f"vm:{bus.id}", bus.v_min, bus.v_max))
        for e in entries:
            if e.x_min > e.x_max:
                raise DataError(f"{e.var_id}: inverted bounds")
        return cls(entries=tuple(entries))


def encode(spec: ScalingSpec, x: np.ndarray) -> np.ndarray:
    """Physical values -> scaling factors in [0, 1]^d."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dimension,):
        raise DataError(f"expected {spec.dimension} values, got {x.shape}")
    s = np.empty_like(x)
    for k, e in enumerate(spec.entries):
        width = e.x_max - e.x_min
        if width == 0.0:
            if x[k] != e.x_min:
                raise CodecError(e.var_id, f"{x[k]!r} outside fixed value {e.x_min!r}")
            s[k] = 0.5
            continue
        if not (e.x_min <= x[k] <= e.x_max):
            raise CodecError(e.var_id, f"{x[k]!r} outside [{e.x_min!r}, {e.x_max!r}]")
        s[k] = (x[k] - e.x_min) / width
    return s


def decode(spec: ScalingSpec, s: np.ndarray) -> np.ndarray:
    """Scaling factors -> physical values, x = s*(x_max - x_min) + x_min."""
    s = np.asarray(s, dtype=float)
    if s.shape != (spec.dimension,):
        raise DataError(f"expected {spec.dimension} values, got {s.shape}")
    bad = np.flatnonzero((s < 0.0) | (s > 1.0))
    if bad.size:
        k = int(bad[0])
        raise CodecError(spec.entries[k].var_id, f"scaling factor {s[k]!r} outside [0, 1]")
    return s * (spec.x_max - spec.x_min) + spec.x_min


@dataclass
class Normalizer:
    """Per-dimension standardization; zero-variance dimensions pass through."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, loads: np.ndarray) -> "Normalizer":
        loads = np.asarray(loads, dtype=float)
        mean = loads.mean(axis=0)
        std = loads.std(axis=0)
        passthrough = std == 0.0
        mean = np.where(passthrough, 0.0, mean)
        std = np.where(passthrough, 1.0, std)
        return cls(mean=mean, std=std)

    def transform(self, loads):
        return (np.asarray(loads, dtype=float) - self.mean) / self.std

    def inverse(self, normalized):
        return np.asarray(normalized, dtype=float) * self.std + self.mean


@dataclass
class TrainSample:
    loads: np.ndarray  # length 2N, P then Q, p.u.
    s_true: np.ndarray  # length d, in [0, 1]
    objective_true: float  # $/hr
    dependent_true: np.ndarray  # angles at non-slack buses ++ |V| at PQ buses


@dataclass
class Dataset:
    case_id: str
    spec: ScalingSpec
    normalizer: Normalizer
    samples: list[TrainSample]
    split: str
    seed: int
    load_range: tuple[float, float]
    dependent_mean: np.ndarray

    def __len__(self):
        return len(self.samples)

    @property
    def loads_matrix(self):
        return np.array([s.loads for s in self.samples])

    @property
    def s_matrix(self):
        return np.array([s.s_true for s in self.samples])

    @property
    def objectives(self):
        return np.array([s.objective_true for s in self.samples])


def sample_loads(case: NetworkCase, load_range, count, seed) -> np.ndarray:
    """Multiplicative uniform load scenarios, (count, 2N).

    Every bus's P and Q are scaled by independent uniform draws from
    [lo, hi]; zero default loads stay zero.
    """
    lo, hi = load_range
    if not (0 < lo <= hi):
        raise DataError(f"bad load range [{lo}, {hi}]")
    base = np.concatenate([case.default_p_load, case.default_q_load])
    rng = np.random.default_rng(seed)
    factors = rng.uniform(lo, hi, size=(count, base.size))
    return factors * base[None, :]


def dependent_vector(case: NetworkCase, v_mag, v_ang) -> np.ndarray:
    """Dependent-state vector driving the Newton initial point: angles at
    non-slack buses followed by |V| at PQ buses, in bus order."""
    nonslack = np.concatenate([case.pv_indices, case.pq_indices])
    nonslack.sort()
    return np.concatenate([np.asarray(v_ang)[nonslack], np.asarray(v_mag)[case.pq_indices]])


def pf_init_from_dependent(case: NetworkCase, dep: np.ndarray) -> PfInit:
    """Turn a (mean) dependent-state vector back into a full initial guess."""
    nonslack = np.concatenate([case.pv_indices, case.pq_indices])
    nonslack.sort()
    n_ns = nonslack.size
    v_ang = np.zeros(case.n_bus)
    v_ang[nonslack] = dep[:n_ns]
    v_mag = np.ones(case.n_bus)
    v_mag[case.pq_indices] = dep[n_ns:]
    return PfInit(v_ang=v_ang, v_mag=v_mag)


def independent_values(case: NetworkCase, v_mag, p_gen) -> np.ndarray:
    """Physical independent variables in ScalingSpec order from a solution
    (bus voltage magnitudes plus the per-generator dispatch)."""
    gen_at = case.gen_lookup()
    vals = [v_mag[case.slack_index]]
    for i in case.pv_indices:
        vals.append(p_gen[gen_at[i]])
        vals.append(v_mag[i])
    return np.array(vals)


_WORKER: dict = {}


def _init_worker(case):
    _WORKER["case"] = case
    _WORKER["adm"] = build_admittance(case)


def _label_worker(loads):
    sol = solve_opf(_WORKER["case"], loads=loads, adm=_WORKER["adm"])
    return (
        sol.converged,
        sol.objective,
        sol.v_mag,
        sol.v_ang,
        sol.p_gen,
        sol.q_gen,
    )


def build_dataset(
    case: NetworkCase,
    count_train: int,
    count_test: int,
    seed: int,
    load_range=(0.9, 1.1),
    workers: int = 1,
) -> tuple[Dataset, Dataset]:
    """Sample loads, label them with the reference solver, split and package.

    Non-converged reference solves are dropped (and logged); a drop rate
    above MAX_DROP_FRACTION aborts.  The normalizer and the Newton-init
    dependent-variable means are fitted on the training split only.
    """
    spec = ScalingSpec.from_case(case)
    total = count_train + count_test
    all_loads = sample_loads(case, load_range, total, seed)

    if workers > 1 and total > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(case,)
        ) as pool:
            labels = list(pool.map(_label_worker, all_loads, chunksize=8))
    else:
        _init_worker(case)
        labels = [_label_worker(ld) for ld in all_loads]

    def collect(indices, split):
        samples = []
        dropped = 0
        for idx in indices:
            converged, objective, v_mag, v_ang, p_gen, q_gen = labels[idx]
            if not converged:
                dropped += 1
                log.warning("dropping sample %d: reference solve did not converge", idx)
                continue
            x = independent_values(case, v_mag, p_gen)
            # interior-point outputs are strictly inside the box; the clip
            # only absorbs duplicate-representation rounding
            x = np.clip(x, spec.x_min, spec.x_max)
            samples.append(
                TrainSample(
                    loads=all_loads[idx],
                    s_true=encode(spec, x),
                    objective_true=float(objective),
                    dependent_true=dependent_vector(case, v_mag, v_ang),
                )
            )
        if indices.size and dropped > MAX_DROP_FRACTION * indices.size:
            raise DataError(
                f"{split}: {dropped}/{indices.size} reference solves failed, "
                "check the case data or load range"
            )
        return samples

    train_samples = collect(np.arange(count_train), "train")
    test_samples = collect(np.arange(count_train, total), "test")

    if train_samples:
        normalizer = Normalizer.fit(np.array([s.loads for s in train_samples]))
        dep_mean = np.mean([s.dependent_true for s in train_samples], axis=0)
    else:
        n = case.n_bus
        normalizer = Normalizer(mean=np.zeros(2 * n), std=np.ones(2 * n))
        dep_mean = np.zeros(case.n_bus - 1 + len(case.pq_indices))

    def make(samples, split):
        return Dataset(
            case_id=case.name,
            spec=spec,
            normalizer=normalizer,
            samples=samples,
            split=split,
            seed=seed,
            load_range=(float(load_range[0]), float(load_range[1])),
            dependent_mean=dep_mean,
        )

    return make(train_samples, "train"), make(test_samples, "test")


# ---------------------------------------------------------------------------
# persistence


def _fmt(values):
    return ",".join("%.17g" % v for v in values)


def save_dataset(ds: Dataset, path):
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "case_id": ds.case_id,
        "split": ds.split,
        "seed": ds.seed,
        "load_range": list(ds.load_range),
        "count": len(ds.samples),
        "independent_draws_per_entry": True,
        "scaling_spec": [
            {"id": e.var_id, "min": e.x_min, "max": e.x_max} for e in ds.spec.entries
        ],
        "normalizer": {"mean": ds.normalizer.mean.tolist(), "std": ds.normalizer.std.tolist()},
        "dependent_mean": ds.dependent_mean.tolist(),
    }
    lines = [json.dumps(header)]
    for s in ds.samples:
        row = np.concatenate([s.loads, s.s_true, [s.objective_true], s.dependent_true])
        lines.append(_fmt(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise DataError(f"{path}: empty dataset file")
    header = json.loads(text[0])
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset format")
    spec = ScalingSpec(
        entries=tuple(
            ScalingEntry(e["id"], float(e["min"]), float(e["max"]))
            for e in header["scaling_spec"]
        )
    )
    normalizer = Normalizer(
        mean=np.array(header["normalizer"]["mean"]),
        std=np.array(header["normalizer"]["std"]),
    )
    dep_mean = np.array(header["dependent_mean"])
    d = spec.dimension
    n2 = len(normalizer.mean)
    samples = []
    for line in text[1:]:
        if not line.strip():
            continue
        row = np.array([float(v) for v in line.split(",")])
        samples.append(
            TrainSample(
                loads=row[:n2],
                s_true=row[n2 : n2 + d],
                objective_true=float(row[n2 + d]),
                dependent_true=row[n2 + d + 1 :],
            )
        )
    if len(samples) != header["count"]:
        raise DataError(f"{path}: expected {header['count']} records, found {len(samples)}")
    return Dataset(
        case_id=header["case_id"],
        spec=spec,
        normalizer=normalizer,
        samples=samples,
        split=header["split"],
        seed=header["seed"],
        load_range=tuple(header["load_range"]),
        dependent_mean=dep_mean,
    )
