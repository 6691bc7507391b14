import numpy as np
import pytest

from deepsolve import solve_pf
from deepsolve.dataio import (
    CodecError,
    DataError,
    Normalizer,
    ScalingEntry,
    ScalingSpec,
    build_dataset,
    decode,
    encode,
    independent_values,
    load_dataset,
    pf_init_from_dependent,
    sample_loads,
    save_dataset,
)
from deepsolve.opfref import generation_cost
from deepsolve.powerflow import IndependentVars


@pytest.fixture(scope="module")
def spec30(case30):
    return ScalingSpec.from_case(case30)


def test_spec_dimension_and_order(case30, spec30):
    assert spec30.dimension == 2 * len(case30.pv_indices) + 1 == 11
    assert spec30.entries[0].var_id == "vm:1"
    assert spec30.entries[1].var_id == "pg:2"
    assert spec30.entries[2].var_id == "vm:2"


def test_encode_endpoints_and_midpoint(spec30):
    s = encode(spec30, spec30.x_min)
    assert np.allclose(s, 0.0)
    s = encode(spec30, spec30.x_max)
    assert np.allclose(s, 1.0)
    mid = 0.5 * (spec30.x_min + spec30.x_max)
    assert np.allclose(encode(spec30, mid), 0.5)
    assert np.allclose(decode(spec30, np.full(spec30.dimension, 0.5)), mid)


def test_round_trip_random_vectors(spec30):
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = spec30.x_min + rng.random(spec30.dimension) * (spec30.x_max - spec30.x_min)
        assert np.max(np.abs(decode(spec30, encode(spec30, x)) - x)) < 1e-12


def test_encode_out_of_bounds_names_variable(spec30):
    x = spec30.x_min.copy()
    x[3] = spec30.x_max[3] + 0.5
    with pytest.raises(CodecError) as err:
        encode(spec30, x)
    assert err.value.var_id == spec30.entries[3].var_id


def test_decode_rejects_outside_unit_interval(spec30):
    s = np.full(spec30.dimension, 0.5)
    s[0] = 1.5
    with pytest.raises(CodecError):
        decode(spec30, s)


def test_degenerate_bounds_encode_half_decode_exact():
    spec = ScalingSpec(entries=(ScalingEntry("pg:9", 0.42, 0.42),))
    assert encode(spec, np.array([0.42]))[0] == 0.5
    assert decode(spec, np.array([0.77]))[0] == 0.42
    with pytest.raises(CodecError):
        encode(spec, np.array([0.43]))


def test_sample_loads_degenerate_range(case30):
    loads = sample_loads(case30, (1.0, 1.0), 5, seed=3)
    base = np.concatenate([case30.default_p_load, case30.default_q_load])
    assert np.array_equal(loads, np.tile(base, (5, 1)))


def test_sample_loads_statistics(case30):
    loads = sample_loads(case30, (0.9, 1.1), 10_000, seed=5)
    base = np.concatenate([case30.default_p_load, case30.default_q_load])
    nz = base != 0
    ratio = loads[:, nz].mean(axis=0) / base[nz]
    assert np.max(np.abs(ratio - 1.0)) < 0.01
    # zero default loads stay exactly zero under multiplicative sampling
    assert np.all(loads[:, ~nz] == 0.0)
    assert loads[:, nz].min() >= 0.9 * base[nz].min() - 1e-12


def test_sample_loads_deterministic(case30):
    a = sample_loads(case30, (0.9, 1.1), 7, seed=11)
    b = sample_loads(case30, (0.9, 1.1), 7, seed=11)
    assert np.array_equal(a, b)


def test_normalizer_passthrough_for_zero_variance():
    loads = np.array([[1.0, 0.0, 5.0], [2.0, 0.0, 5.0], [3.0, 0.0, 5.0]])
    norm = Normalizer.fit(loads)
    z = norm.transform(loads)
    assert np.allclose(z[:, 1], 0.0)  # zero loads stay zero
    assert np.allclose(z[:, 2], 5.0)  # constant dimension passes through unscaled
    assert np.allclose(norm.inverse(z), loads)


@pytest.fixture(scope="module")
def small_sets(case30):
    return build_dataset(case30, 12, 4, seed=21)


def test_dataset_counts_and_invariants(small_sets, case30, spec30):
    train, test = small_sets
    assert len(train) == 12 and len(test) == 4
    assert train.split == "train" and test.split == "test"
    for ds in (train, test):
        for s in ds.samples:
            assert np.all(s.s_true >= 0) and np.all(s.s_true <= 1)
    # normalized training loads: zero mean, unit std on non-constant dims
    z = train.normalizer.transform(train.loads_matrix)
    base = np.concatenate([case30.default_p_load, case30.default_q_load])
    nz = base != 0
    assert np.max(np.abs(z[:, nz].mean(axis=0))) < 1e-10
    assert np.max(np.abs(z[:, nz].std(axis=0) - 1.0)) < 1e-10


def test_labels_reconstruct_reference_objective(small_sets, case30, adm30):
    """Decoding a label and re-solving the power flow must reproduce the
    reference solver's objective to 0.01%."""
    train, _ = small_sets
    init = pf_init_from_dependent(case30, train.dependent_mean)
    gen_at = case30.gen_lookup()
    npv = len(case30.pv_indices)
    for s in train.samples[:6]:
        x = decode(train.spec, s.s_true)
        indep = IndependentVars(
            v_slack=x[0], pv_p_gen=x[1 : 1 + 2 * npv : 2], pv_v_mag=x[2 : 2 + 2 * npv : 2]
        )
        n = case30.n_bus
        pf = solve_pf(case30, adm30, indep, s.loads[:n], s.loads[n:], init=init, tol=1e-10)
        assert pf.converged
        pg = np.empty(len(case30.generators))
        for k, g in enumerate(case30.generators):
            b = case30.bus_index(g.bus)
            if b == case30.slack_index:
                pg[k] = pf.slack_p_gen
            else:
                j = int(np.where(case30.pv_indices == b)[0][0])
                pg[k] = indep.pv_p_gen[j]
        cost = generation_cost(case30, pg)
        assert cost == pytest.approx(s.objective_true, rel=1e-4)


def test_label_independent_vars_round_trip(small_sets):
    train, _ = small_sets
    for s in train.samples:
        x = decode(train.spec, s.s_true)
        assert np.max(np.abs(decode(train.spec, encode(train.spec, x)) - x)) < 1e-10


def test_empty_dataset_round_trips(case30, tmp_path):
    train, test = build_dataset(case30, 0, 0, seed=1)
    path = tmp_path / "empty.ds"
    save_dataset(train, path)
    again = load_dataset(path)
    assert len(again) == 0
    assert again.spec == train.spec


def test_dataset_file_round_trip_bit_exact(small_sets, tmp_path):
    train, _ = small_sets
    path = tmp_path / "train.ds"
    save_dataset(train, path)
    again = load_dataset(path)
    assert again.case_id == train.case_id
    assert again.spec == train.spec
    assert np.array_equal(again.normalizer.mean, train.normalizer.mean)
    assert np.array_equal(again.normalizer.std, train.normalizer.std)
    assert np.array_equal(again.dependent_mean, train.dependent_mean)
    for a, b in zip(again.samples, train.samples):
        assert np.array_equal(a.loads, b.loads)
        assert np.array_equal(a.s_true, b.s_true)
        assert a.objective_true == b.objective_true
        assert np.array_equal(a.dependent_true, b.dependent_true)
    # byte-identity of a save/load/save cycle
    path2 = tmp_path / "again.ds"
    save_dataset(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_independent_values_matches_spec_order(case30, opf30, spec30):
    vals = independent_values(case30, opf30.v_mag, opf30.p_gen)
    assert vals[0] == opf30.v_mag[case30.slack_index]
    gen_at = case30.gen_lookup()
    first_pv = case30.pv_indices[0]
    assert vals[1] == opf30.p_gen[gen_at[first_pv]]
    assert vals[2] == opf30.v_mag[first_pv]


def test_bad_range_rejected(case30):
    with pytest.raises(DataError):
        sample_loads(case30, (0.0, 1.0), 1, seed=0)


def test_parallel_labeling_matches_serial(case30, tmp_path):
    """Worker-pool labeling must be byte-identical to the serial path."""
    serial = build_dataset(case30, 8, 2, seed=77, workers=1)
    pooled = build_dataset(case30, 8, 2, seed=77, workers=2)
    for a, b in zip(serial, pooled):
        pa, pb = tmp_path / "a.ds", tmp_path / "b.ds"
        save_dataset(a, pa)
        save_dataset(b, pb)
        assert pa.read_bytes() == pb.read_bytes()
