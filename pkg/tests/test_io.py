from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hetjm import io
from hetjm.diagnostics import DrawsMatrix
from hetjm.model import SubjectData
from hetjm.simulate import reference_design, simulate_cohort

DATA = Path(__file__).parent / "data"


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_golden_fixture():
    data = io.read_dataset(DATA / "golden_long.csv", DATA / "golden_surv.csv")
    assert data == [
        SubjectData("B", [1.1, 2.1], [9.75, 10.25], [0, 0], 2.5, 1),
        SubjectData("A", [1.25, 2.5, 3.75], [12.5, 13.0, 11.5], [0, 0, 1], 3.75, 0),
    ]


def test_decreasing_treatment_rejected(tmp_path):
    long = write(tmp_path / "l.csv", "subject_id,occasion,time,y,z\n7,1,1,1,0\n7,2,2,1,1\n7,3,3,1,0\n")
    surv = write(tmp_path / "s.csv", "subject_id,time,event\n7,3,0\n")
    with pytest.raises(io.DataFormatError, match=r"row 4: subject 7 .*treatment non-decreasing"):
        io.read_dataset(long, surv)


def test_non_monotone_times_rejected(tmp_path):
    long = write(tmp_path / "l.csv", "subject_id,occasion,time,y,z\n7,1,2,1,0\n7,2,1,1,0\n")
    surv = write(tmp_path / "s.csv", "subject_id,time,event\n7,3,0\n")
    with pytest.raises(io.DataFormatError, match="row 3: subject 7 times must be strictly increasing"):
        io.read_dataset(long, surv)


def test_missing_column_and_bad_value(tmp_path):
    surv = write(tmp_path / "s.csv", "subject_id,time,event\n1,3,0\n")
    long = write(tmp_path / "l.csv", "subject_id,occasion,time,y\n1,1,1,1\n")
    with pytest.raises(io.DataFormatError, match="missing column"):
        io.read_dataset(long, surv)
    long = write(tmp_path / "l.csv", "subject_id,occasion,time,y,z\n1,1,1,abc,0\n")
    with pytest.raises(io.DataFormatError, match="row 2: column y"):
        io.read_dataset(long, surv)


def test_orphan_ids(tmp_path):
    long = write(tmp_path / "l.csv", "subject_id,occasion,time,y,z\n1,1,1,1,0\n2,1,1,1,0\n")
    surv = write(tmp_path / "s.csv", "subject_id,time,event\n1,3,0\n3,3,0\n")
    with pytest.raises(io.DataFormatError, match="orphan subject ids.*only: 2.*only: 3"):
        io.read_dataset(long, surv)


def test_missing_file_has_path(tmp_path):
    with pytest.raises(OSError, match="nope.csv"):
        io.read_dataset(tmp_path / "nope.csv", tmp_path / "nope2.csv")


def test_simulated_roundtrip_byte_stable(tmp_path):
    data = simulate_cohort(reference_design(n_subjects=30, seed=1))
    first = io.write_dataset(data, tmp_path / "a")
    back = io.read_dataset(*first)
    assert back == data
    second = io.write_dataset(back, tmp_path / "b")
    for p, q in zip(first, second):
        assert p.read_bytes() == q.read_bytes()


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@st.composite
def subjects(draw, sid):
    m = draw(st.integers(1, 6))
    gaps = draw(st.lists(st.floats(1e-6, 10.0), min_size=m, max_size=m))
    times = np.cumsum(gaps)
    switch = draw(st.integers(0, m))
    values = draw(st.lists(finite, min_size=m, max_size=m))
    T = times[-1] + draw(st.floats(0.0, 5.0))
    return SubjectData(sid, times, values, (np.arange(m) >= switch).astype(int), T, draw(st.integers(0, 1)))


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 5))
    return [draw(subjects(f"s{i}")) for i in range(n)]


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(datasets())
def test_roundtrip_property(tmp_path, data):
    paths = io.write_dataset(data, tmp_path / "x")
    assert io.read_dataset(*paths) == data


def test_draws_roundtrip_bit_equal(tmp_path, rng):
    d = DrawsMatrix(["a", "b__"], rng.standard_normal((2, 5, 2)) * 1e-7 + np.pi)
    io.write_draws(d, tmp_path / "d.csv")
    assert io.read_draws(tmp_path / "d.csv") == d


def test_empty_draws_header_only(tmp_path):
    d = DrawsMatrix(["a", "b"], np.empty((0, 0, 2)))
    io.write_draws(d, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text() == "chain,iter,a,b\n"
    assert io.read_draws(tmp_path / "d.csv").names == ["a", "b"]


def test_summary_columns(tmp_path):
    row = {"mean": 1.0, "sd": 0.5, "mcse": 0.01, "q2.5": 0.1, "q97.5": 1.9, "rhat": 1.001}
    io.write_summary({"beta1": row}, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "name,mean,sd,mcse,q2.5,q97.5,rhat"
    assert lines[1].startswith("beta1,1,0.5,")


def test_config_strict(tmp_path):
    cfg = io.RunConfig.from_mapping({"n_subjects": 20, "alpha0": -2.29, "sigma0": 1.414, "chains": 3, "seed": 5})
    assert cfg.sim.n_subjects == 20 and cfg.sim.alpha.alpha0 == -2.29
    assert cfg.sampler.n_chains == 3 and cfg.sampler.seed == 5 and cfg.sim.seed == 5
    with pytest.raises(ValueError, match="unknown configuration key"):
        io.RunConfig.from_mapping({"n_subject": 20})
    with pytest.raises(ValueError, match="integer"):
        io.RunConfig.from_mapping({"n_subjects": 2.5})
    write(tmp_path / "c.toml", "[sim]\nn_subjects = 3\n")
    with pytest.raises(ValueError, match="flat keys"):
        io.load_config(tmp_path / "c.toml")
    write(tmp_path / "c.toml", "covariance = [[1,0,0,0,0],[0,1,0,0,0],[0,0,1,0,0],[0,0,0,1,0],[0,0,0,0,1]]\n")
    cfg = io.RunConfig.from_mapping(io.load_config(tmp_path / "c.toml"))
    np.testing.assert_allclose(cfg.sim.covariance.covariance, np.eye(5))
