import numpy as np
import pytest

from popsim import io
from popsim.health.model import health_domain
from popsim.sampler import MissingnessMechanism, Sample, apply_missingness
from popsim.streams import LatentDraws


@pytest.fixture()
def pop(small_health):
    return small_health.population.take(np.arange(0, 3000, 7))


def test_population_csv_round_trip(tmp_path, pop):
    io.write_population_csv(tmp_path / "p.csv", pop)
    assert io.read_population_csv(tmp_path / "p.csv", health_domain()).identical(pop)


def test_population_binary_round_trip(tmp_path, pop):
    io.write_population_binary(tmp_path / "p.psim", pop)
    assert io.read_population_binary(tmp_path / "p.psim", health_domain()).identical(pop)


def test_binary_rejects_other_files(tmp_path):
    (tmp_path / "x.psim").write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        io.read_population_binary(tmp_path / "x.psim", health_domain())


def masked_sample(pop):
    s = Sample.from_population(pop, pop.ids[::3], ["age", "sbp", "smoking"])
    s = apply_missingness(s, MissingnessMechanism("MCAR", 0.2), ["sbp"], LatentDraws(1))
    return apply_missingness(s, MissingnessMechanism("MCAR", 0.1, scope="row"), None, LatentDraws(2))


def same_sample(a, b):
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.participated, b.participated)
    for k in a.columns:
        assert np.array_equal(a.mask[k], b.mask[k])
        seen = ~a.mask[k]
        assert np.array_equal(a.values[k][seen], b.values[k][seen])


def test_sample_csv_uses_na_tokens(tmp_path, pop):
    s = masked_sample(pop)
    io.write_sample_csv(tmp_path / "s.csv", s)
    io.write_design_csv(tmp_path / "d.csv", s)
    text = (tmp_path / "s.csv").read_text()
    assert ",NA" in text and "nan" not in text
    same_sample(s, io.read_sample_csv(tmp_path / "s.csv", tmp_path / "d.csv"))
    meta = io.read_design_csv(tmp_path / "d.csv")
    assert all(invited for invited, _ in meta.values())


def test_sample_binary_round_trip(tmp_path, pop):
    s = masked_sample(pop)
    io.write_sample_binary(tmp_path / "s.psms", s)
    back = io.read_sample_binary(tmp_path / "s.psms")
    same_sample(s, back)
    # the binary form keeps masked values too
    assert np.array_equal(back.values["sbp"], s.values["sbp"])


def test_empty_sample(tmp_path, pop):
    s = Sample.from_population(pop, [], ["age"])
    io.write_sample_csv(tmp_path / "s.csv", s)
    assert (tmp_path / "s.csv").read_text() == "id,age\n"
    io.write_sample_binary(tmp_path / "s.psms", s)
    assert io.read_sample_binary(tmp_path / "s.psms").n == 0
