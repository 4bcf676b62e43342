import numpy as np
import pytest

from tdmr_lab.archive import Archive, describe, load_archive, save_archive
from tdmr_lab.media import MediaGeometry


@pytest.fixture(scope="module")
def saved(tiny_detectors, tmp_path_factory):
    path = tmp_path_factory.mktemp("arc") / "tiny.laip"
    save_archive(path, Archive.from_detectors(tiny_detectors, MediaGeometry()))
    return path


def test_round_trip_is_byte_exact(saved, tmp_path):
    arc = load_archive(saved)
    again = tmp_path / "again.laip"
    save_archive(again, arc)
    assert again.read_bytes() == saved.read_bytes()


def test_round_trip_preserves_contents(saved, tiny_detectors):
    det = load_archive(saved).to_detectors()
    assert det.tables.keys() == tiny_detectors.tables.keys()
    for key, tab in tiny_detectors.tables.items():
        got = det.tables[key]
        for name in ("keys", "indptr", "alpha", "prob"):
            assert np.array_equal(getattr(got, name), getattr(tab, name))
            assert getattr(got, name).dtype == getattr(tab, name).dtype
    for a, b in zip(det.quantizers, tiny_detectors.quantizers):
        assert np.array_equal(a.bin_boundaries, b.bin_boundaries)
        assert np.array_equal(a.reproduction_levels, b.reproduction_levels)
    assert np.array_equal(det.eq_pr2d.taps, tiny_detectors.eq_pr2d.taps)
    assert np.array_equal(det.sigma_pr2d, tiny_detectors.sigma_pr2d)
    assert det.sigma_pr1d == tiny_detectors.sigma_pr1d
    assert np.array_equal(det.pdnp2d.P, tiny_detectors.pdnp2d.P)
    assert np.array_equal(det.pdnp1d.coeffs, tiny_detectors.pdnp1d.coeffs)
    assert np.array_equal(det.eq_two_track, tiny_detectors.eq_two_track)


def test_tables_normalised(saved):
    arc = load_archive(saved)
    for tab in arc.tables.values():
        sums = np.add.reduceat(tab.prob, tab.indptr[:-1])
        assert np.max(np.abs(sums - 1)) < 1e-9
    assert "max|sum-1|" in describe(arc)


def test_bad_files(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_archive(p)


def test_incomplete_archive_refuses_pipeline():
    with pytest.raises(ValueError):
        Archive(MediaGeometry()).to_detectors()
