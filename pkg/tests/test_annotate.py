import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from addressloc.annotate import (
    AnnotateError,
    GeocodeFixture,
    GeocodeResult,
    LiveGeocoder,
    LocationType,
    annotate_locations,
    coord_key,
    extract_address,
    interpolate_addresses,
    load_corrections,
    load_fixture,
    refine_with_partition,
    save_fixture,
    synthetic_fixture,
)
from addressloc.geodata import Address, UtmCoord
from addressloc.partition import run_partition

R = LocationType

BEDFORD = [
    GeocodeResult("277 Bedford Ave, Brooklyn, NY, USA", R.ROOFTOP),
    GeocodeResult("Grand St/Bedford Av, Brooklyn, NY, USA", R.GEOMETRIC_CENTER),
    GeocodeResult("Grand St/Bedford Av, Brooklyn, NY, USA", R.GEOMETRIC_CENTER),
    GeocodeResult("Williamsburg, Brooklyn, NY, USA", R.APPROXIMATE),
]


def _addr(street, hood="H"):
    return Address(street, (), hood)


class TestFixture:
    fx = GeocodeFixture({coord_key(UtmCoord(1.0, 2.0)): tuple(BEDFORD)})

    def test_hit_preserves_order(self):
        assert self.fx.reverse(UtmCoord(1.0, 2.0)) == BEDFORD

    def test_rounding_to_decimeter(self):
        assert self.fx.reverse(UtmCoord(1.04, 1.96)) == BEDFORD

    def test_miss_is_empty(self):
        assert self.fx.reverse(UtmCoord(9.0, 9.0)) == []

    def test_round_trip(self, tmp_path):
        save_fixture(self.fx, tmp_path / "f.json")
        assert load_fixture(tmp_path / "f.json") == self.fx

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(AnnotateError, match="bad.json"):
            load_fixture(tmp_path / "bad.json")
        with pytest.raises(AnnotateError):
            load_fixture(tmp_path / "absent.json")

    def test_live_backend_unsupported(self):
        with pytest.raises(AnnotateError, match="unsupported backend"):
            LiveGeocoder("https://example.invalid").reverse(UtmCoord(0.0, 0.0))


class TestExtract:
    def test_rooftop_skipped_and_majority_wins(self):
        assert extract_address(BEDFORD) == Address("Grand St/Bedford Av", (), "Brooklyn")

    def test_singleton(self):
        r = GeocodeResult("Elm St, Midtown, Synth City, SC", R.RANGE_INTERPOLATED)
        assert extract_address([r]) == _addr("Elm St", "Midtown")

    def test_tie_goes_to_earliest(self):
        a = GeocodeResult("Oak St, North, C, S", R.GEOMETRIC_CENTER)
        b = GeocodeResult("Elm St, North, C, S", R.GEOMETRIC_CENTER)
        assert extract_address([a, b]).main_street == "Oak St"
        assert extract_address([b, a]).main_street == "Elm St"

    def test_all_rooftop(self):
        with pytest.raises(AnnotateError, match="no street-level result"):
            extract_address([BEDFORD[0]] * 3)

    def test_only_coarse_results(self):
        with pytest.raises(AnnotateError, match="no street-level result"):
            extract_address([GeocodeResult("Brooklyn, NY, USA", R.APPROXIMATE), GeocodeResult("NY, USA", R.APPROXIMATE)])

    def test_empty(self):
        with pytest.raises(AnnotateError, match="no geocode results"):
            extract_address([])


def _brute_nearest(src, coords, loc):
    best = min(src, key=lambda s: (math.dist(coords[s].as_tuple(), coords[loc].as_tuple()), s))
    return best


class TestInterpolate:
    def test_single_source_fills_all(self):
        coords = {f"L{i}": UtmCoord(float(i), 0.0) for i in range(5)}
        out = interpolate_addresses({"L2": _addr("A St")}, coords)
        assert set(out) == set(coords) and set(out.values()) == {_addr("A St")}

    def test_nearer_source_wins(self):
        coords = {"q": UtmCoord(0.0, 0.0), "near": UtmCoord(5.0, 0.0), "far": UtmCoord(500.0, 0.0)}
        out = interpolate_addresses({"near": _addr("Near St"), "far": _addr("Far St")}, coords)
        assert out["q"] == _addr("Near St")

    def test_equidistant_tie_smaller_id(self):
        coords = {"q": UtmCoord(0.0, 0.0), "b": UtmCoord(5.0, 0.0), "a": UtmCoord(-5.0, 0.0)}
        out = interpolate_addresses({"b": _addr("B St"), "a": _addr("A St")}, coords)
        assert out["q"] == _addr("A St")

    def test_unknown_or_empty_sources(self):
        with pytest.raises(AnnotateError):
            interpolate_addresses({}, {"a": UtmCoord(0.0, 0.0)})
        with pytest.raises(AnnotateError):
            interpolate_addresses({"z": _addr("Z St")}, {"a": UtmCoord(0.0, 0.0)})

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=2, max_size=25, unique=True),
           st.integers(0, 2**31))
    def test_matches_brute_force_and_is_idempotent(self, pts, seed):
        coords = {f"L{i:02d}": UtmCoord(float(x), float(y)) for i, (x, y) in enumerate(pts)}
        rng = np.random.default_rng(seed)
        ids = sorted(coords)
        src = sorted(rng.choice(ids, size=rng.integers(1, len(ids) + 1), replace=False).tolist())
        annotated = {s: _addr(f"S{s} St") for s in src}
        out = interpolate_addresses(annotated, coords)
        assert set(out) == set(coords)
        for loc in ids:
            assert out[loc] == annotated[_brute_nearest(src, coords, loc)]
        assert interpolate_addresses(out, coords) == out


def test_corrections_file(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("# fixes\nL1\tGrant St near Fifth Ave, Downtown\n\n")
    assert load_corrections(p) == {"L1": Address("Grant St", ("Fifth Ave",), "Downtown")}
    p.write_text("L1 Grant St, Downtown\n")
    with pytest.raises(AnnotateError, match="c.tsv:1"):
        load_corrections(p)


class TestPipeline:
    def test_full_sampling_then_refine_equals_partition(self, small_city):
        g, ds = small_city
        coords = {loc: c for loc, (c, _) in ds.locations().items()}
        fx = synthetic_fixture(g, coords.items())
        run = annotate_locations(fx, coords, 1.0, seed=0)
        assert run.misses == () and len(run.queried) == len(coords)
        part = run_partition(g, coords)
        assert refine_with_partition(run.labels, coords, g, part) == part.labels

    def test_subsample_is_seeded_and_total(self, small_city):
        g, ds = small_city
        coords = {loc: c for loc, (c, _) in ds.locations().items()}
        fx = synthetic_fixture(g, coords.items())
        a = annotate_locations(fx, coords, 0.3, seed=4)
        b = annotate_locations(fx, coords, 0.3, seed=4)
        assert a == b and set(a.labels) == set(coords)
        assert len(a.queried) == round(0.3 * len(coords))

    def test_misses_are_interpolated(self):
        coords = {"a": UtmCoord(0.0, 0.0), "b": UtmCoord(10.0, 0.0)}
        fx = GeocodeFixture({coord_key(coords["a"]): (GeocodeResult("Elm St, H, C, S", R.GEOMETRIC_CENTER),)})
        run = annotate_locations(fx, coords)
        assert run.misses == ("b",) and run.labels["b"] == _addr("Elm St")
        assert run.summary()["interpolated"] == 1

    def test_corrections_applied_last(self):
        coords = {"a": UtmCoord(0.0, 0.0)}
        fx = GeocodeFixture({coord_key(coords["a"]): (GeocodeResult("Elm St, H, C, S", R.GEOMETRIC_CENTER),)})
        run = annotate_locations(fx, coords, corrections={"a": _addr("Oak St")})
        assert run.labels["a"] == _addr("Oak St") and run.corrected == ("a",)
        with pytest.raises(AnnotateError):
            annotate_locations(fx, coords, corrections={"zz": _addr("Oak St")})

    @pytest.mark.parametrize("frac", [0.0, 1.5])
    def test_bad_fraction(self, frac):
        with pytest.raises(AnnotateError):
            annotate_locations(GeocodeFixture({}), {"a": UtmCoord(0.0, 0.0)}, frac)
