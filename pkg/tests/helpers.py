"""Shared builders for the test modules."""

from __future__ import annotations

from addressloc.geodata import Address, Sample, UtmCoord
from addressloc.partition import partition_city
from addressloc.synthcity import CityConfig, generate_city


def labeled_city(cfg: CityConfig = CityConfig()):
    graph, ds = generate_city(cfg)
    coords = {loc: c for loc, (c, _) in ds.locations().items()}
    return graph, ds.with_addresses(partition_city(graph, coords))


def make_sample(loc="L0", view=0, east=0.0, north=0.0, feature=(1.0, 0.0, 0.0, 0.0), address=None,
                caption=("a", "view")):
    return Sample(loc, f"{loc}_v{view}", UtmCoord(east, north), feature, caption, address)


def grant(cross=("Fifth Ave", "Sixth Ave"), hood="Downtown"):
    return Address("Grant St", cross, hood)
