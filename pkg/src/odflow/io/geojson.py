"""GeoJSON export of net flows as origin -> dest line strings."""

from pathlib import Path

from odflow.geo import CellTable
from odflow.io.tables import write_json
from odflow.netflow import NetFlowResult


def netflow_features(result: NetFlowResult, cells: CellTable) -> dict:
    """FeatureCollection oriented along the positive net-flow direction."""
    features = []
    for e in result.entries:
        source, target = (e.origin, e.dest) if e.value >= 0 else (e.dest, e.origin)
        (lat_a, lon_a), (lat_b, lon_b) = cells[source], cells[target]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[lon_a, lat_a], [lon_b, lat_b]]},
                "properties": {"origin": source, "dest": target, "netflow": abs(e.value)},
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_netflow_geojson(result: NetFlowResult, cells: CellTable, path: str | Path) -> None:
    write_json(netflow_features(result, cells), path)
