"""GeoJSON export of gridded sequences, with imputed points flagged."""

from __future__ import annotations

import json
from typing import Iterable

from .data import GriddedSequence, format_time


def sequence_features(seq: GriddedSequence) -> list[dict]:
    """One Point feature per filled slot, in slot order; missing slots are skipped."""
    features = []
    for order, slot in enumerate(s for s in seq.slots if s.checkin is not None):
        c = slot.checkin
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [c.longitude, c.latitude]},
            "properties": {"order": order, "imputed": bool(slot.imputed), "seq_id": seq.seq_id,
                           "user": seq.user_id, "poi": c.poi_id, "time": format_time(c.timestamp)},
        })
    return features


def feature_collection(sequences: Iterable[GriddedSequence]) -> dict:
    features = []
    for seq in sequences:
        features.extend(sequence_features(seq))
    return {"type": "FeatureCollection", "features": features}


def dumps(collection: dict) -> str:
    return json.dumps(collection, indent=1) + "\n"
