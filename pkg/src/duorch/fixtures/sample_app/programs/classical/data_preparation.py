"""Data preparation stubs: load the dataset, pairwise distances, normalisation."""

import json
import math
from pathlib import Path


def retrieve_data(inputs, ctx):
    root = Path(ctx["root"])
    doc = json.loads((root / "data" / f"{inputs['dataset']}.json").read_text())
    return {"points": doc["points"], "labels": doc["labels"]}


def compute_distances(inputs):
    pts = inputs["points"]
    return {"distances": [[round(math.dist(p, q), 6) for q in pts] for p in pts]}


def normalize(inputs):
    pts = inputs["points"]
    dims = len(pts[0])
    means = [sum(p[d] for p in pts) / len(pts) for d in range(dims)]
    spread = max(max(abs(p[d] - means[d]) for p in pts) for d in range(dims)) or 1.0
    scale = max(max(row) for row in inputs["distances"]) or 1.0
    return {"embedding": [[round((p[d] - means[d]) / spread, 6) for d in range(dims)] for p in pts],
            "scale": scale}
