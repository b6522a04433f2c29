"""Synthetic multi-field click logs with planted pairwise interactions.

Used for smoke tests, timing runs and demos when the public benchmark
files are not on disk. The shape defaults mimic Frappe: ten categorical
fields, a few thousand distinct tokens and one positive per two negatives.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

FRAPPE_FIELDS = ("user", "item", "daytime", "weekday", "isweekend", "homework", "cost", "weather", "country", "city")
FRAPPE_CARDINALITIES = (957, 4082, 7, 7, 2, 3, 2, 9, 80, 233)


@dataclass
class SyntheticSpec:
    n_rows: int = 20000
    fields: Sequence[str] = FRAPPE_FIELDS
    cardinalities: Sequence[int] = FRAPPE_CARDINALITIES
    zipf: float = 1.1  # token popularity skew
    latent_dim: int = 4
    interaction_scale: float = 2.5
    positive_rate: float = 1.0 / 3.0
    seed: int = 0


def generate(spec: SyntheticSpec):
    """Return (header, rows) where rows are lists of string tokens with the label first.

    The click logit is a sum of first-order token effects and factorised
    pairwise interactions, thresholded to hit ``positive_rate``.
    """
    rng = np.random.default_rng(spec.seed)
    n, f = spec.n_rows, len(spec.fields)
    tokens = np.empty((n, f), dtype=np.int64)
    for j, card in enumerate(spec.cardinalities):
        p = 1.0 / np.arange(1, card + 1) ** spec.zipf
        tokens[:, j] = rng.choice(card, size=n, p=p / p.sum())
    first = [rng.normal(0, 0.5, size=c) for c in spec.cardinalities]
    latent = [rng.normal(0, 1.0 / np.sqrt(spec.latent_dim), size=(c, spec.latent_dim)) for c in spec.cardinalities]
    logit = np.zeros(n)
    for j in range(f):
        logit += first[j][tokens[:, j]]
    for a in range(f):
        for b in range(a + 1, f):
            logit += spec.interaction_scale / f * (latent[a][tokens[:, a]] * latent[b][tokens[:, b]]).sum(axis=1)
    logit += rng.logistic(size=n) * 0.3
    cut = np.quantile(logit, 1.0 - spec.positive_rate)
    labels = (logit > cut).astype(int)
    header = ["label"] + list(spec.fields)
    rows = [[str(labels[i])] + [f"{spec.fields[j]}_{tokens[i, j]}" for j in range(f)] for i in range(n)]
    return header, rows


def write_csv(path, spec: SyntheticSpec) -> Path:
    header, rows = generate(spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def schema_dict(spec: SyntheticSpec) -> dict:
    return {"label": "label", "fields": list(spec.fields)}


def as_dicts(header: List[str], rows: List[List[str]]) -> List[dict]:
    return [dict(zip(header, r)) for r in rows]
