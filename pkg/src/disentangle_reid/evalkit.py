"""Re-ID retrieval metrics, evaluation protocols, probes and reports."""

from __future__ import annotations

import html
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from ._validation import ValidationError

PROTOCOLS = ("general", "cc", "sc")


def pairwise_distances(q, g, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2:
        raise ValidationError("query and gallery features must be 2-D")
    if q.shape[1] != g.shape[1]:
        raise ValidationError(f"feature dimension mismatch: {q.shape[1]} vs {g.shape[1]}")
    if metric == "euclidean":
        return cdist(q, g, "euclidean")
    if metric == "cosine":
        if (np.linalg.norm(q, axis=1) == 0).any() or (np.linalg.norm(g, axis=1) == 0).any():
            raise ValidationError("cosine distance is undefined for zero vectors")
        return cdist(q, g, "cosine")
    raise ValidationError(f"unknown metric {metric!r}")


@dataclass
class ProtocolMask:
    """``valid[q, g]`` marks gallery entries that take part in ranking query ``q``;
    ``positive`` marks the valid entries that count as correct matches."""

    valid: np.ndarray
    positive: np.ndarray
    protocol: str


def _column(meta, key):
    if isinstance(meta, Mapping):
        val = meta.get(key)
    else:
        val = getattr(meta, key, None)
    return None if val is None else np.asarray(val)


def build_protocol_mask(q_meta, g_meta, protocol: str = "general") -> ProtocolMask:
    """Apply the general / clothes-changing / same-clothes validity rules.

    general: drop gallery entries with the query's pid seen by the query's camera.
    cc: additionally drop same-pid entries wearing the query's clothes.
    sc: additionally drop same-pid entries wearing different clothes.
    """
    if protocol not in PROTOCOLS:
        raise ValidationError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    qp, gp = _column(q_meta, "pid"), _column(g_meta, "pid")
    qc, gc = _column(q_meta, "camid"), _column(g_meta, "camid")
    if qp is None or gp is None or qc is None or gc is None:
        raise ValidationError("pid and camid are required for every query and gallery item")
    same_pid = qp[:, None] == gp[None, :]
    valid = ~(same_pid & (qc[:, None] == gc[None, :]))
    if protocol != "general":
        qcl, gcl = _column(q_meta, "clothid"), _column(g_meta, "clothid")
        if qcl is None or gcl is None or (qcl < 0).any() or (gcl < 0).any():
            raise ValidationError(f"protocol {protocol!r} needs a clothid for every item")
        same_cloth = qcl[:, None] == gcl[None, :]
        if protocol == "cc":
            valid &= ~(same_pid & same_cloth)
        else:
            valid &= ~(same_pid & ~same_cloth)
    return ProtocolMask(valid=valid, positive=valid & same_pid, protocol=protocol)


@dataclass
class EvalResult:
    cmc: np.ndarray
    map: float
    num_valid_queries: int
    protocol: str
    num_excluded: int = 0

    def to_dict(self, max_rank: Optional[int] = None) -> dict:
        cmc = self.cmc if max_rank is None else self.cmc[:max_rank]
        return {
            "protocol": self.protocol,
            "cmc": [float(v) for v in cmc],
            "map": float(self.map),
            "num_valid_queries": int(self.num_valid_queries),
        }


def _ranked_valid(dist_row: np.ndarray, valid_row: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(valid_row)
    return idx[np.argsort(dist_row[idx], kind="stable")]


def cmc_map(distmat, mask: ProtocolMask) -> EvalResult:
    """Single-gallery-shot CMC curve (length G) and mean average precision.

    Queries without any valid positive are excluded from both averages.
    Equal distances keep gallery index order.
    """
    dist = np.asarray(distmat, dtype=np.float64)
    if dist.shape != mask.valid.shape:
        raise ValidationError(f"distmat shape {dist.shape} does not match mask {mask.valid.shape}")
    num_g = dist.shape[1]
    cmc_sum = np.zeros(num_g)
    ap_sum = 0.0
    n_valid = 0
    for qi in range(dist.shape[0]):
        order = _ranked_valid(dist[qi], mask.valid[qi])
        hits = np.flatnonzero(mask.positive[qi, order])
        if hits.size == 0:
            continue
        n_valid += 1
        cmc_sum[hits[0]:] += 1.0
        ap_sum += float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))
    if n_valid == 0:
        raise ValidationError("no query has a valid match under this protocol")
    return EvalResult(cmc_sum / n_valid, ap_sum / n_valid, n_valid, mask.protocol, dist.shape[0] - n_valid)


def linear_probe(features, labels, seed: int = 0, test_size: float = 0.3, C: float = 1.0) -> float:
    """Held-out accuracy of an L2-regularised logistic regression on frozen features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValidationError("linear_probe needs at least two classes")
    stratify = y if counts.min() >= 2 else None
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=test_size, random_state=seed, stratify=stratify)
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=2000))
    clf.fit(Xtr, ytr)
    return float(np.mean(clf.predict(Xte) == yte))


def retrieval_report(query_ids: Sequence, distmat, mask: ProtocolMask, k: int = 10, gallery_ids=None):
    """Top-``k`` valid gallery entries per query with correctness flags."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    dist = np.asarray(distmat, dtype=np.float64)
    records = []
    for qi, qid in enumerate(query_ids):
        order = _ranked_valid(dist[qi], mask.valid[qi])[:k]
        records.append({
            "query_id": str(qid),
            "matches": [
                {
                    "rank": r + 1,
                    "gallery_index": int(g),
                    "gallery_id": str(gallery_ids[g]) if gallery_ids is not None else str(int(g)),
                    "distance": float(dist[qi, g]),
                    "correct": bool(mask.positive[qi, g]),
                }
                for r, g in enumerate(order)
            ],
        })
    return records


def write_retrieval_report(records, jsonl_path, html_path=None) -> None:
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if html_path is None:
        return
    rows = []
    for rec in records:
        cells = "".join(
            '<td class="{}">{}<br><small>{:.4f}</small></td>'.format(
                "hit" if m["correct"] else "miss", html.escape(m["gallery_id"]), m["distance"]
            )
            for m in rec["matches"]
        )
        rows.append(f"<tr><th>{html.escape(rec['query_id'])}</th>{cells}</tr>")
    page = (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Retrieval report</title><style>"
        "td,th{border:1px solid #999;padding:4px;font-family:monospace}"
        ".hit{background:#c8f7c5}.miss{background:#f7c5c5}</style></head><body>"
        "<table>" + "\n".join(rows) + "</table></body></html>\n"
    )
    Path(html_path).write_text(page, encoding="utf-8")


def cluster_report(features, labels) -> dict:
    """Top-2 principal component coordinates plus per-label silhouette means.

    Silhouettes are computed in the original feature space.
    """
    from sklearn.metrics import silhouette_samples

    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("cluster_report needs a 2-D array with at least two samples")
    centered = X - X.mean(axis=0)
    if not np.any(centered):
        raise ValidationError("features are constant; no projection exists")
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    # fix the sign of each axis so runs agree
    signs = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)])
    u, vt = u * signs, vt * signs[:, None]
    coords = np.zeros((X.shape[0], 2))
    r = min(2, s.size)
    coords[:, :r] = u[:, :r] * s[:r]
    var = s ** 2
    uniq = np.unique(y)
    if not 2 <= uniq.size <= X.shape[0] - 1:
        raise ValidationError("separation statistic needs between 2 and n-1 distinct labels")
    sil = silhouette_samples(X, y)
    per_label = {str(lab): float(sil[y == lab].mean()) for lab in uniq}
    return {
        "coords": coords.tolist(),
        "labels": [str(v) for v in y],
        "explained_variance_ratio": (var[:2] / var.sum()).tolist(),
        "separation": per_label,
        "mean_separation": float(sil.mean()),
    }


def cluster_svg(report: dict, size: int = 480) -> str:
    coords = np.asarray(report["coords"])
    labels = report["labels"]
    uniq = sorted(set(labels))
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pts = (coords - lo) / span * (size - 20) + 10
    dots = []
    for (x, y), lab in zip(pts, labels):
        hue = int(360 * uniq.index(lab) / max(1, len(uniq)))
        dots.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="3" fill="hsl({hue},70%,45%)"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
            + "".join(dots) + "</svg>\n")
