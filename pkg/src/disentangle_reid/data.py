"""Synthetic factor datasets, manifest IO and PK batch sampling."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ._validation import ValidationError
from .archive import load_arrays, save_arrays

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("image_id", "path", "pid", "camid", "clothid")
SPLITS = ("train", "query", "gallery")
FACTORS = ("biometric", "clothing", "hair", "pose", "background")


@dataclass
class SynthConfig:
    num_ids: int = 50
    outfits_per_id: int = 2
    images_per_outfit: int = 10
    num_cameras: int = 4
    d_b: int = 16
    d_c: int = 16
    d_h: int = 8
    d_p: int = 8
    input_dim: int = 64
    noise_sigma: float = 0.1
    seed: int = 0
    text_dim: int = 32
    num_train_ids: int = 25
    query_per_outfit: int = 2
    biometric_scale: float = 1.0
    clothing_scale: float = 1.0
    hair_scale: float = 1.0
    pose_scale: float = 1.0
    camera_scale: float = 1.0
    image_shape: Optional[List[int]] = None

    def __post_init__(self):
        for name in ("num_ids", "outfits_per_id", "images_per_outfit", "num_cameras",
                     "d_b", "d_c", "d_h", "d_p", "input_dim", "text_dim"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"SynthConfig.{name} must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("SynthConfig.noise_sigma must be >= 0")
        if not 0 <= self.num_train_ids <= self.num_ids:
            raise ValidationError("num_train_ids must lie in [0, num_ids]")
        if not 0 <= self.query_per_outfit < self.images_per_outfit:
            raise ValidationError("query_per_outfit must leave gallery images for every outfit")
        if self.image_shape is not None:
            self.image_shape = [int(s) for s in self.image_shape]
            if int(np.prod(self.image_shape)) != self.input_dim:
                raise ValidationError("prod(image_shape) must equal input_dim")


@dataclass
class Sample:
    input: np.ndarray
    pid: int
    camid: int
    clothid: int
    image_id: str = ""
    factors: Optional[Dict[str, np.ndarray]] = None


@dataclass
class ReIDDataset:
    """Column-oriented set of samples with optional per-aspect text features."""

    inputs: np.ndarray
    pids: np.ndarray
    camids: np.ndarray
    clothids: np.ndarray
    image_ids: List[str]
    text_features: Dict[str, np.ndarray] = field(default_factory=dict)
    factors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            input=self.inputs[i], pid=int(self.pids[i]), camid=int(self.camids[i]),
            clothid=int(self.clothids[i]), image_id=self.image_ids[i],
            factors={k: v[i] for k, v in self.factors.items()} or None,
        )

    def subset(self, idx) -> "ReIDDataset":
        idx = np.asarray(idx, dtype=int)
        return ReIDDataset(
            inputs=self.inputs[idx], pids=self.pids[idx], camids=self.camids[idx],
            clothids=self.clothids[idx], image_ids=[self.image_ids[i] for i in idx],
            text_features={k: v[idx] for k, v in self.text_features.items()},
            factors={k: v[idx] for k, v in self.factors.items()},
        )


@dataclass
class SynthDataset:
    config: SynthConfig
    data: ReIDDataset
    split: np.ndarray
    mixing: Dict[str, np.ndarray]
    camera_offsets: np.ndarray

    def part(self, name: str) -> ReIDDataset:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        return self.data.subset(np.flatnonzero(self.split == name))


def _embed_into(rng: np.random.Generator, dim_in: int, dim_out: int) -> np.ndarray:
    """Fixed linear map from a factor space into the text space, orthonormal where possible."""
    a = rng.standard_normal((max(dim_in, dim_out), min(dim_in, dim_out)))
    q, _ = np.linalg.qr(a)
    return q if dim_out >= dim_in else q.T


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    """Draw a dataset whose inputs are linear mixtures of known latent factors.

    ``input = M_b b + M_c c + M_h h + M_p p + e_cam + noise``. The identity
    vector ``b`` is shared by all images of a person, ``c`` and ``h`` by all
    images of one outfit, ``p`` is drawn per image. Oracle text features are
    the unit-normalised factor vectors mapped into ``text_dim`` dimensions.
    """
    rng = np.random.default_rng(cfg.seed)
    dims = {"biometric": cfg.d_b, "clothing": cfg.d_c, "hair": cfg.d_h, "pose": cfg.d_p}
    mixing = {k: rng.standard_normal((cfg.input_dim, d)) / np.sqrt(d) for k, d in dims.items()}
    camera_offsets = cfg.camera_scale * rng.standard_normal((cfg.num_cameras, cfg.input_dim)) / np.sqrt(cfg.input_dim)
    text_maps = {k: _embed_into(rng, d, cfg.text_dim) for k, d in dims.items()}
    text_maps["background"] = _embed_into(rng, cfg.input_dim, cfg.text_dim)

    n_outfits = cfg.num_ids * cfg.outfits_per_id
    b = cfg.biometric_scale * rng.standard_normal((cfg.num_ids, cfg.d_b))
    c = cfg.clothing_scale * rng.standard_normal((n_outfits, cfg.d_c))
    h = cfg.hair_scale * rng.standard_normal((n_outfits, cfg.d_h))

    n = n_outfits * cfg.images_per_outfit
    pids = np.repeat(np.arange(cfg.num_ids), cfg.outfits_per_id * cfg.images_per_outfit)
    clothids = np.repeat(np.arange(n_outfits), cfg.images_per_outfit)
    camids = rng.integers(0, cfg.num_cameras, size=n)
    p = cfg.pose_scale * rng.standard_normal((n, cfg.d_p))
    noise = rng.standard_normal((n, cfg.input_dim))

    factors = {"biometric": b[pids], "clothing": c[clothids], "hair": h[clothids], "pose": p}
    clean = sum(factors[k] @ mixing[k].T for k in dims) + camera_offsets[camids]
    inputs = clean + cfg.noise_sigma * noise

    text = {k: _unit_rows(factors[k] @ text_maps[k].T) for k in dims}
    text["background"] = _unit_rows(camera_offsets[camids] @ text_maps["background"].T)

    split = np.empty(n, dtype=object)
    split[:] = "train"
    test = pids >= cfg.num_train_ids
    within = np.tile(np.arange(cfg.images_per_outfit), n_outfits)
    split[test] = np.where(within[test] < cfg.query_per_outfit, "query", "gallery")

    data = ReIDDataset(
        inputs=inputs.astype(np.float32), pids=pids, camids=camids, clothids=clothids,
        image_ids=[f"syn{i:06d}" for i in range(n)],
        text_features={k: v.astype(np.float32) for k, v in text.items()},
        factors={k: v.astype(np.float32) for k, v in factors.items()},
    )
    return SynthDataset(cfg, data, split.astype(str), mixing, camera_offsets)


def save_dataset(root, ds: SynthDataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    d = ds.data
    arrays = {"inputs": d.inputs}
    arrays.update({f"text/{k}": v for k, v in d.text_features.items()})
    arrays.update({f"factor/{k}": v for k, v in d.factors.items()})
    arrays.update({f"mixing/{k}": v for k, v in ds.mixing.items()})
    arrays["camera_offsets"] = ds.camera_offsets
    save_arrays(root / "data.bin", arrays, {"synth_config": asdict(ds.config), "image_ids": d.image_ids})
    for name in SPLITS:
        rows = np.flatnonzero(ds.split == name)
        write_manifest(root / f"{name}.csv", [
            ManifestRecord(d.image_ids[i], f"data.bin#{i}", int(d.pids[i]), int(d.camids[i]), int(d.clothids[i]))
            for i in rows
        ])


def load_dataset(root) -> SynthDataset:
    """Load a directory written by :func:`save_dataset`."""
    root = Path(root)
    arrays, meta = load_arrays(root / "data.bin")
    cfg = SynthConfig(**meta["synth_config"])
    image_ids = meta["image_ids"]
    n = len(image_ids)
    pids = np.full(n, -1)
    camids = np.full(n, -1)
    clothids = np.full(n, -1)
    split = np.empty(n, dtype=object)
    row_of = {iid: i for i, iid in enumerate(image_ids)}
    for name in SPLITS:
        for rec in load_manifest(root / f"{name}.csv"):
            i = row_of.get(rec.image_id)
            if i is None:
                raise ValidationError(f"{name}.csv references unknown image_id {rec.image_id!r}")
            pids[i], camids[i], clothids[i] = rec.pid, rec.camid, rec.clothid
            split[i] = name
    if any(s is None for s in split):
        raise ValidationError(f"{root}: some archive rows are missing from the manifests")
    data = ReIDDataset(
        inputs=arrays["inputs"], pids=pids, camids=camids, clothids=clothids, image_ids=list(image_ids),
        text_features={k[5:]: v for k, v in arrays.items() if k.startswith("text/")},
        factors={k[7:]: v for k, v in arrays.items() if k.startswith("factor/")},
    )
    mixing = {k[7:]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("mixing/")}
    return SynthDataset(cfg, data, split.astype(str), mixing, arrays["camera_offsets"].astype(np.float64))


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    path: str
    pid: int
    camid: int
    clothid: int


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.image_id, r.path, r.pid, r.camid, "" if r.clothid < 0 else r.clothid])


def load_manifest(path) -> List[ManifestRecord]:
    """Parse a ``image_id,path,pid,camid,clothid`` CSV, preserving file order.

    An empty ``clothid`` means the clothing label is unknown and is stored as
    -1; clothes-aware protocols reject such rows at evaluation time.
    """
    records = []
    seen = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {missing}")
        for row in reader:
            line = reader.line_num
            try:
                ids = [int(row["pid"]), int(row["camid"]),
                       -1 if (row["clothid"] or "").strip() == "" else int(row["clothid"])]
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{line}: unparseable row {row!r}") from exc
            for col, val in zip(("pid", "camid", "clothid"), ids):
                if val < 0 and row[col].strip() != "":
                    raise ValidationError(f"{path}:{line}: negative {col} ({val}) in row {row['image_id']!r}")
            iid = row["image_id"]
            if not iid:
                raise ValidationError(f"{path}:{line}: empty image_id")
            if iid in seen:
                raise ValidationError(f"{path}:{line}: duplicate image_id {iid!r}")
            seen.add(iid)
            records.append(ManifestRecord(iid, row["path"], *ids))
    return records


def load_image(path, image_shape: Sequence[int]) -> np.ndarray:
    """Decode an image file into a ``(C, H, W)`` float array in [0, 1]."""
    from PIL import Image

    c, h, w = image_shape
    img = Image.open(path).convert("RGB" if c == 3 else "L").resize((w, h))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.reshape(h, w, c).transpose(2, 0, 1)


def pk_sample(labels, P: int, K: int, seed: int) -> List[List[int]]:
    """One epoch of PK batches: ``P`` identities times ``K`` instances each.

    Every identity's instances are shuffled and chunked into groups of ``K``;
    identities with fewer than ``K`` instances are topped up by sampling with
    replacement (logged). Batches draw ``P`` distinct identities among those
    with chunks left; the final short round is filled with extra identities so
    every identity appears at least once per epoch.
    """
    labels = np.asarray(labels)
    if P < 1 or K < 1:
        raise ValidationError("P and K must be positive")
    rng = np.random.default_rng(seed)
    uniq = np.unique(labels)
    if len(uniq) < P:
        raise ValidationError(f"need at least P={P} identities, found {len(uniq)}")
    by_id = {int(u): np.flatnonzero(labels == u) for u in uniq}
    chunks: Dict[int, List[List[int]]] = {}
    short = []
    for pid, idx in by_id.items():
        idx = rng.permutation(idx)
        if len(idx) < K:
            short.append(pid)
            idx = np.concatenate([idx, rng.choice(idx, K - len(idx), replace=True)])
        n_full = len(idx) // K
        chunks[pid] = [idx[j * K:(j + 1) * K].tolist() for j in range(n_full)]
    if short:
        log.warning("identities %s have fewer than K=%d instances; sampled with replacement", short, K)

    batches = []
    while True:
        alive = [pid for pid in sorted(chunks) if chunks[pid]]
        if len(alive) >= P:
            chosen = rng.choice(alive, P, replace=False)
        elif alive:
            others = [pid for pid in sorted(chunks) if pid not in alive]
            fill = rng.choice(others, P - len(alive), replace=False)
            for pid in fill:
                chunks[int(pid)] = [rng.choice(by_id[int(pid)], K, replace=len(by_id[int(pid)]) < K).tolist()]
            chosen = np.concatenate([np.asarray(alive), fill])
        else:
            break
        batch = []
        for pid in chosen:
            batch.extend(chunks[int(pid)].pop())
        batches.append(batch)
    return batches
