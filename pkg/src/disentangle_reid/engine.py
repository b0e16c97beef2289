"""Training loop: warmup+cosine SGD over the full disentanglement objective."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ._validation import ValidationError
from .data import ReIDDataset, pk_sample
from .model import DisentangleNet, ModelConfig, load_model, save_model
from .objectives import (
    LossWeights,
    TripletConfig,
    batch_hard_triplet_loss,
    contrastive_loss,
    cross_entropy_loss,
    id_loss,
    total_loss,
)

log = logging.getLogger(__name__)

# model keys a config file may set; the rest are derived from the data
MODEL_KEYS = ("feature_dim", "subspace_dim", "encoder_kind", "hidden_dim", "image_shape", "patch_size",
              "num_heads", "depth", "sie_coefficient", "init_std")
NONBIOMETRIC = ("hair", "clothing", "pose", "background")


@dataclass
class TrainConfig:
    epochs: int = 60
    base_lr: float = 2e-6
    warmup_initial_lr: float = 8.42e-7
    warmup_epochs: int = 5
    min_lr: float = 0.0
    weight_decay: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    lambda_id: float = 1.0
    lambda_b: float = 1.0
    lambda_n: float = 1.0
    lambda_c: float = 1.0
    lambda_t: float = 1.0
    grl_coefficient: float = 1.0
    triplet_margin: float = 0.3
    triplet_reduction: str = "sum"
    temperature: float = 1.0
    factors: List[str] = field(default_factory=lambda: ["hair", "clothing"])
    use_clothing_summary: bool = False
    baseline: bool = False
    P: int = 4
    K: int = 4
    eval_every: int = 0
    eval_protocol: str = "general"
    eval_metric: str = "euclidean"
    checkpoint_every: int = 0
    num_threads: int = 1
    model: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.base_lr <= 0 or self.warmup_initial_lr <= 0:
            raise ValidationError("learning rates must be positive")
        if self.min_lr < 0 or self.warmup_epochs < 0:
            raise ValidationError("min_lr and warmup_epochs must be >= 0")
        if self.optimizer != "sgd":
            raise ValidationError(f"only the 'sgd' optimizer is supported, got {self.optimizer!r}")
        bad = [f for f in self.factors if f not in NONBIOMETRIC]
        if bad or len(set(self.factors)) != len(self.factors):
            raise ValidationError(f"factors must be distinct names from {NONBIOMETRIC}, got {self.factors}")
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ValidationError(f"unknown model keys: {sorted(unknown)}")
        # checks happen in the dataclass constructors
        self.loss_weights()
        self.triplet()

    def loss_weights(self) -> LossWeights:
        lb, ln = (0.0, 0.0) if self.baseline else (self.lambda_b, self.lambda_n)
        return LossWeights(self.lambda_id, lb, ln, self.lambda_c, self.lambda_t)

    def triplet(self) -> TripletConfig:
        return TripletConfig(self.triplet_margin, self.triplet_reduction)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config_file(path) -> dict:
    """Read a JSON or YAML mapping."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    return data


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr`` at the last step."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.warmup_initial_lr + (cfg.base_lr - cfg.warmup_initial_lr) * step / warm
    if total <= warm:
        return cfg.base_lr
    progress = min(1.0, (step - warm) / (total - warm))
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainState:
    model: DisentangleNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    running: Dict[str, float] = field(default_factory=dict)


def build_model(cfg: TrainConfig, num_classes: int, num_cameras: int, input_dim: int, encoder=None) -> DisentangleNet:
    mcfg = ModelConfig(
        num_classes=num_classes, num_cameras=num_cameras, input_dim=input_dim,
        num_nonbiometric=len(cfg.factors), use_grl=True, grl_coefficient=cfg.grl_coefficient,
        seed=cfg.seed, **cfg.model,
    )
    return DisentangleNet(mcfg, encoder=encoder)


def build_optimizer(model: DisentangleNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    skip = model.no_decay_names()
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if name in skip else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.SGD(groups, lr=cfg.warmup_initial_lr, momentum=cfg.momentum)


def new_state(cfg: TrainConfig, num_classes: int, num_cameras: int, input_dim: int, encoder=None) -> TrainState:
    model = build_model(cfg, num_classes, num_cameras, input_dim, encoder)
    return TrainState(model=model, optimizer=build_optimizer(model, cfg))


@dataclass
class Batch:
    inputs: torch.Tensor
    camids: torch.Tensor
    labels: torch.Tensor
    text_b: torch.Tensor
    text_n: List[torch.Tensor]


def make_batch(data: ReIDDataset, idx: Sequence[int], labels: np.ndarray, cfg: TrainConfig) -> Batch:
    idx = np.asarray(idx)
    tf = data.text_features
    missing = [a for a in ["biometric", *cfg.factors] if a not in tf]
    if missing and not cfg.baseline:
        raise ValidationError(f"text features missing for aspects {missing}")

    def text(aspect):
        if aspect in tf:
            return torch.from_numpy(np.asarray(tf[aspect][idx], dtype=np.float32))
        return None

    return Batch(
        inputs=torch.from_numpy(np.asarray(data.inputs[idx], dtype=np.float32)),
        camids=torch.from_numpy(np.asarray(data.camids[idx], dtype=np.int64)),
        labels=torch.from_numpy(np.asarray(labels[idx], dtype=np.int64)),
        text_b=text("biometric"),
        text_n=[text(a) for a in cfg.factors],
    )


def compute_losses(model: DisentangleNet, batch: Batch, cfg: TrainConfig):
    """Forward pass and loss breakdown; returns ``(total, parts)``.

    Terms whose weight is zero are computed without a graph, so parameters
    reachable only through them receive no gradient (and no decay).
    """
    w = cfg.loss_weights()
    bundle = model(batch.inputs, batch.camids)
    if not (torch.isfinite(bundle.f_i).all() and torch.isfinite(bundle.logits).all()):
        raise NonFiniteLossError("non-finite features or logits; training has diverged (lower the learning rate)")
    cls = cross_entropy_loss(bundle.logits, batch.labels)
    tri = batch_hard_triplet_loss(bundle.f_i, batch.labels, cfg.triplet())
    lid = id_loss(cls, tri, w)

    def head_terms(b):
        cb = contrastive_loss(b.f_i_b, batch.text_b, cfg.temperature) if batch.text_b is not None else None
        cn = [
            contrastive_loss(b.f_i_n[:, k], t, cfg.temperature) if t is not None else None
            for k, t in enumerate(batch.text_n)
        ]
        return cb, cn

    if w.lambda_b > 0 or w.lambda_n > 0:
        cb, cn = head_terms(bundle)
    else:
        with torch.no_grad():
            cb, cn = head_terms(model.bundle_from_features(bundle.f_i.detach()))

    zero = bundle.f_i.new_zeros(())
    total = total_loss(
        lid,
        cb if (w.lambda_b > 0 and cb is not None) else zero,
        [c for c in cn if c is not None] if w.lambda_n > 0 else [],
        w,
    )
    parts = {"loss_total": total, "loss_id": lid, "loss_cb": cb if cb is not None else zero}
    for k, c in enumerate(cn):
        parts[f"loss_cn_{k}"] = c if c is not None else zero
    return total, parts


def train_step(batch: Batch, state: TrainState, cfg: TrainConfig, lr: float) -> Dict[str, float]:
    model, opt = state.model, state.optimizer
    model.train()
    for g in opt.param_groups:
        g["lr"] = lr
    opt.zero_grad(set_to_none=True)
    total, parts = compute_losses(model, batch, cfg)
    values = {k: float(v.detach()) for k, v in parts.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {values}")
    total.backward()
    opt.step()
    state.step += 1
    return values


@torch.no_grad()
def extract_features(model: DisentangleNet, data: ReIDDataset, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, len(data), batch_size):
        x = torch.from_numpy(np.asarray(data.inputs[s:s + batch_size], dtype=np.float32))
        cam = torch.from_numpy(np.asarray(data.camids[s:s + batch_size], dtype=np.int64))
        out.append(model.encode_image(x, cam).numpy())
    if not out:
        return np.zeros((0, model.cfg.feature_dim), dtype=np.float32)
    return np.concatenate(out)


def evaluate_retrieval(model, query: ReIDDataset, gallery: ReIDDataset, protocol="general", metric="euclidean"):
    from .evalkit import build_protocol_mask, cmc_map, pairwise_distances

    qf = extract_features(model, query)
    gf = extract_features(model, gallery)
    dist = pairwise_distances(qf, gf, metric)
    mask = build_protocol_mask(_meta(query), _meta(gallery), protocol)
    return cmc_map(dist, mask)


def _meta(d: ReIDDataset) -> dict:
    return {"pid": d.pids, "camid": d.camids, "clothid": d.clothids}


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, state: TrainState, cfg: TrainConfig, label_map: Dict[int, int]) -> None:
    extra = {}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                extra[f"optim/{names[id(p)]}"] = buf.detach().numpy()
    meta = {
        "train_config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "train_state": {
            "step": state.step,
            "epoch": state.epoch,
            "running": state.running,
            "torch_rng": torch.get_rng_state().tolist(),
        },
        "label_map": {str(k): v for k, v in label_map.items()},
    }
    save_model(path, state.model, extra, meta)


def load_checkpoint(path, cfg: Optional[TrainConfig] = None, encoder=None):
    """Restore ``(state, label_map, meta)``; checks the config hash when ``cfg`` is given."""
    model, arrays, meta = load_model(path, encoder=encoder)
    if cfg is not None and meta.get("config_hash") != cfg.hash():
        raise ValidationError(f"{path}: checkpoint config hash does not match the current config")
    tcfg = cfg or TrainConfig.from_dict(meta["train_config"])
    opt = build_optimizer(model, tcfg)
    for name, p in model.named_parameters():
        buf = arrays.get(f"optim/{name}")
        if buf is not None:
            opt.state[p]["momentum_buffer"] = torch.from_numpy(buf).clone()
    ts = meta.get("train_state", {})
    state = TrainState(model=model, optimizer=opt, step=ts.get("step", 0), epoch=ts.get("epoch", 0),
                       running=ts.get("running", {}))
    if "torch_rng" in ts:
        torch.set_rng_state(torch.tensor(ts["torch_rng"], dtype=torch.uint8))
    label_map = {int(k): v for k, v in meta.get("label_map", {}).items()}
    return state, label_map, meta


# ------------------------------------------------------------------------ fit

@dataclass
class FitResult:
    state: TrainState
    label_map: Dict[int, int]
    metrics: List[dict]
    evals: List[dict]
    final_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None


def metrics_header(cfg: TrainConfig) -> List[str]:
    return ["step", "epoch", "lr", "loss_total", "loss_id", "loss_cb"] + [
        f"loss_cn_{k}" for k in range(len(cfg.factors))
    ]


def _read_metrics(path: Path, upto_step: int) -> List[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["step"]) <= upto_step]


def _write_metrics(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def fit(
    cfg: TrainConfig,
    train: ReIDDataset,
    query: Optional[ReIDDataset] = None,
    gallery: Optional[ReIDDataset] = None,
    out_dir=None,
    resume=None,
    encoder=None,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs of PK batches.

    With ``out_dir`` set, writes ``metrics.csv``, ``checkpoint_final.bin``,
    ``checkpoint_best.bin`` (when evaluation runs) and periodic
    ``checkpoint_epoch_XXX.bin`` files.
    """
    torch.set_num_threads(cfg.num_threads)
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state, label_map, _ = load_checkpoint(resume, cfg, encoder=encoder)
    else:
        torch.manual_seed(cfg.seed)
        classes = np.unique(train.pids)
        if len(classes) < 2:
            raise ValidationError("training needs at least two identities")
        label_map = {int(p): i for i, p in enumerate(classes)}
        num_cams = 1 + max(int(d.camids.max()) for d in (train, query, gallery) if d is not None and len(d))
        state = new_state(cfg, len(classes), num_cams, int(np.prod(train.inputs.shape[1:])), encoder)
    labels = np.array([label_map[int(p)] for p in train.pids])
    steps_per_epoch = len(pk_sample(labels, cfg.P, cfg.K, cfg.seed))

    header = metrics_header(cfg)
    metrics_path = out / "metrics.csv" if out is not None else None
    rows = _read_metrics(metrics_path, state.step) if (metrics_path is not None and resume is not None) else []
    evals: List[dict] = []
    best_rank1 = -1.0
    best_path = None

    for epoch in range(state.epoch, cfg.epochs):
        batches = pk_sample(labels, cfg.P, cfg.K, cfg.seed * 100003 + epoch)
        sums: Dict[str, float] = {}
        for idx in batches:
            lr = lr_schedule(state.step, cfg, steps_per_epoch)
            values = train_step(make_batch(train, idx, labels, cfg), state, cfg, lr)
            row = {"step": state.step, "epoch": epoch, "lr": repr(lr)}
            row.update({k: repr(v) for k, v in values.items()})
            rows.append(row)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
        state.epoch = epoch + 1
        state.running = {k: v / max(1, len(batches)) for k, v in sums.items()}
        log.info("epoch %d step %d %s", state.epoch, state.step, state.running)

        if cfg.eval_every and state.epoch % cfg.eval_every == 0 and query is not None and gallery is not None:
            res = evaluate_retrieval(state.model, query, gallery, cfg.eval_protocol, cfg.eval_metric)
            evals.append({"epoch": state.epoch, "step": state.step, **res.to_dict(max_rank=10)})
            if out is not None and res.cmc[0] > best_rank1:
                best_rank1 = float(res.cmc[0])
                best_path = out / "checkpoint_best.bin"
                save_checkpoint(best_path, state, cfg, label_map)
        if out is not None:
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch_{state.epoch:03d}.bin", state, cfg, label_map)
            _write_metrics(metrics_path, header, rows)

    final_path = None
    if out is not None:
        final_path = out / "checkpoint_final.bin"
        save_checkpoint(final_path, state, cfg, label_map)
        _write_metrics(metrics_path, header, rows)
        if evals:
            (out / "eval_history.json").write_text(json.dumps(evals, indent=2))
    return FitResult(state, label_map, rows, evals, final_path, best_path)
