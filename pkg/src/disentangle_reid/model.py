"""Visual encoder, identity classifier and subspace projection heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ._validation import ValidationError, check_finite
from .archive import load_arrays, save_arrays
from .objectives import GradientReversal

ENCODER_KINDS = ("toy-mlp", "toy-transformer", "pluggable")


@dataclass
class ModelConfig:
    feature_dim: int = 64
    subspace_dim: int = 32
    num_nonbiometric: int = 2
    num_classes: int = 2
    num_cameras: int = 1
    encoder_kind: str = "toy-mlp"
    input_dim: int = 64
    hidden_dim: int = 128
    image_shape: Optional[Sequence[int]] = None
    patch_size: int = 4
    num_heads: int = 4
    depth: int = 2
    use_grl: bool = True
    grl_coefficient: float = 1.0
    sie_coefficient: float = 1.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValidationError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        for name in ("feature_dim", "subspace_dim", "num_classes", "num_cameras"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.num_nonbiometric < 0:
            raise ValidationError("num_nonbiometric must be >= 0")
        if self.subspace_dim > self.feature_dim:
            raise ValidationError(
                f"subspace_dim ({self.subspace_dim}) must not exceed feature_dim ({self.feature_dim})"
            )
        if self.grl_coefficient <= 0:
            raise ValidationError("grl_coefficient must be positive")
        if self.image_shape is not None:
            self.image_shape = [int(s) for s in self.image_shape]
        if self.encoder_kind == "toy-transformer":
            if self.image_shape is None or len(self.image_shape) != 3:
                raise ValidationError("toy-transformer needs image_shape = [C, H, W]")
            _, h, w = self.image_shape
            if h % self.patch_size or w % self.patch_size:
                raise ValidationError("image height and width must be multiples of patch_size")
            if self.feature_dim % self.num_heads:
                raise ValidationError("feature_dim must be divisible by num_heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureBundle:
    """Batched outputs of one forward pass.

    ``f_i`` is the entangled feature used for retrieval, ``f_i_b`` the
    biometric projection, ``f_i_n`` has shape ``(B, N, d)``.
    """

    f_i: torch.Tensor
    f_i_b: torch.Tensor
    f_i_n: torch.Tensor
    logits: torch.Tensor


class ToyMLPEncoder(nn.Module):
    """Two-layer MLP; the camera embedding is added to the input projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input_dim = cfg.input_dim
        self.fc1 = nn.Linear(cfg.input_dim, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, cfg.feature_dim)
        self.act = nn.ReLU()
        self.sie = nn.Parameter(torch.zeros(cfg.num_cameras, cfg.hidden_dim))
        self.sie_coefficient = cfg.sie_coefficient

    def forward(self, x: torch.Tensor, camids: torch.Tensor) -> torch.Tensor:
        x = x.reshape(x.shape[0], -1)
        h = self.fc1(x) + self.sie_coefficient * self.sie[camids]
        return self.fc2(self.act(h))


class ToyTransformerEncoder(nn.Module):
    """Patchified ViT-style encoder; the class token output is the feature."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, h, w = cfg.image_shape
        p = cfg.patch_size
        self.patch_size = p
        num_patches = (h // p) * (w // p)
        dim = cfg.feature_dim
        self.patch_embed = nn.Linear(c * p * p, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, dim))
        self.sie = nn.Parameter(torch.zeros(cfg.num_cameras, 1, dim))
        self.sie_coefficient = cfg.sie_coefficient
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                dim, cfg.num_heads, dim_feedforward=2 * dim, dropout=0.0,
                activation="gelu", batch_first=True, norm_first=True,
            )
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(dim)
        self.image_shape = tuple(cfg.image_shape)

    def forward(self, x: torch.Tensor, camids: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        c, h, w = self.image_shape
        p = self.patch_size
        x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5).reshape(b, -1, c * p * p)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), self.patch_embed(x)], dim=1)
        tokens = tokens + self.pos_embed + self.sie_coefficient * self.sie[camids]
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)[:, 0]


class ProjectionHead(nn.Linear):
    """Affine map ``W f + b`` from the entangled space into one subspace."""


def _init_weights(module: nn.Module, std: float) -> None:
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif "norm" in name:
            continue
        else:
            nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)


class DisentangleNet(nn.Module):
    """Encoder plus identity classifier, biometric head and non-biometric heads.

    The non-biometric heads read the entangled feature through a gradient
    reversal layer, so the encoder ascends their contrastive losses while
    the heads descend them.
    """

    def __init__(self, cfg: ModelConfig, encoder: Optional[nn.Module] = None):
        super().__init__()
        self.cfg = cfg
        if cfg.encoder_kind == "toy-mlp":
            self.encoder = ToyMLPEncoder(cfg)
        elif cfg.encoder_kind == "toy-transformer":
            self.encoder = ToyTransformerEncoder(cfg)
        else:
            if encoder is None:
                raise ValidationError("encoder_kind='pluggable' requires an encoder module")
            self.encoder = encoder
        self.classifier = nn.Linear(cfg.feature_dim, cfg.num_classes)
        self.head_b = ProjectionHead(cfg.feature_dim, cfg.subspace_dim)
        self.heads_n = nn.ModuleList(
            ProjectionHead(cfg.feature_dim, cfg.subspace_dim) for _ in range(cfg.num_nonbiometric)
        )
        self.grl = GradientReversal(cfg.grl_coefficient) if cfg.use_grl else nn.Identity()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            _init_weights(self if encoder is None else self._own_modules(), cfg.init_std)

    def _own_modules(self) -> nn.Module:
        return nn.ModuleList([self.classifier, self.head_b, self.heads_n])

    def _check_camids(self, camids: torch.Tensor) -> None:
        if camids.numel() and (int(camids.min()) < 0 or int(camids.max()) >= self.cfg.num_cameras):
            raise ValidationError(
                f"camera id out of range [0, {self.cfg.num_cameras}): {camids.tolist()}"
            )

    def encode_image(self, x: torch.Tensor, camids: torch.Tensor) -> torch.Tensor:
        camids = torch.as_tensor(camids, dtype=torch.long)
        self._check_camids(camids)
        return self.encoder(x, camids)

    def project_biometric(self, f_i: torch.Tensor) -> torch.Tensor:
        return self.head_b(f_i)

    def project_nonbiometric(self, f_i: torch.Tensor, k: int) -> torch.Tensor:
        if not 0 <= k < len(self.heads_n):
            raise ValidationError(f"factor index {k} out of range [0, {len(self.heads_n)})")
        return self.heads_n[k](self.grl(f_i))

    def forward(self, x: torch.Tensor, camids: torch.Tensor) -> FeatureBundle:
        f_i = self.encode_image(x, camids)
        return self.bundle_from_features(f_i)

    def bundle_from_features(self, f_i: torch.Tensor) -> FeatureBundle:
        logits = self.classifier(f_i)
        f_b = self.project_biometric(f_i)
        if len(self.heads_n):
            f_n = torch.stack([self.project_nonbiometric(f_i, k) for k in range(len(self.heads_n))], dim=1)
        else:
            f_n = f_i.new_zeros((f_i.shape[0], 0, self.cfg.subspace_dim))
        return FeatureBundle(f_i=f_i, f_i_b=f_b, f_i_n=f_n, logits=logits)

    forward_bundle = forward

    def no_decay_names(self) -> set:
        """Parameters excluded from weight decay: biases and embeddings."""
        names = set()
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "bias" or leaf in ("sie", "cls_token", "pos_embed") or "norm" in name:
                names.add(name)
        return names


def model_arrays(model: nn.Module) -> dict:
    return {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_model(path, model: DisentangleNet, extra_arrays=None, meta=None) -> None:
    arrays = model_arrays(model)
    arrays.update(extra_arrays or {})
    full_meta = {"model_config": model.cfg.to_dict()}
    full_meta.update(meta or {})
    save_arrays(path, arrays, full_meta)


def load_model(path, encoder: Optional[nn.Module] = None):
    """Rebuild a :class:`DisentangleNet` from an archive; returns ``(model, arrays, meta)``."""
    arrays, meta = load_arrays(path)
    if "model_config" not in meta:
        raise ValidationError(f"{path}: archive has no model_config")
    cfg = ModelConfig(**meta["model_config"])
    model = DisentangleNet(cfg, encoder=encoder)
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise ValidationError(f"{path}: missing parameters {sorted(missing)}")
    model.load_state_dict(state)
    return model, arrays, meta


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x.to(dtype)
    else:
        t = torch.as_tensor(np.asarray(x), dtype=dtype)
    check_finite(t, "input")
    return t
