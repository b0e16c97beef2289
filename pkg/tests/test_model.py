import numpy as np
import pytest
import torch

from disentangle_reid._validation import ValidationError
from disentangle_reid.model import DisentangleNet, ModelConfig, load_model, save_model
from disentangle_reid.objectives import contrastive_loss


def _cfg(**kw):
    base = dict(feature_dim=16, subspace_dim=8, num_nonbiometric=2, num_classes=5, num_cameras=3, input_dim=12)
    base.update(kw)
    return ModelConfig(**base)


def test_bundle_shapes_mlp():
    m = DisentangleNet(_cfg())
    out = m(torch.randn(4, 12), torch.tensor([0, 1, 2, 0]))
    assert out.f_i.shape == (4, 16)
    assert out.f_i_b.shape == (4, 8)
    assert out.f_i_n.shape == (4, 2, 8)
    assert out.logits.shape == (4, 5)


def test_bundle_shapes_transformer():
    cfg = _cfg(encoder_kind="toy-transformer", image_shape=(3, 8, 8), patch_size=4, num_heads=2, depth=1)
    m = DisentangleNet(cfg)
    out = m(torch.randn(2, 3, 8, 8), torch.tensor([0, 2]))
    assert out.f_i.shape == (2, 16)


def test_camera_embedding_changes_features():
    m = DisentangleNet(_cfg())
    x = torch.randn(1, 12)
    a = m.encode_image(x, torch.tensor([0]))
    b = m.encode_image(x, torch.tensor([1]))
    assert not torch.allclose(a, b)


def test_invalid_inputs():
    m = DisentangleNet(_cfg())
    with pytest.raises(ValidationError, match="camera id"):
        m(torch.randn(1, 12), torch.tensor([3]))
    with pytest.raises(ValidationError):
        m.project_nonbiometric(torch.randn(1, 16), 2)
    with pytest.raises(ValidationError):
        ModelConfig(feature_dim=8, subspace_dim=16)
    with pytest.raises(ValidationError):
        DisentangleNet(_cfg(encoder_kind="pluggable"))


def test_seeded_init_is_deterministic():
    a = DisentangleNet(_cfg(seed=5)).state_dict()
    b = DisentangleNet(_cfg(seed=5)).state_dict()
    c = DisentangleNet(_cfg(seed=6)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_pluggable_encoder():
    class Enc(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.lin = torch.nn.Linear(12, 16)

        def forward(self, x, camids):
            return self.lin(x)

    m = DisentangleNet(_cfg(encoder_kind="pluggable"), encoder=Enc())
    assert m(torch.randn(2, 12), torch.tensor([0, 0])).f_i.shape == (2, 16)


def test_no_decay_names():
    m = DisentangleNet(_cfg(encoder_kind="toy-transformer", image_shape=(3, 8, 8), patch_size=4,
                            num_heads=2, depth=1))
    names = m.no_decay_names()
    assert "encoder.cls_token" in names and "encoder.pos_embed" in names and "encoder.sie" in names
    assert all(not n.endswith("weight") or "norm" in n for n in names)
    assert "head_b.weight" not in names


def _head_loss(model, x, cam, texts):
    b = model(x, cam)
    return sum(contrastive_loss(b.f_i_n[:, k], t) for k, t in enumerate(texts))


def test_grl_reverses_encoder_gradient_only():
    cfg = _cfg(seed=1)
    with_grl = DisentangleNet(cfg).double()
    without = DisentangleNet(_cfg(seed=1, use_grl=False)).double()
    x = torch.randn(6, 12, dtype=torch.float64)
    cam = torch.tensor([0, 1, 2, 0, 1, 2])
    texts = [torch.randn(6, 8, dtype=torch.float64) for _ in range(2)]
    _head_loss(with_grl, x, cam, texts).backward()
    _head_loss(without, x, cam, texts).backward()
    pw, pn = dict(with_grl.named_parameters()), dict(without.named_parameters())
    for name in pw:
        if pw[name].grad is None:
            continue
        if name.startswith("encoder."):
            assert torch.equal(pw[name].grad, -pn[name].grad), name
        else:
            assert torch.equal(pw[name].grad, pn[name].grad), name


def test_checkpoint_roundtrip(tmp_path):
    m = DisentangleNet(_cfg(seed=2))
    save_model(tmp_path / "m.bin", m, meta={"note": "x"})
    m2, arrays, meta = load_model(tmp_path / "m.bin")
    assert meta["note"] == "x"
    assert meta["model_config"] == m.cfg.to_dict()
    x, cam = torch.randn(3, 12), torch.tensor([0, 1, 2])
    assert torch.equal(m(x, cam).f_i, m2(x, cam).f_i)
    assert all(v.dtype == np.float32 for v in arrays.values())
