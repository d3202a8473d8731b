import types

import numpy as np
import pytest
import torch

from pixseg.segmentation import ConfigurationError
from pixseg.vlm import (
    PLACEHOLDER,
    ClipResNetDense,
    EncoderUnavailableError,
    FeatureCache,
    PromptEnsemble,
    attnpool_dense,
    encode_class_text,
    encode_dense,
    load_clip_adapter,
    load_palette,
    save_palette,
    stub_encoder,
)

from .conftest import COLORS


def _image(*colors, size=8):
    img = np.zeros((size, size, 3))
    step = size // len(colors)
    for i, c in enumerate(colors):
        img[:, i * step : (i + 1) * step] = COLORS[c]
    return img


def test_default_prompts():
    ens = PromptEnsemble.default()
    assert len(ens) == 85
    assert len(set(ens.templates)) == 85
    assert all(t.count(PLACEHOLDER) == 1 for t in ens.templates)


def test_template_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        PromptEnsemble(("no placeholder here",))
    p = tmp_path / "t.txt"
    p.write_text("# comment\na {}.\n\nthe {} again.\n")
    assert PromptEnsemble.from_file(p).fill("cat") == ["a cat.", "the cat again."]


def test_single_template_is_normalised_embedding(stub):
    _, text = stub
    got = encode_class_text("red", PromptEnsemble(("a photo of a {}.",)), text)
    np.testing.assert_allclose(got, text.encode("a photo of a red."))


def test_duplicate_templates_change_nothing(palette):
    _, text = stub_encoder(palette, text_noise=0.3)
    one = encode_class_text("green", PromptEnsemble(("a {} thing.", "art of the {}.")), text)
    dup = encode_class_text("green", PromptEnsemble(("a {} thing.", "a {} thing.", "art of the {}.",
                                                     "art of the {}.")), text)
    np.testing.assert_allclose(one, dup, atol=1e-12)


def test_three_template_mean_oracle(palette):
    _, text = stub_encoder(palette, text_noise=0.5)
    templates = ("a {}.", "a big {}.", "a photo of the {}.")
    vecs = [text.encode(t.replace("{}", "blue")) for t in templates]
    mean = (vecs[0] + vecs[1] + vecs[2]) / 3
    got = encode_class_text("blue", PromptEnsemble(templates), text)
    np.testing.assert_allclose(got, mean / np.linalg.norm(mean), atol=1e-12)


def test_stub_text_lookup(stub, palette):
    _, text = stub
    np.testing.assert_allclose(text.encode("red"), palette[0].vector)
    np.testing.assert_allclose(text.encode("a photo of a Yellow thing."), palette[3].vector)
    with pytest.warns(UserWarning):
        fallback = text.encode("a photo of a cat.")
    assert np.linalg.norm(fallback) == pytest.approx(1.0)


def test_stub_pure_red_image(stub, palette):
    dense, _ = stub
    out = encode_dense(dense, _image("red"))
    np.testing.assert_allclose(out, np.broadcast_to(palette[0].vector, out.shape), atol=1e-12)


def test_stub_half_planes(stub, palette):
    dense, _ = stub
    out = encode_dense(dense, _image("red", "blue"))
    np.testing.assert_allclose(out[:, :4], np.broadcast_to(palette[0].vector, (8, 4, 16)), atol=1e-12)
    np.testing.assert_allclose(out[:, 4:], np.broadcast_to(palette[2].vector, (8, 4, 16)), atol=1e-12)


def test_stub_noise_small_and_seeded(palette):
    dense, _ = stub_encoder(palette, noise_sigma=0.05, seed=3)
    img = _image("green", "yellow")
    a, b = encode_dense(dense, img), encode_dense(dense, img)
    np.testing.assert_array_equal(a, b)
    target = np.where(np.arange(8)[None, :, None] < 4, palette[1].vector, palette[3].vector)
    cos = (a * target).sum(-1)
    assert cos.min() > 0.99 and cos.max() < 1.0


def test_stride_and_divisibility(palette):
    dense, _ = stub_encoder(palette, stride=4)
    out = encode_dense(dense, _image("red", "blue"))
    assert out.shape == (8, 8, 16)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0)
    with pytest.raises(ValueError):
        encode_dense(dense, np.zeros((10, 8, 3)))


def test_palette_round_trip(tmp_path, palette):
    save_palette(tmp_path / "p.json", palette)
    back = load_palette(tmp_path / "p.json")
    assert [e.name for e in back] == [e.name for e in palette]
    for a, b in zip(back, palette):
        np.testing.assert_array_equal(a.vector, b.vector)


def test_feature_cache(tmp_path, stub):
    dense, _ = stub
    cache = FeatureCache(tmp_path, dense)
    img = _image("red", "green")
    first = cache.get("img0", img)
    assert (tmp_path / dense.fingerprint() / "img0.npy").exists()
    np.testing.assert_array_equal(cache.get("img0", np.zeros_like(img)), first)


def test_attnpool_dense_is_two_linear_maps():
    torch.manual_seed(0)
    pool = types.SimpleNamespace(v_proj=torch.nn.Linear(6, 5), c_proj=torch.nn.Linear(5, 4))
    feats = torch.randn(1, 6, 3, 2)
    out = attnpool_dense(pool, feats)
    want = pool.c_proj(pool.v_proj(feats.permute(0, 2, 3, 1))).permute(0, 3, 1, 2)
    torch.testing.assert_close(out, want)


def test_clip_adapter_with_fake_tower():
    torch.manual_seed(0)

    class Visual(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = torch.nn.Conv2d(3, 6, 32, stride=32)
            self.layer1 = self.layer2 = self.layer3 = self.layer4 = torch.nn.Identity()
            self.attnpool = types.SimpleNamespace(v_proj=torch.nn.Linear(6, 6), c_proj=torch.nn.Linear(6, 4))

        def stem(self, x):
            return self.conv(x)

    model = torch.nn.Module()
    model.visual = Visual()
    enc = ClipResNetDense(model, tokenizer=None, name="fake")
    out = encode_dense(enc, np.random.default_rng(0).random((64, 32, 3)))
    assert out.shape == (64, 32, 4)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0)


def test_clip_adapter_rejects_non_resnet():
    with pytest.raises(EncoderUnavailableError):
        load_clip_adapter("ViT-B-16")
