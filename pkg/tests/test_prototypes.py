import numpy as np
import pytest
import torch

from pixseg.prototypes import (
    PrototypeBank,
    build_known_prototypes,
    init_unknown_prototypes,
    pseudo_label,
    unknown_update_loss,
)
from pixseg.segmentation import ConfigurationError

from .conftest import unit_rows
from .gradcheck import random_unit, relative_error


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_single_class_takes_first_m_segments():
    rng = np.random.default_rng(0)
    feats = unit_rows(rng, 10, 4)
    proto = build_known_prototypes(feats[:1], feats, m=3)
    np.testing.assert_allclose(proto[0], _unit(feats[:3].mean(0)))


def _clustered(rng, centres, per, spread):
    feats = np.concatenate([c + spread * rng.standard_normal((per, len(c))) for c in centres])
    return _unit(feats)


def test_prototype_matches_top_m_oracle():
    rng = np.random.default_rng(1)
    text = unit_rows(rng, 3, 8)
    feats = _clustered(rng, text, 40, 0.05)
    protos = build_known_prototypes(text, feats, m=16)
    sims = feats @ text.T
    probs = np.exp(sims) / np.exp(sims).sum(1, keepdims=True)
    for c in range(3):
        order = sorted(range(len(feats)), key=lambda s: (-probs[s, c], s))[:16]
        want = _unit(feats[order].mean(0))
        cluster = _unit(feats[40 * c : 40 * (c + 1)].mean(0))
        np.testing.assert_allclose(protos[c], want, atol=1e-12)
        assert protos[c] @ cluster > 0.99


def test_top_m_stability_between_m1_and_m64(palette):
    from pixseg.segmentation import pool_segments
    from pixseg.vlm import PromptEnsemble, encode_classes, encode_dense, stub_encoder
    from pixseg.synth import render_scene

    classes = [(e.name, e.color) for e in palette[:2]]
    dense, text = stub_encoder(palette[:2], noise_sigma=0.3, seed=0)
    rng = np.random.default_rng(0)
    feats = []
    for _ in range(20):
        img, _ = render_scene(rng, size=32, classes=classes)
        ids = (np.arange(32)[:, None] // 8) * 4 + np.arange(32)[None, :] // 8
        feats.append(pool_segments(encode_dense(dense, img), ids).embeddings)
    feats = np.concatenate(feats)
    t = encode_classes(["red", "green"], PromptEnsemble(("a {}.",)), text)
    p1 = build_known_prototypes(t, feats, m=1)
    p64 = build_known_prototypes(t, feats, m=64)
    assert np.mean((p1 * p64).sum(1)) >= 0.92


def test_known_prototypes_need_m_segments():
    with pytest.raises(ConfigurationError):
        build_known_prototypes(np.eye(2), np.eye(2), m=3)


def test_unknown_selection():
    feats = unit_rows(np.random.default_rng(2), 10, 4)
    protos, idx = init_unknown_prototypes(feats, u=10, seed=0)
    assert sorted(idx) == list(range(10))
    a, ia = init_unknown_prototypes(feats, u=4, seed=7)
    b, ib = init_unknown_prototypes(feats, u=4, seed=7)
    np.testing.assert_array_equal(ia, ib)
    oracle = np.random.default_rng(7).choice(10, size=4, replace=False)
    np.testing.assert_array_equal(ia, oracle)
    np.testing.assert_allclose(a, feats[oracle])
    with pytest.raises(ConfigurationError):
        init_unknown_prototypes(feats, u=11)


def test_pseudo_label_simple_cases():
    protos = np.eye(4)[:3]
    assert pseudo_label(protos[1], protos) == 1
    f = np.array([0.0, 0.0, 0.3, 0.9])  # orthogonal to all but prototype 2
    assert pseudo_label(f, protos) == 2
    # exact tie between prototypes 0 and 1 goes to 0
    assert pseudo_label(np.array([1.0, 1.0, 0, 0]), protos) == 0


def test_pseudo_label_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    protos = unit_rows(rng, 8, 5)
    feats = unit_rows(rng, 1000, 5)
    got = pseudo_label(feats, protos)
    for f, g in zip(feats, got):
        best, arg = -np.inf, -1
        for j, p in enumerate(protos):
            s = float(f @ p)
            if s > best:
                best, arg = s, j
        assert g == arg


def test_unknown_loss_values():
    c = torch.tensor([[0.6, 0.8]], dtype=torch.float64, requires_grad=True)
    same = torch.tensor([[0.6, 0.8], [0.6, 0.8]], dtype=torch.float64)
    assert unknown_update_loss(c, same, [0, 0]).item() == pytest.approx(0.0, abs=1e-12)
    anti = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    assert unknown_update_loss(c, anti, [0, 0]).item() == pytest.approx(1.0)
    empty = unknown_update_loss(c, torch.zeros(0, 2, dtype=torch.float64), [])
    assert empty.item() == 0.0


def test_unknown_loss_gradient():
    rng = np.random.default_rng(4)
    for _ in range(5):
        feats = random_unit(rng, 6, 4)
        assign = rng.integers(0, 3, 6)
        c = random_unit(rng, 3, 4)
        assert relative_error(lambda x: unknown_update_loss(x, feats, assign), c) < 1e-4


def test_unknown_prototype_reaches_feature_mean():
    rng = np.random.default_rng(5)
    feats = random_unit(rng, 5, 6)
    c = torch.nn.Parameter(random_unit(rng, 1, 6))
    opt = torch.optim.SGD([c], lr=0.5)
    for _ in range(500):
        opt.zero_grad()
        unknown_update_loss(c, feats, np.zeros(5, int)).backward()
        opt.step()
        with torch.no_grad():
            c.copy_(torch.nn.functional.normalize(c, dim=1))
    mean = torch.nn.functional.normalize(feats.mean(0), dim=0)
    assert float(c.detach()[0] @ mean) >= 0.999


def test_bank_round_trip_and_hash(tmp_path):
    rng = np.random.default_rng(6)
    bank = PrototypeBank(unit_rows(rng, 3, 5), ["a", "bé", "c"], unit_rows(rng, 4, 5), config_hash="abc123")
    bank.save(tmp_path / "bank.bin")
    back = PrototypeBank.load(tmp_path / "bank.bin")
    assert back.names == ["a", "bé", "c"] and back.config_hash == "abc123"
    assert (back.k, back.u, back.dim, back.L) == (3, 4, 5, 7)
    np.testing.assert_array_equal(back.as_numpy(), bank.as_numpy())
    raw = (tmp_path / "bank.bin").read_bytes()
    assert raw.startswith(b"PXPROTO\x00")


def test_bank_rejects_corrupt_files(tmp_path):
    bank = PrototypeBank(np.eye(2), ["x", "y"], np.eye(2))
    bank.save(tmp_path / "b.bin")
    raw = (tmp_path / "b.bin").read_bytes()
    for bad in (raw[:-8], b"NOTABANK" + raw[8:], raw[:10]):
        (tmp_path / "bad.bin").write_bytes(bad)
        with pytest.raises(ValueError):
            PrototypeBank.load(tmp_path / "bad.bin")


def test_known_part_is_frozen():
    bank = PrototypeBank(np.eye(3)[:2], ["x", "y"], np.eye(3)[2:])
    assert not bank.known.requires_grad and bank.unknown.requires_grad
    with pytest.raises(ValueError):
        bank.known_array[0, 0] = 5.0
