import numpy as np
import pytest
import torch

from fdutil import fd_check
from tbpslab.errors import CheckpointMismatch, DegenerateBox, ShapeMismatch, UnknownToken
from tbpslab.geometry import BoundingBox
from tbpslab.model import (
    DualEncoder,
    ModelConfig,
    Tokenizer,
    batch_texts,
    load_checkpoint,
    save_checkpoint,
    similarity,
)
from tbpslab.synthetic import describe_person, PersonAttributes


def test_encode_image_contract(model, sample_scene):
    fmap, emb = model.encode_image(sample_scene, sample_scene.persons[0].box)
    assert fmap.tokens.shape == (32, model.cfg.dim)
    assert fmap.attention.shape == (32, 32)
    rows = fmap.attention.sum(dim=1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)
    assert abs(float(emb.norm()) - 1.0) < 1e-6


def test_encode_image_deterministic(model, sample_scene):
    box = sample_scene.persons[0].box
    f1, e1 = model.encode_image(sample_scene, box)
    f2, e2 = model.encode_image(sample_scene, box)
    assert torch.equal(f1.tokens, f2.tokens)
    assert torch.equal(f1.attention, f2.attention)
    assert torch.equal(e1, e2)


def test_encode_image_degenerate_box(model, sample_scene):
    with pytest.raises(DegenerateBox):
        model.encode_image(sample_scene, BoundingBox(5, 5, 0.5, 10))


def test_encode_text_contract(model, tokenizer):
    attrs = PersonAttributes(0, "red", "blue", "none", 1.0)
    text = describe_person(attrs, 0)
    tokens, emb = model.encode_text(text, tokenizer)
    assert tokens.shape[1] == model.cfg.dim
    assert abs(float(emb.norm()) - 1.0) < 1e-6
    tokens2, emb2 = model.encode_text(text, tokenizer)
    assert torch.equal(emb, emb2) and torch.equal(tokens, tokens2)


def test_encode_text_color_sensitivity(model, tokenizer):
    base = "a person wearing a red shirt and blue trousers"
    other = "a person wearing a green shirt and blue trousers"
    _, e1 = model.encode_text(base, tokenizer)
    _, e2 = model.encode_text(other, tokenizer)
    assert float((e1 - e2).norm()) > 0


def test_unknown_token(model, tokenizer):
    with pytest.raises(UnknownToken):
        model.encode_text("a person wearing a tartan shirt", tokenizer)


def test_similarity_contract():
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = torch.from_numpy(rng.normal(size=8))
        u = u / u.norm()
        v = torch.from_numpy(rng.normal(size=8))
        v = v / v.norm()
        assert float(similarity(u, u)) == pytest.approx(1.0, abs=1e-6)
        assert float(similarity(u, -u)) == pytest.approx(-1.0, abs=1e-6)
        assert float(similarity(u, v)) == pytest.approx(float((u * v).sum()), abs=1e-12)


def test_decode_contract(model, tokenizer, sample_scene):
    fmap, _ = model.encode_image(sample_scene, sample_scene.persons[0].box)
    txt_tokens, _ = model.encode_text("a person in a red top and blue pants", tokenizer)
    out1 = model.decode(fmap.tokens.unsqueeze(0), txt_tokens.unsqueeze(0))
    out2 = model.decode(fmap.tokens.unsqueeze(0), txt_tokens.unsqueeze(0))
    assert out1.shape == (1, 32, model.cfg.dim)
    assert torch.equal(out1, out2)
    with pytest.raises(ShapeMismatch):
        model.decode(fmap.tokens[:16].unsqueeze(0), txt_tokens.unsqueeze(0))


def test_decode_gradients(sample_scene, tokenizer):
    model = DualEncoder(ModelConfig(), init_seed=9)
    fmap, _ = model.encode_image(sample_scene, sample_scene.persons[0].box)
    txt_tokens, _ = model.encode_text("a person in a red top and blue pants", tokenizer)
    vis = fmap.tokens.detach()
    txt = txt_tokens.detach()
    dec_params = [p for n, p in model.named_parameters() if n.startswith("dec_")]

    def loss_fn():
        return (model.decode(vis.unsqueeze(0), txt.unsqueeze(0)) ** 2).mean()

    fd_check(loss_fn, dec_params, n_coords=20, rng=np.random.default_rng(5), h=1e-3)


def test_text_pad_mask_isolation(model, tokenizer):
    # a batched text's embedding must match its solo encoding despite padding
    texts = [
        "a person in a red top and blue pants",
        "a person wearing a green shirt and white trousers wearing a hat",
    ]
    ids, pad = batch_texts(texts, tokenizer)
    _, both = model.encode_text_batch(ids, pad)
    _, solo = model.encode_text(texts[0], tokenizer)
    assert torch.allclose(both[0], solo, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path, model, sample_scene):
    path = tmp_path / "ck.pt"
    save_checkpoint(path, model, step=123, extra={"config_hash": "abc", "dataset_hash": "d"})
    loaded, manifest = load_checkpoint(path)
    assert manifest["step"] == 123
    _, e1 = model.encode_image(sample_scene, sample_scene.persons[0].box)
    _, e2 = loaded.encode_image(sample_scene, sample_scene.persons[0].box)
    assert torch.equal(e1, e2)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, expected_hash="other")


def test_seeded_init_is_reproducible():
    a = DualEncoder(ModelConfig(), init_seed=4)
    b = DualEncoder(ModelConfig(), init_seed=4)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na
    c = DualEncoder(ModelConfig(), init_seed=5)
    assert any(
        not torch.equal(pa, pc) for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )
