import numpy as np
import pytest
import torch

from styleret.encoder import (Backbone, BackboneConfig, EncoderError, embed_batch, forward,
                              load_backbone, save_backbone)
from styleret.promptbank import lookup, new_bank
from styleret.synthdata import StyleTag
from styleret.training import WarmupConfig, warmup_backbone


def test_patch_count_and_zero_image():
    bb = Backbone(BackboneConfig())
    tokens = bb.patch_embed(np.zeros((32, 32, 3)))
    assert tokens.shape == (1, 16, 32)
    expected = bb.patch_proj.bias + bb.vision.pos[1:]
    torch.testing.assert_close(tokens[0], expected)


def test_identical_images_identical_tokens(small_dataset):
    bb = Backbone(BackboneConfig(seed=1))
    img = small_dataset.sample(0, 1, "natural").pixels
    assert torch.equal(bb.patch_embed(img), bb.patch_embed(img.copy()))


def test_text_single_token_difference(small_dataset):
    bb = Backbone(BackboneConfig())
    a = small_dataset.sample(0, 0, "text").tokens.copy()
    b = a.copy()
    b[3] = 40
    ea, _ = bb.tokenize_text(a)
    eb, _ = bb.tokenize_text(b)
    diff = (ea - eb).abs().sum(-1)[0]
    assert diff[3] > 0 and diff[torch.arange(20) != 3].sum() == 0


def test_pad_tokens_receive_no_attention(small_dataset):
    bb = Backbone(BackboneConfig()).freeze()
    tokens = small_dataset.sample(1, 1, "text").tokens
    x_e, mask = bb.tokenize_text(tokens)
    weights, _ = bb.text.blocks[0].attention(torch.randn(1, 21, 32),
                                            torch.cat([torch.zeros(1, 1, dtype=torch.bool), mask], 1))
    assert weights[..., 1:][..., mask[0]].abs().max() == 0
    # changing a pad id would change the output if pads were attended
    alt = tokens.copy()
    e1 = bb.encode_texts(alt)
    with torch.no_grad():
        bb.tok_emb.weight[0] += 5.0
    torch.testing.assert_close(bb.encode_texts(alt), e1)


def test_all_pad_text_uses_cls_only():
    bb = Backbone(BackboneConfig()).freeze()
    e1 = bb.encode_texts(np.zeros(20, np.int64))
    with torch.no_grad():
        bb.tok_emb.weight.add_(torch.randn_like(bb.tok_emb.weight))
    torch.testing.assert_close(bb.encode_texts(np.zeros(20, np.int64)), e1)


def test_output_unit_norm(small_dataset):
    bb = Backbone(BackboneConfig()).freeze()
    bank = new_bank(6, 2, 4, 32, seed=0)
    for style in small_dataset.styles:
        payload = np.stack([s.pixels if s.modality == "image" else s.tokens
                            for s in small_dataset.samples(style)])
        ids = np.tile([0, 3], (len(payload), 1))
        for b in (None, bank):
            out = embed_batch(bb, style.modality, payload, b, None if b is None else ids)
            np.testing.assert_allclose(out.norm(dim=-1).detach().numpy(), 1.0, atol=1e-6)


def test_zero_prompts_sequence_length(small_dataset):
    bb = Backbone(BackboneConfig()).freeze()
    bank = new_bank(6, 4, 4, 32)
    with torch.no_grad():
        bank.values.zero_()
    seen = []
    hook = bb.vision.blocks[0].register_forward_pre_hook(lambda m, a: seen.append(a[0].shape[1]))
    tokens = bb.patch_embed(small_dataset.sample(0, 0, "natural").pixels)[0]
    base = forward(tokens, bb)
    prompted = forward(tokens, bb, bank, lookup(bank, np.ones(32)))
    hook.remove()
    assert seen == [17, 21]
    assert base.shape == prompted.shape == (32,)


def test_bit_identical_runs(small_dataset):
    img = small_dataset.sample(2, 1, "sketch").pixels
    a = Backbone(BackboneConfig(seed=4)).freeze().encode_images(img)
    b = Backbone(BackboneConfig(seed=4)).freeze().encode_images(img)
    assert torch.equal(a, b)


def test_seeded_init_leaves_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    Backbone(BackboneConfig(seed=9))
    assert torch.equal(torch.rand(3), expected)


def test_prompts_shared_between_towers(small_dataset):
    bb = Backbone(BackboneConfig()).freeze()
    bank = new_bank(6, 2, 4, 32)
    grads = []
    # a fixed projection; the plain sum of a layer-normed readout is constant
    w = torch.randn(32, generator=torch.Generator().manual_seed(0))
    for modality, style in (("image", "natural"), ("text", "text")):
        bank.zero_grad()
        s = small_dataset.sample(0, 0, style)
        payload = s.pixels if modality == "image" else s.tokens
        embed_batch(bb, modality, payload[None], bank, np.array([[1, 4]]))[0].dot(w).backward()
        grads.append(bank.values.grad.clone())
    for g in grads:
        assert g[[1, 4]].abs().sum() > 0 and g[[0, 2, 3, 5]].abs().sum() == 0


def test_config_errors():
    with pytest.raises(EncoderError):
        Backbone(BackboneConfig(d=30, heads=4))
    with pytest.raises(EncoderError):
        Backbone(BackboneConfig(patch_size=5))
    bb = Backbone(BackboneConfig())
    with pytest.raises(EncoderError):
        bb.patch_embed(np.zeros((16, 16, 3)))
    with pytest.raises(EncoderError):
        bb.tokenize_text(np.zeros(10, np.int64))
    with pytest.raises(EncoderError):
        forward(torch.zeros(16, 32), bb, new_bank(4, 2, 2, 32), lookup(new_bank(4, 2, 2, 32), np.ones(32)))


def test_persistence(tmp_path):
    bb = Backbone(BackboneConfig(layers=2, d=16, heads=2, seed=3))
    save_backbone(bb, tmp_path / "bb.bin")
    loaded = load_backbone(tmp_path / "bb.bin")
    assert loaded.content_hash() == bb.content_hash() and loaded.frozen
    raw = (tmp_path / "bb.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    with pytest.raises(EncoderError, match="size mismatch"):
        load_backbone(tmp_path / "short.bin")


def test_zero_epoch_warmup_is_seeded_init(small_dataset):
    cfg = BackboneConfig(layers=2, d=16, heads=2, seed=6)
    bb, losses = warmup_backbone(small_dataset, cfg, WarmupConfig(epochs=0))
    assert losses == [] and bb.frozen
    assert bb.content_hash() == Backbone(cfg).content_hash()


def test_warmup_reduces_loss(default_dataset):
    cfg = BackboneConfig(layers=2, d=16, heads=2, seed=0)
    bb, losses = warmup_backbone(default_dataset, cfg, WarmupConfig(epochs=12, batch_size=32))
    assert losses[-1] < losses[0]
    assert bb.frozen
