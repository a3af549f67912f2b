import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from styleret.prototype import (PrototypeEncoder, PrototypeError, compute_prototype,
                                embed_style_sample, query_prototype, style_prototypes)
from styleret.synthdata import StyleTag, SynthImage


def test_identical_samples_identical_vectors(small_dataset, enc16):
    s = small_dataset.sample(1, 2, "art")
    np.testing.assert_array_equal(embed_style_sample(s, enc16), embed_style_sample(s, enc16))


def test_zero_image_gives_bias():
    for seed in (0, 1):
        enc = PrototypeEncoder(d=8, seed=seed)
        zero = SynthImage(np.zeros((32, 32, 3), np.float32), 0, 0, StyleTag.NATURAL)
        np.testing.assert_allclose(embed_style_sample(zero, enc), enc.img_b, atol=1e-12)


def test_distinct_samples_not_parallel(small_dataset, enc16):
    samples = [small_dataset.sample(0, 0, "natural"), small_dataset.sample(1, 1, "sketch"),
               small_dataset.sample(2, 3, "text")]
    vecs = [embed_style_sample(s, enc16) for s in samples]
    for i in range(3):
        for j in range(i + 1, 3):
            cos = vecs[i] @ vecs[j] / np.linalg.norm(vecs[i]) / np.linalg.norm(vecs[j])
            assert cos < 1.0


def test_output_shape_and_finite(small_dataset, enc16):
    for style in small_dataset.styles:
        v = embed_style_sample(small_dataset.sample(0, 1, style), enc16)
        assert v.shape == (16,) and np.all(np.isfinite(v))


def test_encoder_parameters_read_only(enc16):
    with pytest.raises(ValueError):
        enc16.img_w[0, 0] = 1.0


def test_single_feature_prototype():
    v = np.array([3.0, 4.0])
    np.testing.assert_allclose(compute_prototype([v]).vector, v / 5.0)


def test_antipodal_features_degenerate():
    v = np.array([1.0, -2.0, 0.5])
    with pytest.raises(PrototypeError, match="degenerate"):
        compute_prototype([v, -v])


@settings(max_examples=50)
@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)))
def test_prototype_matches_resummation(feats):
    mean = np.zeros(6)
    for row in feats:
        for j, x in enumerate(row):
            mean[j] += x
    mean /= 3
    norm = np.sqrt(sum(x * x for x in mean))
    if norm < 1e-6:
        return
    proto = compute_prototype(feats)
    np.testing.assert_allclose(proto.vector, mean / norm, atol=1e-12)
    assert abs(np.linalg.norm(proto.vector) - 1) < 1e-6
    assert proto.m == 3


def test_query_prototype_is_normalized_embedding(small_dataset, enc16):
    s = small_dataset.sample(3, 0, "lowres")
    e = embed_style_sample(s, enc16)
    np.testing.assert_allclose(query_prototype(s, enc16), e / np.linalg.norm(e), atol=1e-12)
    np.testing.assert_array_equal(query_prototype(s, enc16), query_prototype(s, enc16))


def test_styled_vs_natural_prototype_cosine_finite(small_dataset, enc16):
    for style in (StyleTag.SKETCH, StyleTag.ART, StyleTag.LOWRES):
        a = query_prototype(small_dataset.sample(1, 1, style), enc16)
        b = query_prototype(small_dataset.sample(1, 1, "natural"), enc16)
        assert np.isfinite(a @ b)


def test_style_prototypes_groups(small_dataset, enc16):
    protos = style_prototypes({s: small_dataset.samples(s, "train") for s in small_dataset.styles},
                              enc16, per_style=2)
    assert len(protos) == 2 * len(small_dataset.styles)
    assert all(abs(np.linalg.norm(p.vector) - 1) < 1e-6 for p in protos)


def test_all_pad_text_rejected(enc16):
    with pytest.raises(PrototypeError):
        enc16.embed_text(np.zeros(20, np.int64))
