import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from styleret.promptbank import (BankError, LookupResult, bank_bytes, bank_from_bytes, expand_sequence,
                                 key_alignment_loss, load_bank, lookup, new_bank, save_bank, score)


def brute_force_subset(gammas, n):
    """Lexicographically first n-subset minimizing the summed gamma."""
    best, best_ids = math.inf, None
    for ids in itertools.combinations(range(len(gammas)), n):
        total = sum(gammas[i] for i in ids)
        if total < best - 1e-12:
            best, best_ids = total, ids
    return best, best_ids


def test_score_closed_forms():
    assert score([1, 0], [1, 0]) == pytest.approx(0.0, abs=1e-15)
    assert score([1, 0], [0, 1]) == pytest.approx(1.0)
    assert score(np.array([1, 1]) / math.sqrt(2), [1, 0]) == pytest.approx(1 - math.sqrt(2) / 2, abs=1e-12)


def test_score_errors():
    with pytest.raises(BankError):
        score([1, 0], [1, 0, 0])
    with pytest.raises(BankError):
        score([0, 0], [1, 0])
    with pytest.raises(BankError):
        score([np.nan, 0], [1, 0])


def test_single_entry_always_selected():
    bank = new_bank(1, 1, 2, 4)
    for seed in range(5):
        p = np.random.default_rng(seed).normal(size=4)
        assert lookup(bank, p).selected_ids == [0]


def test_same_seed_same_bank():
    assert new_bank(5, 2, 3, 8, seed=9).content_hash() == new_bank(5, 2, 3, 8, seed=9).content_hash()
    assert new_bank(5, 2, 3, 8, seed=9).content_hash() != new_bank(5, 2, 3, 8, seed=10).content_hash()


def test_prototype_initialization():
    rng = np.random.default_rng(0)
    protos = [v / np.linalg.norm(v) for v in rng.normal(size=(5, 8))]
    bank = new_bank(10, 3, 2, 8, init_prototypes=protos)
    keys = bank.keys.detach().numpy()
    np.testing.assert_array_equal(keys[:5], np.array(protos, dtype=np.float32))
    assert np.all(np.abs(keys[5:]) < 0.1)


def test_shapes_and_modes():
    deep = new_bank(4, 2, 3, 8, "deep", tokens_per_entry=2)
    shallow = new_bank(4, 2, 3, 8, "shallow", tokens_per_entry=2)
    assert tuple(deep.values.shape) == (4, 3, 2, 8)
    assert tuple(shallow.values.shape) == (4, 1, 2, 8)
    assert deep.prompt_tokens([0, 1]).shape == (3, 4, 8)
    with pytest.raises(BankError):
        new_bank(3, 4, 2, 8)
    with pytest.raises(BankError):
        new_bank(3, 0, 2, 8)


def test_lookup_ordering_example():
    bank = new_bank(3, 2, 1, 2)
    target = np.array([1.0, 0.0])
    # keys placed so that gamma = (0.1, 0.5, 0.2)
    keys = [[1 - g, math.sqrt(1 - (1 - g) ** 2)] for g in (0.1, 0.5, 0.2)]
    with torch.no_grad():
        bank.keys.copy_(torch.tensor(keys))
    res = lookup(bank, target)
    assert res.selected_ids == [0, 2]
    np.testing.assert_allclose(res.scores, [0.1, 0.2], atol=1e-6)


def test_tie_goes_to_lower_id():
    bank = new_bank(4, 1, 1, 2)
    with torch.no_grad():
        bank.keys.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]]))
    assert lookup(bank, [1.0, 0.0]).selected_ids == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 4))
def test_lookup_equals_subset_argmin(seed, N, n):
    n = min(n, N)
    bank = new_bank(N, n, 1, 6, seed=seed)
    p = np.random.default_rng(seed).normal(size=6)
    res = lookup(bank, p)
    gam = [score(p, k) for k in bank.keys.detach().numpy()]
    best, ids = brute_force_subset(gam, n)
    assert tuple(sorted(res.selected_ids)) == ids
    assert sum(res.scores) == pytest.approx(best, abs=1e-9)


def test_expand_length_and_tail_permutation():
    bank = new_bank(6, 4, 2, 8, seed=1)
    res = lookup(bank, np.ones(8))
    cls = torch.zeros(8)
    x = torch.randn(16, 8)
    out = expand_sequence(cls, res, 0, x, bank)
    assert out.shape == (21, 8)
    perm = torch.randperm(16)
    out2 = expand_sequence(cls, res, 0, x[perm], bank)
    torch.testing.assert_close(out2[:5], out[:5])
    torch.testing.assert_close(out2[5:], out[5:][perm])


def test_shallow_layer_error():
    bank = new_bank(4, 2, 3, 8, "shallow")
    res = lookup(bank, np.ones(8))
    with pytest.raises(BankError):
        expand_sequence(torch.zeros(8), res, 1, torch.zeros(16, 8), bank)
    deep = new_bank(4, 2, 3, 8, "deep")
    with pytest.raises(BankError):
        expand_sequence(torch.zeros(8), lookup(deep, np.ones(8)), 3, torch.zeros(16, 8), deep)


def test_alignment_loss_cases():
    bank = new_bank(3, 2, 1, 4)
    p = np.array([1.0, 2.0, 0.0, -1.0])
    with torch.no_grad():
        bank.keys.copy_(torch.tensor(np.stack([p, 2 * p, -p]), dtype=torch.float32))
    res = lookup(bank, p)
    assert key_alignment_loss(p, res, bank).item() == pytest.approx(0.0, abs=1e-6)

    one = new_bank(1, 1, 1, 2)
    with torch.no_grad():
        one.keys.copy_(torch.tensor([[0.0, 1.0]]))
    assert key_alignment_loss([1.0, 0.0], lookup(one, [1.0, 0.0]), one).item() == pytest.approx(1.0)


def test_alignment_loss_resummation():
    bank = new_bank(8, 4, 1, 6, seed=4)
    p = np.random.default_rng(4).normal(size=6)
    res = lookup(bank, p)
    keys = bank.keys.detach().numpy().astype(np.float64)
    expected = sum(score(p, keys[i]) for i in res.selected_ids)
    assert key_alignment_loss(p, res, bank).item() == pytest.approx(expected, abs=1e-6)


def test_round_trip_and_mutation(tmp_path):
    bank = new_bank(5, 2, 3, 8, "shallow", tokens_per_entry=2, seed=3)
    path = tmp_path / "b.bin"
    save_bank(bank, path)
    before = bank.content_hash()
    with torch.no_grad():
        bank.values += 1.0
    loaded = load_bank(path)
    assert loaded.content_hash() == before != bank.content_hash()
    assert loaded.insertion_mode == "shallow" and loaded.tokens_per_entry == 2


def test_truncated_bank_names_missing_bytes():
    raw = bank_bytes(new_bank(4, 2, 2, 8))
    with pytest.raises(BankError, match="missing 12 bytes"):
        bank_from_bytes(raw[:-12])
    with pytest.raises(BankError, match="magic"):
        bank_from_bytes(b"XXXX" + raw[4:])


def test_prompt_tokens_carry_gradient():
    bank = new_bank(4, 2, 2, 8)
    bank.prompt_tokens([1, 3]).sum().backward()
    g = bank.values.grad
    assert g[[1, 3]].abs().sum() > 0 and g[[0, 2]].abs().sum() == 0
