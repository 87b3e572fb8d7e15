import pytest
import torch

from nestkd.errors import ConfigError
from nestkd.heads import HeadBank, build_head_bank, nesting_levels, project_cls, project_patches


def test_nesting_levels():
    assert nesting_levels(768, 5) == (768, 384, 192, 96, 48)
    assert nesting_levels(96, 5) == (96, 48, 24, 12, 6)
    assert nesting_levels(40, 1) == (40,)
    with pytest.raises(ConfigError):
        nesting_levels(8, 5)


def test_head_counts():
    bank = build_head_bank(96, [32, 16, 8], nesting_levels(96, 5))
    assert len(bank) == 30
    assert len(build_head_bank(96, [32], (96,))) == 2


def test_input_layer_params():
    bank = build_head_bank(96, {"t": 32}, (96, 48, 24))
    for m in (96, 48, 24):
        first = bank.head("t", "cls", m)[0]
        assert sum(p.numel() for p in first.parameters()) == m * 32 + 32


def test_level_validation():
    with pytest.raises(ConfigError):
        build_head_bank(96, [8], (128, 64))
    with pytest.raises(ConfigError):
        HeadBank(96, {"t": 8}, (96, 96))
    with pytest.raises(ConfigError):
        HeadBank(96, {"t": 8}, (48, 24))


def test_unknown_head():
    bank = build_head_bank(96, [8], (96, 48))
    with pytest.raises(KeyError):
        project_cls(bank, torch.zeros(1, 96), "teacher0", 24)
    with pytest.raises(KeyError):
        project_cls(bank, torch.zeros(1, 96), "other", 96)


def test_seeded_init():
    a = build_head_bank(96, [8], (96, 48), seed=1)
    b = build_head_bank(96, [8], (96, 48), seed=1)
    c = build_head_bank(96, [8], (96, 48), seed=2)
    for (k, p), q, r in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(p, q)
    assert not all(torch.equal(p, r) for p, r in zip(a.state_dict().values(), c.state_dict().values()))


def test_prefix_contract():
    bank = build_head_bank(96, [16], (96, 48, 6))
    x = torch.randn(4, 96)
    for m in (48, 6):
        y = x.clone()
        y[:, m:] = torch.randn(4, 96 - m) * 100
        assert torch.equal(project_cls(bank, x, "teacher0", m), project_cls(bank, y, "teacher0", m))
    y = x.clone()
    y[:, 90] += 1
    assert not torch.equal(project_cls(bank, x, "teacher0", 96), project_cls(bank, y, "teacher0", 96))


def test_zero_input_bias_pathway():
    bank = build_head_bank(16, [8], (16,))
    head = bank.head("teacher0", "cls", 16)
    lin1, act, lin2, act2, lin3 = head
    ref = lin3(act2(lin2(act(lin1.bias))))
    torch.testing.assert_close(project_cls(bank, torch.zeros(16), "teacher0", 16), ref)


def test_patch_heads_tokenwise():
    bank = build_head_bank(32, [8], (32, 16))
    tok = torch.randn(2, 9, 32)
    out = project_patches(bank, tok, "teacher0", 16)
    assert out.shape == (2, 9, 8)
    looped = torch.stack([torch.stack([project_patches(bank, tok[b, i], "teacher0", 16) for i in range(9)])
                          for b in range(2)])
    torch.testing.assert_close(out, looped)
    same = project_patches(bank, tok[:, :1].expand(2, 9, 32), "teacher0", 16)
    assert torch.equal(same[:, 0], same[:, 5])
    changed = tok.clone()
    changed[0, 3] += 1
    diff = (project_patches(bank, changed, "teacher0", 16) != out).any(dim=-1)
    assert diff.sum() == 1 and diff[0, 3]


def test_archive_entries_roundtrip():
    a = build_head_bank(32, {"u": 8, "v": 4}, (32, 16), seed=0)
    b = build_head_bank(32, {"u": 8, "v": 4}, (32, 16), seed=5)
    entries = a.archive_entries()
    assert "head/u/cls/16/0.weight" in entries
    b.load_archive_entries(entries)
    for p, q in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(p, q)
