import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from diffusionlab.errors import CapacityError, ConfigurationError, VocabularyError
from diffusionlab.prompts import (COLOR, COLORS, EOS, NOUNS, SEM, SOS, TEXTURE, PromptEncoder,
                                  PromptSpec, SurgerySpec, all_prompts, apply_surgery,
                                  build_promptset, encode_prompt, export_dataset, glyph_mask,
                                  load_dataset, null_condition, render_example, switch_eos)

GOLDEN = Path(__file__).parent / "golden"


def test_render_deterministic_and_golden():
    p = PromptSpec(NOUNS.index("circle"), COLORS.index("red"))
    img = render_example(p, 7)
    assert img.shape == (3, 16, 16) and img.dtype == np.float32
    assert np.array_equal(img, render_example(p, 7))
    want = json.loads((GOLDEN / "hashes.json").read_text())["circle_red_seed7_sha256"]
    assert hashlib.sha256(img.astype("<f4").tobytes()).hexdigest() == want
    frozen = np.fromfile(GOLDEN / "circle_red_seed7.f32", dtype="<f4").reshape(3, 16, 16)
    assert np.array_equal(img, frozen)


def test_attribute_only_changes_glyph_pixels():
    a, b = PromptSpec(2, 0), PromptSpec(2, 7)
    ia, ib = render_example(a, 11), render_example(b, 11)
    mask = glyph_mask(a, 11)
    assert np.array_equal(ia[:, ~mask], ib[:, ~mask])
    assert not np.array_equal(ia[:, mask], ib[:, mask])


def test_nouns_render_distinct_templates():
    masks = [glyph_mask(PromptSpec(n, 0), 0, jitter=0.0) for n in range(len(NOUNS))]
    for i in range(len(masks)):
        assert masks[i].sum() > 10
        for j in range(i):
            assert not np.array_equal(masks[i], masks[j])


@pytest.mark.parametrize("p", [PromptSpec(8, 0), PromptSpec(0, 10), PromptSpec(-1, 0)])
def test_render_rejects_bad_ids(p):
    with pytest.raises(VocabularyError):
        render_example(p, 0)


def test_promptset_contracts():
    full = build_promptset(80, seed=1)
    assert len(set(full)) == 80 and set(full) == set(all_prompts())
    assert build_promptset(20, 3) == build_promptset(20, 3)
    for n in (10, 20, 40, 64):
        ps = build_promptset(n, 5)
        kinds = [p.attribute_kind for p in ps]
        assert abs(kinds.count(COLOR) - kinds.count(TEXTURE)) <= 1
    with pytest.raises(CapacityError):
        build_promptset(81, 0)


def test_dataset_roundtrip(tmp_path):
    ps = all_prompts()[:5]
    export_dataset(tmp_path, ps, [3, 4, 5, 6, 7])
    got, imgs, seeds = load_dataset(tmp_path)
    assert got == ps and seeds == [3, 4, 5, 6, 7]
    assert np.array_equal(imgs[2], render_example(ps[2], 5))
    assert json.loads((tmp_path / "vocab.json").read_text())["nouns"] == list(NOUNS)


def test_encoding_layout():
    s = encode_prompt(PromptSpec(1, 2))
    assert s.tags == (SOS, SEM, SEM, SEM, EOS, EOS, EOS, EOS)
    eos = s.tokens[s.indices(EOS)]
    assert np.all(eos == eos[0])
    assert encode_prompt(PromptSpec(1, 2)).equals(s)
    n = null_condition()
    assert n.tags == (SOS,) + (EOS,) * 7
    assert np.array_equal(n.tokens[0], s.tokens[0])


def test_encoder_injective():
    enc = PromptEncoder()
    assert enc.min_eos_distance > 0
    eos = np.stack([enc.encode(p).tokens[-1] for p in all_prompts()])
    d = np.linalg.norm(eos[:, None] - eos[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0


def test_switch_eos_identity_and_involution():
    a, b = encode_prompt(PromptSpec(0, 1)), encode_prompt(PromptSpec(5, 8))
    assert switch_eos(a, a).equals(a)
    ab = switch_eos(a, b)
    assert np.array_equal(ab.tokens[1:4], a.tokens[1:4])
    assert np.all(ab.tokens[4:] == b.tokens[-1])
    assert switch_eos(ab, a).equals(a)
    before = a.tokens.copy()
    switch_eos(a, b)
    assert np.array_equal(a.tokens, before)


def test_surgery_kinds():
    a = encode_prompt(PromptSpec(3, 3))
    r = apply_surgery(a, None, SurgerySpec("repeat_sem", repeat_count=2))
    assert r.tags == (SOS,) + (SEM,) * 6 + (EOS,)
    assert np.array_equal(r.tokens[4:7], a.tokens[1:4])
    assert np.array_equal(r.tokens[7], a.tokens[7])
    z = apply_surgery(a, None, SurgerySpec("zero_class", SEM))
    assert not z.tokens[1:4].any() and np.array_equal(z.tokens[4:], a.tokens[4:])
    g1 = apply_surgery(a, None, SurgerySpec("random_class", EOS, seed=4))
    g2 = apply_surgery(a, None, SurgerySpec("random_class", EOS, seed=4))
    assert np.array_equal(g1.tokens, g2.tokens) and not np.array_equal(g1.tokens, a.tokens)
    so = apply_surgery(a, None, SurgerySpec("sos_only"))
    assert np.all(so.tokens == a.tokens[0])
    eo = apply_surgery(a, None, SurgerySpec("eos_only"))
    assert np.array_equal(eo.tokens[0], a.tokens[0]) and np.all(eo.tokens[1:] == a.tokens[-1])


def test_surgery_errors():
    a = encode_prompt(PromptSpec(3, 3))
    with pytest.raises(CapacityError):
        apply_surgery(a, None, SurgerySpec("repeat_sem", repeat_count=3))
    with pytest.raises(ConfigurationError):
        apply_surgery(a, None, SurgerySpec("switch_eos"))
    with pytest.raises(ConfigurationError):
        apply_surgery(a, a, SurgerySpec("zero_class"))
    with pytest.raises(ConfigurationError):
        apply_surgery(a, None, SurgerySpec("melt"))


def test_kv_scope():
    a, b = encode_prompt(PromptSpec(0, 0)), encode_prompt(PromptSpec(4, 4))
    k, v = switch_eos(a, b, kv_scope="key").key_value()
    assert np.array_equal(v, a.tokens) and np.array_equal(k[-1], b.tokens[-1])
    k, v = switch_eos(a, b, kv_scope="value").key_value()
    assert np.array_equal(k, a.tokens) and np.array_equal(v[-1], b.tokens[-1])
