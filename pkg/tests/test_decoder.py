"""Causal decoder: masking, NLL semantics, generation, and low-rank adapters."""

import numpy as np
import pytest

from brain2text import DecoderConfig, DecoderLM, GenerationConfig
from brain2text.decoder_lm import DecoderError


def tiny_config(**kw):
    base = dict(
        vocab_size=8,
        embed_dim=8,
        num_layers=1,
        num_heads=2,
        ff_dim=16,
        max_context=32,
        bos_id=5,
        eos_id=6,
        pad_id=7,
    )
    base.update(kw)
    return DecoderConfig(**base)


@pytest.fixture()
def decoder(rng):
    return DecoderLM(tiny_config(), rng)


def test_config_validation():
    with pytest.raises(DecoderError, match="divisible"):
        DecoderConfig(vocab_size=8, embed_dim=9, num_heads=2).validate()
    with pytest.raises(DecoderError, match="distinct"):
        tiny_config(bos_id=6).validate()
    with pytest.raises(DecoderError, match="special ids"):
        tiny_config(pad_id=8).validate()
    round_tripped = DecoderConfig.from_dict(tiny_config().to_dict())
    assert round_tripped == tiny_config()


def test_nll_is_mean_over_length_then_batch(decoder, rng):
    E = rng.normal(size=(2, 3, 8))
    la, _ = decoder.nll_batch(E[:1], [3], [[1, 2, 6]])
    lb, _ = decoder.nll_batch(E[1:], [3], [[0, 6]])
    both, _ = decoder.nll_batch(E, [3, 3], [[1, 2, 6], [0, 6]])
    assert both == pytest.approx((la + lb) / 2.0, abs=1e-12)


def test_prefix_conditions_the_prediction(decoder, rng):
    E1 = rng.normal(size=(1, 4, 8))
    E2 = rng.normal(size=(1, 4, 8))
    l1, _ = decoder.nll_batch(E1, [4], [[1, 2, 6]])
    l2, _ = decoder.nll_batch(E2, [4], [[1, 2, 6]])
    assert l1 != l2


def test_empty_prefix_is_supported(decoder):
    E = np.zeros((2, 0, 8))
    loss, _ = decoder.nll_batch(E, [0, 0], [[1, 2, 6], [0, 6]])
    assert np.isfinite(loss)


def test_future_targets_cannot_leak_backward(decoder, rng):
    """Per-position log-probs over a shared past must not depend on later tokens."""
    E = rng.normal(size=(4, 8))
    a = decoder.forward_with_prefix(E, [1, 2, 3])  # bos is prepended internally
    b = decoder.forward_with_prefix(E, [1, 2, 4])
    # rows up to the last common position agree exactly
    assert np.allclose(a[:3], b[:3], atol=1e-12)
    assert not np.allclose(a[3], b[3], atol=1e-12)


def test_variable_prefix_lengths_in_one_batch_match_single_trials(decoder, rng):
    E_pad = np.zeros((2, 5, 8))
    E_pad[0, :5] = rng.normal(size=(5, 8))
    E_pad[1, :2] = rng.normal(size=(2, 8))
    batch, _ = decoder.nll_batch(E_pad, [5, 2], [[1, 6], [2, 3, 6]])
    one, _ = decoder.nll_batch(E_pad[:1], [5], [[1, 6]])
    two, _ = decoder.nll_batch(E_pad[1:, :2], [2], [[2, 3, 6]])
    assert batch == pytest.approx((one + two) / 2.0, abs=1e-12)


def test_greedy_generation_stops_at_eos(decoder, rng):
    E = rng.normal(size=(3, 8))
    out = decoder.generate(E, GenerationConfig(mode="greedy", max_new_tokens=20))
    assert decoder.config.eos_id not in out.ids
    if not out.truncated:
        assert len(out.ids) < 20
    assert np.isfinite(out.logprob)


def test_generation_budget_respects_context_window(rng):
    decoder = DecoderLM(tiny_config(max_context=8), rng)
    E = rng.normal(size=(5, 8))  # 5 prefix rows + bos leaves room for 2 tokens
    out = decoder.generate(E, GenerationConfig(mode="greedy", max_new_tokens=50))
    assert len(out.ids) <= 2


def test_beam_size_one_equals_greedy_when_greedy_finishes(decoder, rng):
    E = rng.normal(size=(3, 8))
    g = decoder.generate(E, GenerationConfig(mode="greedy", max_new_tokens=12))
    b = decoder.generate(E, GenerationConfig(mode="beam", beam_size=1, max_new_tokens=12))
    if not g.truncated and not b.truncated:
        assert g.ids == b.ids
        assert g.logprob == pytest.approx(b.logprob, abs=1e-9)


def test_beam_search_prefers_higher_total_probability(decoder, monkeypatch):
    """Toy distribution where the greedy first step is a trap."""
    eos = decoder.config.eos_id
    V = decoder.config.vocab_size

    def fake_logprobs(E, hyps):
        out = np.full((len(hyps), V), -50.0)
        for i, h in enumerate(hyps):
            if h == []:
                out[i, 0] = np.log(0.55)  # greedy takes token 0...
                out[i, 1] = np.log(0.45)
            elif h == [0]:
                out[i, eos] = np.log(0.10)  # ...then pays dearly
            elif h == [1]:
                out[i, eos] = np.log(0.99)
        return out

    monkeypatch.setattr(decoder, "_last_logprobs", fake_logprobs)
    E = np.zeros((1, 8))
    greedy = decoder.generate(E, GenerationConfig(mode="greedy", max_new_tokens=4))
    beam = decoder.generate(E, GenerationConfig(mode="beam", beam_size=2, max_new_tokens=4))
    assert greedy.ids == [0]
    assert beam.ids == [1]
    assert beam.logprob == pytest.approx(np.log(0.45) + np.log(0.99), abs=1e-9)


def test_length_penalty_rescales_final_ranking(decoder, monkeypatch):
    eos = decoder.config.eos_id
    V = decoder.config.vocab_size

    def fake_logprobs(E, hyps):
        out = np.full((len(hyps), V), -50.0)
        for i, h in enumerate(hyps):
            if h == []:
                out[i, eos] = np.log(0.30)  # short hypothesis, ends now
                out[i, 2] = np.log(0.65)
            elif h == [2]:
                out[i, eos] = np.log(0.55)  # long hypothesis: total 0.3575
        return out

    monkeypatch.setattr(decoder, "_last_logprobs", fake_logprobs)
    E = np.zeros((1, 8))
    flat = decoder.generate(E, GenerationConfig(mode="beam", beam_size=2, max_new_tokens=4))
    assert flat.ids == [2]  # higher raw probability
    shaped = decoder.generate(
        E, GenerationConfig(mode="beam", beam_size=2, max_new_tokens=4, length_penalty=-8.0)
    )
    assert shaped.ids == []  # strong penalty favors the shorter hypothesis


def test_lora_attach_is_output_identical(decoder, rng):
    E = rng.normal(size=(2, 3, 8))
    before, _ = decoder.nll_batch(E, [3, 3], [[1, 2, 6], [0, 6]])
    names = decoder.attach_lora(rank=2, rng=np.random.default_rng(5))
    assert len(names) == 4  # A and B for q and v in the single layer
    after, _ = decoder.nll_batch(E, [3, 3], [[1, 2, 6], [0, 6]])
    assert after == pytest.approx(before, abs=0.0)


def test_lora_merge_folds_adapter_into_weights(decoder, rng):
    E = rng.normal(size=(1, 3, 8))
    decoder.attach_lora(rank=2, rng=np.random.default_rng(5))
    # push the adapter off its zero init so the merge is non-trivial
    for name, p in decoder.named_parameters().items():
        if "lora" in name:
            p += np.random.default_rng(3).normal(0.1, 0.05, size=p.shape)
    adapted, _ = decoder.nll_batch(E, [3], [[1, 2, 6]])
    decoder.merge_lora()
    merged, _ = decoder.nll_batch(E, [3], [[1, 2, 6]])
    assert merged == pytest.approx(adapted, abs=1e-12)
    assert not any("lora" in n for n in decoder.named_parameters())


def test_import_round_trip_is_bit_exact(tmp_path, decoder, rng):
    decoder.save(tmp_path / "dec")
    back = DecoderLM.import_pretrained(tmp_path / "dec")
    a = decoder.named_parameters()
    b = back.named_parameters()
    assert set(a) == set(b)
    for n in a:
        assert a[n].tobytes() == b[n].tobytes()
    E = rng.normal(size=(1, 2, 8))
    la, _ = decoder.nll_batch(E, [2], [[1, 6]])
    lb, _ = back.nll_batch(E, [2], [[1, 6]])
    assert la == lb


def test_import_lists_every_mismatch_at_once(tmp_path, decoder):
    decoder.save(tmp_path / "dec")
    import json

    manifest_path = tmp_path / "dec" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    # drop one group and corrupt another's shape, keeping hashes consistent
    victim = manifest["groups"].pop("ln_f.g")
    (tmp_path / "dec" / victim["file"]).unlink()
    manifest["groups"]["ln_f.b"]["shape"] = [4]
    import hashlib

    blob = (tmp_path / "dec" / manifest["groups"]["ln_f.b"]["file"]).read_bytes()[: 4 * 8]
    (tmp_path / "dec" / manifest["groups"]["ln_f.b"]["file"]).write_bytes(blob)
    manifest["groups"]["ln_f.b"]["sha256"] = hashlib.sha256(blob).hexdigest()
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(DecoderError) as err:
        DecoderLM.import_pretrained(tmp_path / "dec")
    text = str(err.value)
    assert "missing: ln_f.g" in text
    assert "shape mismatch: ln_f.b" in text
