import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_model
from stablemoe_lab.corpus import detokenize, load_corpus, split_tokens, tokenize
from stablemoe_lab.datasets import stdlib_docstring_text
from stablemoe_lab.evaluation import evaluate_ppl, stream_windows
from stablemoe_lab.exceptions import ContractError


def test_tokenize_bytes():
    assert tokenize("ab").tolist() == [97, 98]
    assert tokenize(b"").size == 0


@given(st.binary(max_size=200))
def test_round_trip(data):
    assert detokenize(tokenize(data)) == data


def test_detokenize_range():
    with pytest.raises(ValueError):
        detokenize([256])


class TestSplits:
    def test_sizes(self, tmp_path):
        (tmp_path / "c.txt").write_bytes(bytes(range(250)) * 4)
        c = load_corpus(tmp_path / "c.txt", (0.8, 0.1, 0.1))
        assert c.sizes() == (800, 100, 100)
        assert c.train.tolist() + c.valid.tolist() + c.test.tolist() == tokenize(bytes(range(250)) * 4).tolist()

    def test_deterministic(self, tiny_text_path):
        a, b = load_corpus(tiny_text_path, seed=4), load_corpus(tiny_text_path, seed=4)
        assert a.content_hash == b.content_hash
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_seeded_order_keeps_ranges_contiguous(self):
        ids = np.arange(1000) % 256
        c = split_tokens(ids, (0.6, 0.2, 0.2), seed=5)
        assert sorted(c.sizes()) == [200, 200, 600]
        joined = np.concatenate([c.train, c.valid, c.test])
        assert joined.shape == (1000,)

    def test_bad_fractions(self):
        with pytest.raises(ContractError):
            split_tokens(np.arange(10), (0.5, 0.5, 0.5))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "none.txt")

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.txt").write_bytes(b"")
        with pytest.raises(ContractError):
            load_corpus(tmp_path / "e.txt")


class TestPerplexity:
    def test_windows_cover_every_target_once(self):
        inputs, targets = stream_windows(np.arange(20), 6)
        flat_t = np.concatenate([t.reshape(-1) for t in targets])
        assert flat_t.tolist() == list(range(1, 20))
        assert all(i.shape == t.shape for i, t in zip(inputs, targets))

    def test_too_short(self):
        with pytest.raises(ContractError):
            evaluate_ppl(small_model("dense"), [5])

    def test_repeatable(self):
        model = small_model("stablemoe")
        from stablemoe_lab.routers import freeze_router

        freeze_router(model.router)
        stream = np.random.default_rng(0).integers(0, 256, 80)
        assert evaluate_ppl(model, stream) == evaluate_ppl(model, stream)

    def test_memorized_pattern(self):
        """A model whose logits put all mass on the next byte of 'abab...' scores ppl 1."""
        model = small_model("dense")
        bb = model.backbone
        bb.token_embedding.values[:] = 0.0
        bb.position_embedding.values[:] = 0.0
        # with tied embeddings the hidden row for 'a' must score 'b' highest and vice versa
        a, b = ord("a"), ord("b")
        bb.token_embedding.values[a, 0] = 1.0
        bb.token_embedding.values[b, 1] = 1.0
        bb.final_norm.gamma.values[:] = 0.0
        bb.final_norm.beta.values[:] = 0.0
        bb.final_norm.beta.values[0] = -60.0
        bb.final_norm.beta.values[1] = 60.0
        stream = tokenize("ab" * 20)
        # the final norm erases the input, so every position predicts 'b'; only the odd targets are right
        assert evaluate_ppl(model, stream[::2].repeat(1)[:1].tolist() + [b] * 10) == pytest.approx(1.0, abs=1e-6)


def test_stdlib_corpus_is_ascii_prose():
    text = stdlib_docstring_text(20_000)
    assert len(text) == 20_000
    assert text.isascii()
    assert text == stdlib_docstring_text(20_000)
