import numpy as np
import pytest

from hgflow.data import (
    Corpus,
    batch_stream,
    detokenize,
    tokenize_bytes,
    validation_batches,
)
from hgflow.errors import ContractError


class TestTokenizer:
    def test_ascii(self):
        assert tokenize_bytes("AB").tolist() == [65, 66]

    def test_empty(self):
        assert tokenize_bytes("").size == 0
        assert detokenize(np.array([], dtype=np.int64)) == b""

    def test_roundtrip_random_megabyte(self):
        rng = np.random.default_rng(0)
        blob = rng.integers(0, 256, size=1_000_000, dtype=np.uint8).tobytes()
        assert detokenize(tokenize_bytes(blob)) == blob

    def test_vocab_bound(self):
        ids = tokenize_bytes(bytes(range(256)))
        assert ids.min() == 0 and ids.max() == 255
        with pytest.raises(ContractError):
            detokenize(np.array([256]))


class TestCorpus:
    def test_split_disjoint_and_deterministic(self, corpus_text):
        a = Corpus.from_text(corpus_text)
        b = Corpus.from_text(corpus_text)
        assert np.array_equal(a.train_ids, b.train_ids)
        assert np.array_equal(a.val_ids, b.val_ids)
        assert a.train_ids.size + a.val_ids.size == a.ids.size
        assert a.val_ids.size == pytest.approx(0.02 * a.ids.size, rel=0.01)

    def test_from_files(self, corpus_file, corpus_text):
        corpus = Corpus.from_files(corpus_file)
        assert detokenize(corpus.ids) == corpus_text.encode("utf-8")

    def test_too_small(self):
        with pytest.raises(ContractError):
            Corpus(np.array([1, 2]))


class TestBatchStream:
    def test_pure_function_of_seed_and_step(self, corpus_text):
        ids = tokenize_bytes(corpus_text)
        x1, y1 = batch_stream(ids, 32, 4, seed=9, step=17)
        x2, y2 = batch_stream(ids, 32, 4, seed=9, step=17)
        assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
        x3, _ = batch_stream(ids, 32, 4, seed=9, step=18)
        assert not np.array_equal(x1, x3)
        x4, _ = batch_stream(ids, 32, 4, seed=10, step=17)
        assert not np.array_equal(x1, x4)

    def test_shift_contract(self, corpus_text):
        ids = tokenize_bytes(corpus_text)
        x, y = batch_stream(ids, 16, 8, seed=1, step=0)
        assert x.shape == y.shape == (8, 16)
        assert np.array_equal(x[:, 1:], y[:, :-1])

    def test_vocab_bound(self, corpus_text):
        ids = tokenize_bytes(corpus_text)
        x, y = batch_stream(ids, 16, 8, seed=1, step=3)
        assert x.max() < 256 and y.max() < 256 and x.min() >= 0

    def test_too_short_corpus(self):
        with pytest.raises(ContractError):
            batch_stream(np.arange(10), 16, 2, seed=0, step=0)


class TestValidationBatches:
    def test_deterministic_and_counted(self, corpus_text):
        ids = tokenize_bytes(corpus_text)[:5000]
        got1 = validation_batches(ids, 32, 4, 6)
        got2 = validation_batches(ids, 32, 4, 6)
        assert len(got1) == 6
        for (x1, y1), (x2, y2) in zip(got1, got2):
            assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
            assert np.array_equal(x1[:, 1:], y1[:, :-1])

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            validation_batches(np.arange(10), 32, 2, 4)
        with pytest.raises(ContractError):
            validation_batches(np.arange(100), 8, 2, 0)
