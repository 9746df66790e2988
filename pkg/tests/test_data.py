import numpy as np
import pytest

from bitnm.data import BUNDLED_CORPUS, eval_windows, load_corpus, sample_batch
from bitnm.errors import ConfigError


@pytest.fixture(scope="module")
def bundled():
    return load_corpus("")


def test_bundled_corpus_loads(bundled):
    assert bundled.vocab_size >= 60
    assert len(bundled.train_ids) + len(bundled.val_ids) >= 1_000_000
    # tail split: validation is the last 5%, disjoint by construction
    assert len(bundled.val_ids) == pytest.approx(
        0.05 * (len(bundled.train_ids) + len(bundled.val_ids)), rel=0.01)


def test_ids_within_vocab(bundled):
    assert bundled.train_ids.max() < bundled.vocab_size
    assert bundled.val_ids.max() < bundled.vocab_size
    assert bundled.train_ids.min() >= 0


def test_round_trip_against_text(bundled):
    text = open(BUNDLED_CORPUS, encoding="utf-8").read()
    id_to_char = {i: c for c, i in bundled.char_to_id.items()}
    joined = np.concatenate([bundled.train_ids, bundled.val_ids])
    head = "".join(id_to_char[i] for i in joined[:2000])
    assert head == text[:2000]


def test_vocab_cap_enforced(tiny_corpus_path):
    with pytest.raises(ConfigError):
        load_corpus(tiny_corpus_path, vocab_size=3)


def test_sample_batch_shapes_and_shift(tiny_corpus_path):
    corpus = load_corpus(tiny_corpus_path)
    rng = np.random.default_rng(0)
    ids, targets = sample_batch(rng, corpus.train_ids, batch_size=3, context=10)
    assert ids.shape == targets.shape == (3, 10)
    assert np.array_equal(ids[:, 1:], targets[:, :-1])  # next-char targets


def test_eval_windows_cover_tail(tiny_corpus_path):
    corpus = load_corpus(tiny_corpus_path)
    win = eval_windows(corpus.val_ids, context=10)
    assert win.shape[1] == 11
    assert np.array_equal(win[0], corpus.val_ids[:11])
    assert np.array_equal(win[1], corpus.val_ids[10:21])
