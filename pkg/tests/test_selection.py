"""Vocabulary layout, bag-of-words counting, and token selection."""

import json
from collections import Counter

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from speechsel.errors import (
    CountExceedsVocab,
    IndexOutOfRange,
    TargetUnreachable,
    UnknownToken,
)
from speechsel.selection import (
    BowMatrix,
    MultimodalVocab,
    SelectionResult,
    audio_support_at,
    build_bow,
    filter_tokens,
    select_tokens_l1,
    select_tokens_random,
)


def planted_corpus(seed, n=600, n_text=50, n_audio=500, n_planted=10,
                   emission=0.85, prior=0.5):
    """Binary corpus where a small planted audio-id set determines the label.

    Returns (samples, labels, planted_ids). Positive samples emit several
    planted ids; all samples carry text plus audio noise from the
    non-planted pool.
    """
    rng = np.random.default_rng(seed)
    planted = rng.choice(n_audio, size=n_planted, replace=False)
    noise_pool = np.setdiff1d(np.arange(n_audio), planted)
    samples, labels = [], []
    for i in range(n):
        y = int(rng.random() < prior)
        text = rng.integers(0, n_text, size=rng.integers(5, 12))
        audio = list(rng.choice(noise_pool, size=rng.integers(10, 20)))
        if y == 1:
            k = rng.integers(3, 7)
            for pid in rng.choice(planted, size=k):
                if rng.random() < emission:
                    audio.append(pid)
        samples.append((text, np.asarray(audio)))
        labels.append(y)
    labels = np.asarray(labels, dtype=np.int64)
    labels[0], labels[1] = 0, 1  # both classes always present
    return samples, labels, np.sort(planted)


# --- vocabulary layout ----------------------------------------------------------


def test_vocab_maps_text_and_audio_to_disjoint_columns():
    vocab = MultimodalVocab(n_text=100, n_audio=200, audio_base=50)
    assert vocab.size == 300
    assert list(vocab.text_cols(np.array([0, 99]))) == [0, 99]
    assert list(vocab.audio_cols(np.array([50, 249]))) == [100, 299]
    kinds = vocab.column_kinds()
    assert (kinds[:100] == "text").all() and (kinds[100:] == "audio").all()


def test_vocab_reverse_map_round_trips():
    vocab = MultimodalVocab(n_text=10, n_audio=20, audio_base=5)
    assert vocab.column_token(3) == ("text", 3)
    assert vocab.column_token(10) == ("audio", 5)
    assert vocab.column_token(29) == ("audio", 24)
    with pytest.raises(IndexOutOfRange):
        vocab.column_token(30)


def test_vocab_for_grid_covers_flattened_id_range():
    # 7 kept layers of 1024 codewords starting at layer 2
    vocab = MultimodalVocab.for_grid(300, 7, 1024, layer_offset=2)
    assert vocab.audio_base == 1024
    assert vocab.n_audio == 7 * 1024
    assert vocab.audio_cols(np.array([1024]))[0] == 300
    assert vocab.audio_cols(np.array([8191]))[0] == 300 + 7 * 1024 - 1
    with pytest.raises(UnknownToken):
        vocab.audio_cols(np.array([1023]))  # dropped layer's range


def test_vocab_validation():
    with pytest.raises(ValueError):
        MultimodalVocab(n_text=-1, n_audio=10)
    with pytest.raises(ValueError):
        MultimodalVocab(n_text=5, n_audio=0)


# --- bag of words ---------------------------------------------------------------


def test_bow_counts_duplicates():
    vocab = MultimodalVocab(n_text=10, n_audio=10)
    bow = build_bow([(np.array([5, 5, 7]), np.array([], dtype=np.int64))], vocab)
    row = bow.x.toarray()[0]
    assert row[5] == 2 and row[7] == 1 and row.sum() == 3


def test_bow_empty_sample_is_zero_row():
    vocab = MultimodalVocab(n_text=4, n_audio=4)
    bow = build_bow([([], []), ([1], [0])], vocab)
    dense = bow.x.toarray()
    assert (dense[0] == 0).all()
    assert dense[1, 1] == 1 and dense[1, 4] == 1


def test_bow_matches_bruteforce_recount():
    vocab = MultimodalVocab(n_text=6, n_audio=8, audio_base=3)
    samples = [
        (np.array([0, 0, 2, 5]), np.array([3, 10, 10])),
        (np.array([1]), np.array([4, 4, 4, 9])),
        (np.array([], dtype=np.int64), np.array([3, 3])),
    ]
    bow = build_bow(samples, vocab)
    dense = bow.x.toarray()
    # independent recount: tally tokens by hand through Counter
    for i, (text, audio) in enumerate(samples):
        expect = np.zeros(vocab.size, dtype=np.int64)
        for t, k in Counter(list(text)).items():
            expect[t] = k
        for a, k in Counter(list(audio)).items():
            expect[6 + (a - 3)] = k
        assert (dense[i] == expect).all(), f"row {i}"


def test_bow_rejects_out_of_range_ids():
    vocab = MultimodalVocab(n_text=5, n_audio=5, audio_base=10)
    with pytest.raises(UnknownToken):
        build_bow([([5], [])], vocab)
    with pytest.raises(UnknownToken):
        build_bow([([], [9])], vocab)
    with pytest.raises(UnknownToken):
        build_bow([([], [15])], vocab)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bow_column_sums_equal_corpus_frequencies(seed):
    rng = np.random.default_rng(seed)
    vocab = MultimodalVocab(n_text=12, n_audio=9, audio_base=2)
    samples = []
    tally = Counter()
    for _ in range(rng.integers(1, 8)):
        text = rng.integers(0, 12, size=rng.integers(0, 10))
        audio = rng.integers(2, 11, size=rng.integers(0, 10))
        samples.append((text, audio))
        tally.update(("t", t) for t in text)
        tally.update(("a", a) for a in audio)
    bow = build_bow(samples, vocab)
    sums = np.asarray(bow.x.sum(axis=0)).ravel()
    for j in range(vocab.size):
        kind, tok = vocab.column_token(j)
        assert sums[j] == tally[("t" if kind == "text" else "a", tok)]


def test_observed_audio_ids():
    vocab = MultimodalVocab(n_text=3, n_audio=10, audio_base=100)
    bow = build_bow([([], [104, 104, 101]), ([0], [109])], vocab)
    assert list(bow.observed_audio_ids()) == [101, 104, 109]


# --- L1 selection ---------------------------------------------------------------


def test_full_shrinkage_selects_nothing():
    samples, labels, _ = planted_corpus(0, n=200)
    vocab = MultimodalVocab(n_text=50, n_audio=500)
    bow = build_bow(samples, vocab)
    from speechsel.lasso import LassoProblem, lambda_max
    lam_top = lambda_max(LassoProblem(x=bow.x, y=labels, n_classes=2, lam=1.0))
    ids, model = audio_support_at(bow, labels, lam_top)
    assert ids.size == 0
    assert model.converged


def test_planted_tokens_recovered_at_matching_target():
    samples, labels, planted = planted_corpus(1)
    vocab = MultimodalVocab(n_text=50, n_audio=500)
    bow = build_bow(samples, vocab)
    result = select_tokens_l1(bow, labels, target_count=10)
    assert result.method == "lasso"
    assert abs(result.n_selected - 10) <= 1  # inside the 10% band
    recovered = np.intersect1d(result.selected_ids, planted).size
    assert recovered >= 8, f"only {recovered} of 10 planted ids recovered"


def graded_corpus(seed, n=800, n_text=50, n_audio=500, n_signal=150,
                  flip=0.1):
    """Binary corpus with smoothly graded audio signal strength.

    Tokens 0..n_signal-1 are emitted more often under label 1, with a lift
    that decays linearly across the range; labels are noisy.  The support
    of an L1 fit then grows smoothly with decreasing lambda instead of
    saturating at a small separating set.
    """
    rng = np.random.default_rng(seed)
    lift = np.linspace(0.5, 0.02, n_signal)
    samples, labels = [], []
    for _ in range(n):
        y = int(rng.random() < 0.5)
        text = rng.integers(0, n_text, size=rng.integers(5, 12))
        audio = list(rng.integers(0, n_audio, size=rng.integers(10, 20)))
        if y == 1:
            mask = rng.random(n_signal) < lift * 0.4
            audio += list(np.nonzero(mask)[0])
        y_obs = y if rng.random() >= flip else 1 - y
        samples.append((text, np.asarray(audio, dtype=np.int64)))
        labels.append(y_obs)
    labels = np.asarray(labels, dtype=np.int64)
    labels[0], labels[1] = 0, 1
    return samples, labels


def test_bisection_hits_band_for_varied_targets():
    samples, labels = graded_corpus(2)
    vocab = MultimodalVocab(n_text=50, n_audio=500)
    bow = build_bow(samples, vocab)
    for target in (10, 73, 80):
        result = select_tokens_l1(bow, labels, target_count=target)
        assert abs(result.n_selected - target) <= 0.1 * target, (
            f"target {target}: got {result.n_selected}")
        assert result.lam is not None and result.lam > 0


def test_selection_support_monotone_in_lambda():
    samples, labels, _ = planted_corpus(3, n=400)
    vocab = MultimodalVocab(n_text=50, n_audio=500)
    bow = build_bow(samples, vocab)
    from speechsel.lasso import LassoProblem, lambda_max
    lam_top = lambda_max(LassoProblem(x=bow.x, y=labels, n_classes=2, lam=1.0))
    grid = np.geomspace(lam_top, lam_top * 0.02, 20)
    init = None
    sizes = []
    for lam in grid:
        ids, model = audio_support_at(bow, labels, lam, init=init,
                                      max_iter=20000)
        init = (model.weights, model.intercepts)
        sizes.append(ids.size)
    assert sizes[0] == 0
    assert all(b >= a for a, b in zip(sizes, sizes[1:])), sizes


def test_selected_ids_stay_in_audio_range():
    samples, labels, _ = planted_corpus(4, n=300)
    vocab = MultimodalVocab(n_text=50, n_audio=500)
    bow = build_bow(samples, vocab)
    result = select_tokens_l1(bow, labels, target_count=20)
    assert result.selected_ids.min() >= 0
    assert result.selected_ids.max() < 500
    counts_total = sum(result.counts.values())
    assert counts_total >= result.n_selected  # every id nonzero in some class
    assert result.counts.get(0, 0) == 0  # pinned reference row


def test_target_beyond_observed_vocab_unreachable():
    # only ~40 distinct audio ids ever occur, so a support of 200 cannot exist
    rng = np.random.default_rng(5)
    samples, labels = [], []
    for i in range(200):
        y = i % 2
        audio = rng.choice(40, size=8) + (np.array([0]) if y == 0 else np.array([0]))
        samples.append((rng.integers(0, 20, size=5), audio))
        labels.append(y)
    vocab = MultimodalVocab(n_text=20, n_audio=500)
    bow = build_bow(samples, vocab)
    with pytest.raises(TargetUnreachable):
        select_tokens_l1(bow, np.asarray(labels), target_count=200)


def test_target_count_validation():
    samples, labels, _ = planted_corpus(6, n=120)
    vocab = MultimodalVocab(n_text=50, n_audio=500)
    bow = build_bow(samples, vocab)
    with pytest.raises(ValueError):
        select_tokens_l1(bow, labels, target_count=0)
    with pytest.raises(ValueError):
        select_tokens_l1(bow, labels, target_count=501)


def test_multiclass_selection_counts_any_nonzero_row():
    rng = np.random.default_rng(7)
    # three classes, each marked by its own planted audio ids
    marker = {0: [10, 11], 1: [20, 21], 2: [30, 31]}
    samples, labels = [], []
    for i in range(450):
        y = i % 3
        audio = list(rng.choice(100, size=10) + 100)
        audio += list(rng.choice(marker[y], size=3))
        samples.append((rng.integers(0, 30, size=6), np.asarray(audio)))
        labels.append(y)
    vocab = MultimodalVocab(n_text=30, n_audio=200)
    bow = build_bow(samples, vocab)
    result = select_tokens_l1(bow, np.asarray(labels), target_count=6)
    all_markers = np.sort(np.concatenate([marker[c] for c in marker]))
    assert np.intersect1d(result.selected_ids, all_markers).size >= 5
    assert len(result.counts) == 3


# --- random selection -----------------------------------------------------------


def test_random_selection_deterministic_per_seed():
    ids = np.arange(100, 200)
    a = select_tokens_random(ids, 15, seed=42)
    b = select_tokens_random(ids, 15, seed=42)
    c = select_tokens_random(ids, 15, seed=43)
    assert (a.selected_ids == b.selected_ids).all()
    assert not (a.selected_ids == c.selected_ids).all()
    assert a.method == "random" and a.lam is None


def test_random_selection_full_vocab_and_overflow():
    ids = [7, 3, 5]
    full = select_tokens_random(ids, 3, seed=0)
    assert list(full.selected_ids) == [3, 5, 7]
    with pytest.raises(CountExceedsVocab):
        select_tokens_random(ids, 4, seed=0)


def test_random_selection_subset_of_observed():
    ids = np.arange(0, 1000, 7)
    result = select_tokens_random(ids, 30, seed=9)
    assert np.isin(result.selected_ids, ids).all()
    assert np.unique(result.selected_ids).size == 30


# --- sequence filtering ---------------------------------------------------------


def test_filter_keeps_selected_in_order():
    sel = SelectionResult(method="random", selected_ids=np.array([9, 7]))
    out = filter_tokens([9, 3, 9, 7], sel)
    assert list(out) == [9, 9, 7]


def test_filter_identity_and_empty():
    sel_all = SelectionResult(method="random", selected_ids=np.arange(10))
    assert list(filter_tokens([4, 2, 2], sel_all)) == [4, 2, 2]
    sel_none = SelectionResult(method="random", selected_ids=np.array([99]))
    assert filter_tokens([4, 2, 2], sel_none).size == 0


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(0, 30), max_size=60),
    st.sets(st.integers(0, 30), max_size=15),
)
def test_filter_length_equals_occurrence_count(seq, chosen):
    sel = SelectionResult(method="random",
                          selected_ids=np.asarray(sorted(chosen), dtype=np.int64))
    out = filter_tokens(np.asarray(seq, dtype=np.int64), sel)
    assert out.size == sum(1 for t in seq if t in chosen)
    # order preservation: output is the subsequence, not a reordering
    assert list(out) == [t for t in seq if t in chosen]


# --- serialization --------------------------------------------------------------


def test_selection_result_json_round_trip():
    sel = SelectionResult(method="lasso", selected_ids=np.array([30, 10, 20]),
                          counts={0: 0, 1: 3}, lam=0.025)
    text = sel.to_json()
    payload = json.loads(text)
    assert payload["selected_ids"] == [10, 20, 30]  # sorted
    assert payload["lambda"] == 0.025
    back = SelectionResult.from_json(text)
    assert (back.selected_ids == sel.selected_ids).all()
    assert back.counts == sel.counts and back.lam == sel.lam


def test_selection_result_json_omits_lambda_for_random():
    sel = select_tokens_random([1, 2, 3, 4], 2, seed=0)
    payload = json.loads(sel.to_json())
    assert "lambda" not in payload
    back = SelectionResult.from_json(sel.to_json())
    assert back.lam is None
    assert (back.selected_ids == sel.selected_ids).all()
