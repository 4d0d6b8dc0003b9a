import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIXTURES, small_config
from mucrasp import model as mc
from mucrasp.calibration import (CorpusError, corpus_perplexity, generate_synthetic_corpus,
                                 load_corpus, save_corpus, train)
from mucrasp.pivots import find_markers
from mucrasp.tokenizer import BOS, EOS, detokenize, token_char_spans, tokenize

# tokenizer


def test_empty_string():
    assert tokenize("") == ([], [])


def test_therefore_is_nine_bytes():
    ids, c2t = tokenize("Therefore")
    assert len(ids) == 9 and c2t == list(range(9))
    assert detokenize(ids) == "Therefore"


def test_specials_are_skipped_on_decode():
    assert detokenize([BOS, 104, 105, EOS]) == "hi"


@given(st.text(max_size=40))
@settings(max_examples=200)
def test_char_to_token_span_audit(text):
    ids, c2t = tokenize(text)
    spans = token_char_spans(text)
    assert len(spans) == len(ids)
    assert detokenize(ids) == text
    for i in range(len(text)):
        start, end = spans[c2t[i]]
        assert start <= i < end


def test_marker_positions_map_into_their_token():
    text = "naïve start → Therefore, done"
    _, c2t = tokenize(text)
    spans = token_char_spans(text)
    for m in find_markers(text):
        start, end = spans[c2t[m.char_start]]
        assert start <= m.char_start < end


# synthetic corpus


def test_generation_is_deterministic():
    cfg = small_config()
    assert generate_synthetic_corpus(7, 3, cfg) == generate_synthetic_corpus(7, 3, cfg)
    assert generate_synthetic_corpus(7, 3, cfg) != generate_synthetic_corpus(8, 3, cfg)


def test_every_response_has_two_markers():
    corpus = generate_synthetic_corpus(1, 40, mc.ModelConfig())
    for s in corpus:
        assert len(find_markers(s.response_text)) >= 2, s.response_text


def test_answer_word_closes_response():
    corpus = generate_synthetic_corpus(2, 60, mc.ModelConfig())
    words = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five"}
    assert 3 in {s.latent_answer for s in corpus}
    for s in corpus:
        assert s.response_text.endswith(words[s.latent_answer])


def test_samples_fit_max_seq():
    cfg = mc.ModelConfig()
    for s in generate_synthetic_corpus(3, 50, cfg):
        tokens, vis, targets, mask = s.model_inputs()
        assert len(vis) + len(tokens) <= cfg.max_seq
        assert mask.sum() == s.response_length
        assert targets[mask][-1] == EOS


def test_sample_targets_line_up(sample):
    tokens, vis, targets, mask = sample.model_inputs()
    rows = np.flatnonzero(mask)
    assert rows[0] == sample.response_row_offset
    assert list(targets[rows]) == sample.response_ids
    # rows predict the next token: the input at row r+1 is the target of row r
    n_vis = len(vis)
    for r in rows[:-1]:
        assert tokens[r + 1 - n_vis] == targets[r]


# JSONL


def test_save_load_round_trip(tmp_path):
    corpus = generate_synthetic_corpus(4, 5, small_config())
    path = tmp_path / "c.jsonl"
    save_corpus(corpus, path)
    assert load_corpus(path) == corpus


def test_missing_field_reports_line(tmp_path):
    good = json.loads((FIXTURES / "one_sample.jsonl").read_text())
    bad = dict(good)
    del bad["response_text"]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(CorpusError, match="line 2.*response_text"):
        load_corpus(path)


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(CorpusError, match="line 1"):
        load_corpus(path)


def test_hand_written_fixture():
    corpus = load_corpus(FIXTURES / "one_sample.jsonl")
    assert len(corpus) == 1
    s = corpus[0]
    assert s.prompt_text == "Question: How many red cubes are in the image?"
    assert s.response_text == "1. I see one red cube.\nFinal Answer: one"
    assert s.latent_answer == 1
    np.testing.assert_array_equal(s.vision_embeddings, [[0.5, -1.0], [0.25, 2.0], [0.0, 1.5]])


# training


def test_zero_steps_leaves_weights_unchanged(weights, small_corpus):
    out = train(weights, small_corpus, 0, 0.1)
    for (_, a), (_, b) in zip(weights.named_tensors(), out.named_tensors()):
        assert np.array_equal(a, b)


def test_training_is_deterministic(weights, small_corpus):
    a = train(weights, small_corpus, 3, 0.05, seed=9)
    b = train(weights, small_corpus, 3, 0.05, seed=9)
    for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
        assert np.array_equal(x, y)


def test_short_training_lowers_perplexity(weights, small_corpus):
    history = []
    trained = train(weights, small_corpus, 30, 0.1, seed=0, history=history)
    assert len(history) == 30
    assert corpus_perplexity(trained, small_corpus) < corpus_perplexity(weights, small_corpus)
