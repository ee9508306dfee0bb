import random

import pytest
from hypothesis import given, strategies as st

from userlibri.wordpiece import (
    BLANK,
    BLANK_ID,
    UNK,
    UNK_ID,
    WordPieceError,
    WordPieceModel,
    decode,
    encode,
    piece_strings,
    train_wpm,
)

CORPUS = ["THE CAT SAT ON THE MAT", "THE DOG SAT", "A CAT AND A DOG", "THAT HAT"]


@pytest.fixture(scope="module")
def model():
    return train_wpm(CORPUS, vocab_size=60)


def test_reserved_ids(model):
    assert model.pieces[BLANK_ID] == BLANK and model.pieces[UNK_ID] == UNK


def test_single_merge_by_hand():
    # base symbols: A and ##A, so one merge fits in a budget of 5
    m = train_wpm(["AA AA AA"], vocab_size=5)
    assert m.pieces == [BLANK, UNK, "A", "##A", "AA"]
    assert encode("AA", m) == [4]


def test_character_level_at_minimum_size():
    m = train_wpm(["AB BA"], vocab_size=6)
    assert len(m) == 6 and not m.merge_rank


def test_budget_below_alphabet_rejected():
    with pytest.raises(WordPieceError):
        train_wpm(["ABC"], vocab_size=7)


def test_every_character_is_a_piece(model):
    chars = {c for s in CORPUS for c in s.replace(" ", "")}
    assert model.alphabet == chars
    for c in chars:
        assert c in model.pieces and "##" + c in model.pieces


def test_tie_break_is_lexicographic():
    # pairs (A,##B) and (C,##D) both occur twice; the smaller pair merges first
    m = train_wpm(["CD AB", "AB CD"], vocab_size=11)
    assert m.pieces[-1] == "AB"


def test_closure_on_training_text(model):
    for s in CORPUS:
        assert UNK_ID not in encode(s, model)
        assert decode(encode(s, model), model) == s


def test_empty_round_trip(model):
    assert encode("", model) == [] and decode([], model) == ""


def test_single_character(model):
    ids = encode("T", model)
    assert len(ids) == 1 and decode(ids, model) == "T"


def test_unknown_character_maps_to_unk(model):
    assert UNK_ID in encode("CAZ", model)
    assert not model.covers("CAZ") and model.covers("CAT")


def test_decode_rejects_bad_ids(model):
    with pytest.raises(WordPieceError):
        decode([len(model)], model)
    with pytest.raises(WordPieceError):
        decode([BLANK_ID], model)


def test_seeded_random_round_trips(model):
    letters = sorted(model.alphabet)
    rng = random.Random(5)
    for _ in range(1000):
        chars = [rng.choice(letters + [" "]) for _ in range(50)]
        text = " ".join("".join(chars).split())
        assert decode(encode(text, model), model) == text


@given(st.text(alphabet="THECASDOGMN ", max_size=40))
def test_segmentation_reconstructs_words(text):
    m = train_wpm(CORPUS, vocab_size=60)
    for word in text.split():
        pieces = piece_strings(m.encode_word(word), m)
        assert not pieces[0].startswith("##")
        assert all(p.startswith("##") for p in pieces[1:])
        assert "".join(p.removeprefix("##") for p in pieces) == word


def test_training_is_deterministic():
    a, b = train_wpm(CORPUS, 60), train_wpm(CORPUS, 60)
    assert a.pieces == b.pieces and a.merge_rank == b.merge_rank


def test_save_load(tmp_path, model):
    path = tmp_path / "wpm.txt"
    model.save(path)
    loaded = WordPieceModel.load(path)
    assert loaded.pieces == model.pieces and loaded.merge_rank == model.merge_rank
    assert encode("THE CAT", loaded) == encode("THE CAT", model)


def test_vocab_reaches_target_on_rich_corpus():
    rng = random.Random(0)
    words = ["".join(rng.choice("ABCDEFGH") for _ in range(rng.randint(2, 7))) for _ in range(300)]
    sents = [" ".join(rng.choice(words) for _ in range(8)) for _ in range(400)]
    m = train_wpm(sents, vocab_size=120)
    assert len(m) == 120
