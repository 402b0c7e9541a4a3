"""Codec: serialization round-trips, role integrity, parse robustness."""

import itertools

import numpy as np
import pytest

from ruig import codec
from ruig.codec import (
    Malformed,
    Role,
    TokenSequence,
    Vocab,
    VocabError,
    build_target_sequence,
    decode_template,
    parse_box,
    parse_point,
    serialize_box,
    serialize_point,
    tokenize_instruction,
)
from ruig.geometry import BBox, Point

rng = np.random.default_rng(99)
VOCAB = Vocab(["click", "alpha", "beta"])


def surfaces(seq):
    return [VOCAB.token(i) for i in seq.ids]


def test_serialize_box_template():
    seq = serialize_box(BBox(12, 34, 56, 78), digits=3)
    assert surfaces(seq) == [
        "<predict_bbox>",
        "<x_min>", "0", "1", "2", "</x_min>",
        "<y_min>", "0", "3", "4", "</y_min>",
        "<x_max>", "0", "5", "6", "</x_max>",
        "<y_max>", "0", "7", "8", "</y_max>",
        "</predict_bbox>", "<eos>",
    ]
    assert seq.roles[0] == Role.TASK_PROMPT
    assert seq.roles[1] == Role.COORD_PROMPT
    assert seq.roles[2] == Role.COORD_VALUE
    assert seq.roles[-1] == Role.EOS


def test_serialize_zero_box():
    seq = serialize_box(BBox(0, 0, 0, 0), digits=2)
    values = [VOCAB.token(i) for i, r in zip(seq.ids, seq.roles) if r == Role.COORD_VALUE]
    assert values == ["0"] * 8


def test_serialize_overflow():
    with pytest.raises(ValueError):
        serialize_box(BBox(0, 0, 120, 5), digits=2)


def test_round_trip_box():
    assert parse_box(serialize_box(BBox(5, 7, 9, 11), digits=2), 2) == BBox(5, 7, 9, 11)


def test_round_trip_exhaustive_16():
    for x0, x1 in itertools.combinations_with_replacement(range(16), 2):
        for y0, y1 in itertools.combinations_with_replacement(range(16), 2):
            b = BBox(x0, y0, x1, y1)
            assert parse_box(serialize_box(b, 2), 2) == b


def test_round_trip_sampled_64():
    for _ in range(2000):
        x0, x1 = sorted(rng.integers(0, 64, size=2).tolist())
        y0, y1 = sorted(rng.integers(0, 64, size=2).tolist())
        b = BBox(x0, y0, x1, y1)
        assert parse_box(serialize_box(b, 2), 2) == b


def test_parse_rejects_missing_closer():
    seq = serialize_box(BBox(1, 2, 3, 4), 2)
    ids = seq.ids.copy()
    ids = np.delete(ids, 4)  # drop </x_min>
    bad = TokenSequence(ids, np.zeros(len(ids), dtype=np.int8))
    with pytest.raises(Malformed):
        parse_box(bad, 2)


def test_parse_rejects_eos_inside_field():
    seq = serialize_box(BBox(1, 2, 3, 4), 2)
    ids = seq.ids.copy()
    ids[2] = codec.EOS_ID  # first digit slot of x_min
    bad = TokenSequence(ids, np.zeros(len(ids), dtype=np.int8))
    with pytest.raises(Malformed):
        parse_box(bad, 2)


def test_parse_rejects_wrong_digit_count():
    seq = serialize_box(BBox(1, 2, 3, 4), 3)
    with pytest.raises(Malformed):
        parse_box(seq, 2)


def test_parse_ignores_trailing_pad():
    seq = serialize_box(BBox(9, 8, 20, 30), 2)
    padded = TokenSequence(
        np.concatenate([seq.ids, np.zeros(5, dtype=np.int64)]),
        np.concatenate([seq.roles, np.zeros(5, dtype=np.int8)]),
    )
    assert parse_box(padded, 2) == BBox(9, 8, 20, 30)


def test_structural_corruption_always_malformed():
    seq = serialize_box(BBox(12, 3, 45, 60), 2)
    structural = [i for i, r in enumerate(seq.roles) if r != Role.COORD_VALUE]
    for pos in structural:
        for new_id in range(codec.N_FIXED_IDS):
            if new_id == seq.ids[pos]:
                continue
            ids = seq.ids.copy()
            ids[pos] = new_id
            with pytest.raises(Malformed):
                parse_box(TokenSequence(ids, np.zeros(len(ids), dtype=np.int8)), 2)


def test_serialize_point_template():
    seq = serialize_point(48, 32, digits=2)
    assert surfaces(seq) == [
        "<predict_bbox>",
        "<x_ctr>", "4", "8", "</x_ctr>",
        "<y_ctr>", "3", "2", "</y_ctr>",
        "</predict_bbox>", "<eos>",
    ]


def test_point_round_trip():
    assert parse_point(serialize_point(0, 0, 2), 2) == Point(0, 0)
    for _ in range(100):
        x, y = rng.integers(0, 99, size=2).tolist()
        assert parse_point(serialize_point(x, y, 2), 2) == Point(x, y)


def test_role_value_counts():
    box = serialize_box(BBox(1, 2, 3, 4), 3)
    assert int((box.roles == Role.COORD_VALUE).sum()) == 12
    pt = serialize_point(7, 9, 3)
    assert int((pt.roles == Role.COORD_VALUE).sum()) == 6


def test_tokenize_instruction_roles():
    seq = tokenize_instruction(["click", "alpha"], VOCAB)
    assert surfaces(seq) == ["<instruction>", "click", "alpha", "</instruction>"]
    assert all(r == Role.INSTRUCTION for r in seq.roles)
    with pytest.raises(VocabError) as exc:
        tokenize_instruction(["click", "zzz"], VOCAB)
    assert "zzz" in str(exc.value)


def test_build_target_sequence():
    instr = tokenize_instruction(["click", "alpha"], VOCAB)
    seq = build_target_sequence(instr, BBox(1, 2, 3, 4), "bbox", 2)
    assert list(seq.roles[:4]) == [Role.INSTRUCTION] * 4
    assert seq.ids[4] == codec.PREDICT_OPEN_ID

    empty = tokenize_instruction([], VOCAB)
    seq2 = build_target_sequence(empty, BBox(1, 2, 3, 4), "bbox", 2)
    assert surfaces(seq2)[:3] == ["<instruction>", "</instruction>", "<predict_bbox>"]

    pt = build_target_sequence(instr, BBox(10, 10, 20, 20), "centerpoint", 2)
    assert parse_point(TokenSequence(pt.ids[4:], pt.roles[4:]), 2) == Point(15, 15)

    with pytest.raises(ValueError):
        build_target_sequence(instr, BBox(1, 2, 3, 4), "boxes", 2)


def test_sequence_length_budget():
    with pytest.raises(ValueError):
        TokenSequence(np.zeros(129, dtype=np.int64), np.zeros(129, dtype=np.int8))


def test_coord_value_role_requires_digit():
    with pytest.raises(ValueError):
        TokenSequence(np.array([codec.EOS_ID]), np.array([Role.COORD_VALUE]))


def test_vocab_build_save_load(tmp_path):
    v = Vocab(["click", "red", "box"])
    assert v.id("<pad>") == 0
    assert v.id("<eos>") == 1
    assert v.id("0") == codec.DIGIT_BASE_ID
    assert v.token(v.id("red")) == "red"
    path = tmp_path / "vocab.txt"
    v.save(path)
    v2 = Vocab.load(path)
    assert v2.tokens == v.tokens
    with pytest.raises(ValueError):
        Vocab(["click", "click"])
    with pytest.raises(ValueError):
        Vocab(["<pad>"])


def test_decode_template_groups():
    t = decode_template("bbox", 2)
    assert len(t.value_positions) == 8
    assert set(t.groups[t.value_positions]) == {codec.GROUP_BOX}
    tv = decode_template("vertices", 2)
    assert list(tv.groups[tv.value_positions]) == [codec.GROUP_POINT1] * 4 + [codec.GROUP_POINT2] * 4
    tc = decode_template("centerpoint", 2)
    assert len(tc.value_positions) == 4
    assert set(tc.groups[tc.value_positions]) == {codec.GROUP_POINT1}
    # template skeleton + sampled digits parses back
    ids = t.ids.copy()
    ids[t.value_positions] = codec.DIGIT_BASE_ID  # all zeros
    full = np.concatenate([[codec.PREDICT_OPEN_ID], ids])
    box = parse_box(TokenSequence(full, np.zeros(len(full), dtype=np.int8)), 2)
    assert box == BBox(0, 0, 0, 0)
