"""Token vocabulary and the linguistic coordinate format.

A grounding target is serialized as structural prompt tokens framing
fixed-width, zero-padded base-10 digit tokens:

    <instruction> click ba </instruction>
    <predict_bbox> <x_min> 0 1 2 </x_min> ... </predict_bbox> <eos>

Structural tokens and digits occupy a fixed id range (pad is always 0),
so serialization and parsing never need a Vocab instance; only
instruction words do. Every position carries a role used downstream for
loss masking and reward assignment.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import BBox, Point, center

MAX_SEQ_LEN = 128

STRUCTURAL_TOKENS = (
    "<pad>", "<eos>",
    "<instruction>", "</instruction>",
    "<predict_bbox>", "</predict_bbox>",
    "<x_min>", "</x_min>", "<y_min>", "</y_min>",
    "<x_max>", "</x_max>", "<y_max>", "</y_max>",
    "<x_ctr>", "</x_ctr>", "<y_ctr>", "</y_ctr>",
)
DIGIT_TOKENS = tuple("0123456789")

PAD_ID = 0
EOS_ID = 1
INSTR_OPEN_ID = 2
INSTR_CLOSE_ID = 3
PREDICT_OPEN_ID = 4
PREDICT_CLOSE_ID = 5
X_MIN_OPEN_ID, X_MIN_CLOSE_ID = 6, 7
Y_MIN_OPEN_ID, Y_MIN_CLOSE_ID = 8, 9
X_MAX_OPEN_ID, X_MAX_CLOSE_ID = 10, 11
Y_MAX_OPEN_ID, Y_MAX_CLOSE_ID = 12, 13
X_CTR_OPEN_ID, X_CTR_CLOSE_ID = 14, 15
Y_CTR_OPEN_ID, Y_CTR_CLOSE_ID = 16, 17
DIGIT_BASE_ID = len(STRUCTURAL_TOKENS)  # ids 18..27
N_FIXED_IDS = DIGIT_BASE_ID + 10

_BOX_FIELDS = (
    (X_MIN_OPEN_ID, X_MIN_CLOSE_ID),
    (Y_MIN_OPEN_ID, Y_MIN_CLOSE_ID),
    (X_MAX_OPEN_ID, X_MAX_CLOSE_ID),
    (Y_MAX_OPEN_ID, Y_MAX_CLOSE_ID),
)
_POINT_FIELDS = (
    (X_CTR_OPEN_ID, X_CTR_CLOSE_ID),
    (Y_CTR_OPEN_ID, Y_CTR_CLOSE_ID),
)

VARIANTS = ("bbox", "centerpoint", "vertices", "alltokens")


class Role(IntEnum):
    PAD = 0
    INSTRUCTION = 1
    TASK_PROMPT = 2
    COORD_PROMPT = 3
    COORD_VALUE = 4
    EOS = 5


class Malformed(Exception):
    """Decoded sequence does not match the structural template."""


class VocabError(KeyError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__("out-of-vocabulary words: " + " ".join(self.words))


class Vocab:
    """Closed ordered vocabulary: structural tokens, digits, then words."""

    def __init__(self, words=()):
        tokens = list(STRUCTURAL_TOKENS) + list(DIGIT_TOKENS) + list(words)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token surface forms in vocabulary")
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self._index[token]

    def token(self, idx):
        return self.tokens[idx]

    def __contains__(self, token):
        return token in self._index

    def encode_words(self, words):
        missing = [w for w in words if w not in self._index]
        if missing:
            raise VocabError(missing)
        return [self._index[w] for w in words]

    def save(self, path):
        """One surface form per line; line index == token id."""
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        fixed = tuple(tokens[:N_FIXED_IDS])
        if fixed != STRUCTURAL_TOKENS + DIGIT_TOKENS:
            raise ValueError(f"vocabulary file {path} has unexpected fixed-token prefix")
        return cls(tokens[N_FIXED_IDS:])


@dataclass
class TokenSequence:
    """Token ids with equal-length per-position roles."""

    ids: np.ndarray
    roles: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.int8)
        if self.ids.shape != self.roles.shape or self.ids.ndim != 1:
            raise ValueError("ids/roles must be equal-length 1D")
        if len(self.ids) > MAX_SEQ_LEN:
            raise ValueError(f"sequence length {len(self.ids)} exceeds {MAX_SEQ_LEN}")
        bad = (self.roles == Role.COORD_VALUE) & (
            (self.ids < DIGIT_BASE_ID) | (self.ids >= DIGIT_BASE_ID + 10)
        )
        if bad.any():
            raise ValueError("coord_value positions must carry digit tokens")

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        return (
            isinstance(other, TokenSequence)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.roles, other.roles)
        )


def digits_for(width: int, height: int) -> int:
    """Digit-token width needed for pixel coordinates on a width x height
    image: enough base-10 digits for the largest coordinate."""
    return max(1, len(str(max(width, height) - 1)))


def cat(*seqs: TokenSequence) -> TokenSequence:
    return TokenSequence(
        np.concatenate([s.ids for s in seqs]),
        np.concatenate([s.roles for s in seqs]),
    )


def _digit_ids(value, digits):
    if not (0 <= value < 10 ** digits):
        raise ValueError(f"coordinate {value} does not fit in {digits} digit tokens")
    s = str(value).zfill(digits)
    return [DIGIT_BASE_ID + int(c) for c in s]


def _serialize_fields(values, fields, digits):
    ids = [PREDICT_OPEN_ID]
    roles = [Role.TASK_PROMPT]
    for value, (open_id, close_id) in zip(values, fields):
        ids.append(open_id)
        roles.append(Role.COORD_PROMPT)
        ids.extend(_digit_ids(value, digits))
        roles.extend([Role.COORD_VALUE] * digits)
        ids.append(close_id)
        roles.append(Role.COORD_PROMPT)
    ids.extend([PREDICT_CLOSE_ID, EOS_ID])
    roles.extend([Role.TASK_PROMPT, Role.EOS])
    return TokenSequence(np.array(ids), np.array(roles))


def serialize_box(box: BBox, digits: int) -> TokenSequence:
    return _serialize_fields((box.x_min, box.y_min, box.x_max, box.y_max), _BOX_FIELDS, digits)


def serialize_point(x: int, y: int, digits: int) -> TokenSequence:
    return _serialize_fields((x, y), _POINT_FIELDS, digits)


def _parse_fields(seq: TokenSequence, fields, digits):
    ids = seq.ids
    # trailing padding is tolerated; anything else must match exactly
    n = len(ids)
    while n > 0 and ids[n - 1] == PAD_ID:
        n -= 1
    expect_len = 1 + len(fields) * (digits + 2) + 2
    if n != expect_len:
        raise Malformed(f"length {n}, expected {expect_len}")
    pos = 0
    if ids[pos] != PREDICT_OPEN_ID:
        raise Malformed("missing <predict_bbox>")
    pos += 1
    values = []
    for open_id, close_id in fields:
        if ids[pos] != open_id:
            raise Malformed("bad field opener")
        pos += 1
        value = 0
        for _ in range(digits):
            d = ids[pos] - DIGIT_BASE_ID
            if not (0 <= d <= 9):
                raise Malformed("non-digit in value slot")
            value = value * 10 + int(d)
            pos += 1
        if ids[pos] != close_id:
            raise Malformed("bad field closer")
        pos += 1
        values.append(value)
    if ids[pos] != PREDICT_CLOSE_ID or ids[pos + 1] != EOS_ID:
        raise Malformed("missing </predict_bbox> <eos> tail")
    return values


def parse_box(seq: TokenSequence, digits: int) -> BBox:
    """Inverse of serialize_box. Raises Malformed on any structural
    deviation; the returned box is NOT validity-checked against image
    bounds or min<=max (caller's job)."""
    return BBox(*_parse_fields(seq, _BOX_FIELDS, digits))


def parse_point(seq: TokenSequence, digits: int) -> Point:
    return Point(*_parse_fields(seq, _POINT_FIELDS, digits))


def tokenize_instruction(words, vocab: Vocab) -> TokenSequence:
    """<instruction> {words} </instruction>, every position role INSTRUCTION."""
    ids = [INSTR_OPEN_ID] + vocab.encode_words(words) + [INSTR_CLOSE_ID]
    return TokenSequence(np.array(ids), np.full(len(ids), Role.INSTRUCTION, dtype=np.int8))


def build_target_sequence(instruction: TokenSequence, gt: BBox, variant: str, digits: int) -> TokenSequence:
    """Full teacher-forcing target: instruction segment + serialized target."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "centerpoint":
        c = center(gt)
        tail = serialize_point(c.x, c.y, digits)
    else:
        tail = serialize_box(gt, digits)
    return cat(instruction, tail)


# -- decode templates ---------------------------------------------------------------
#
# The generated part of a sequence (everything after the <predict_bbox>
# prompt) follows a fixed skeleton per variant; value slots are marked -1.
# Groups name the reward unit each value slot belongs to.

GROUP_NONE = -1
GROUP_BOX = 0
GROUP_POINT1 = 1
GROUP_POINT2 = 2


@dataclass(frozen=True)
class DecodeTemplate:
    variant: str
    digits: int
    ids: np.ndarray     # -1 marks a sampled value slot
    roles: np.ndarray
    groups: np.ndarray  # reward group per position, GROUP_NONE outside slots

    def __len__(self):
        return len(self.ids)

    @property
    def value_positions(self):
        return np.nonzero(self.ids < 0)[0]


def decode_template(variant: str, digits: int) -> DecodeTemplate:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "centerpoint":
        ser = serialize_point(0, 0, digits)
        slot_groups = [GROUP_POINT1] * (2 * digits)
    else:
        ser = serialize_box(BBox(0, 0, 0, 0), digits)
        if variant == "vertices":
            slot_groups = [GROUP_POINT1] * (2 * digits) + [GROUP_POINT2] * (2 * digits)
        else:
            slot_groups = [GROUP_BOX] * (4 * digits)
    ids = ser.ids[1:].copy()  # drop <predict_bbox>: it is part of the prompt
    roles = ser.roles[1:].copy()
    groups = np.full(len(ids), GROUP_NONE, dtype=np.int8)
    slot = 0
    for i in range(len(ids)):
        if roles[i] == Role.COORD_VALUE:
            ids[i] = -1
            groups[i] = slot_groups[slot]
            slot += 1
    return DecodeTemplate(variant, digits, ids, roles, groups)
