"""Procedural UI-like screenshots with exact ground truth.

Each sample renders non-overlapping solid-color rectangles on a light
background, every rectangle stamped with its 2-letter label as fixed 5x7
bitmap glyphs, and pairs the image with a templated instruction that
identifies exactly one element:

    click <label>
    click the <color> box
    click the box right|left|above|below of <label>

Generation is a pure function of (seed, spec). Relational templates are
only emitted when the (anchor, relation) pair has a single satisfier, so
referents are unique by construction.

On disk: binary PPM (P6) images, line-delimited JSON annotations and a
genspec echo; integer fields round-trip exactly, pixels within 1/255.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .codec import N_FIXED_IDS, TokenSequence, Vocab, tokenize_instruction
from .geometry import BBox

SCHEMA_VERSION = 1

TEMPLATE_WORDS = ("click", "the", "box", "of", "right", "left", "above", "below")

COLOR_NAMES = (
    "red", "green", "blue", "yellow", "cyan",
    "magenta", "orange", "purple", "teal", "gray",
)
COLOR_RGB = {
    "red": (0.80, 0.15, 0.15),
    "green": (0.15, 0.65, 0.25),
    "blue": (0.20, 0.35, 0.85),
    "yellow": (0.92, 0.85, 0.20),
    "cyan": (0.15, 0.75, 0.78),
    "magenta": (0.80, 0.20, 0.78),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.25, 0.75),
    "teal": (0.10, 0.50, 0.50),
    "gray": (0.55, 0.55, 0.55),
}
BACKGROUND = (0.94, 0.94, 0.95)

_CONSONANTS = "bdfghklmnprstvz"
_VOWELS = "aeiou"

# 5x7 letterforms for every letter a label can contain
_FONT = {
    "a": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "b": ("####.", "#...#", "####.", "#...#", "#...#", "#...#", "####."),
    "d": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "e": ("#####", "#....", "####.", "#....", "#....", "#....", "#####"),
    "f": ("#####", "#....", "####.", "#....", "#....", "#....", "#...."),
    "g": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."),
    "h": ("#...#", "#...#", "#####", "#...#", "#...#", "#...#", "#...#"),
    "i": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "#####"),
    "k": ("#...#", "#..#.", "###..", "#.#..", "#..#.", "#...#", "#...#"),
    "l": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "m": ("#...#", "##.##", "#.#.#", "#...#", "#...#", "#...#", "#...#"),
    "n": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "o": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "p": ("####.", "#...#", "####.", "#....", "#....", "#....", "#...."),
    "r": ("####.", "#...#", "####.", "#.#..", "#..#.", "#...#", "#...#"),
    "s": (".####", "#....", ".###.", "....#", "....#", "....#", "####."),
    "t": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "u": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "v": ("#...#", "#...#", "#...#", "#...#", ".#.#.", ".#.#.", "..#.."),
    "z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
}
GLYPH_W, GLYPH_H = 5, 7


class PlacementError(RuntimeError):
    """Layout rejection-sampling exhausted its retry budget."""


class DatasetError(ValueError):
    """Missing, corrupt or schema-incompatible dataset files."""


def make_label_pool(k):
    """First k 2-letter consonant+vowel labels, canonical order."""
    pool = [c + v for c in _CONSONANTS for v in _VOWELS]
    if k > len(pool):
        raise ValueError(f"at most {len(pool)} labels available, asked for {k}")
    return tuple(pool[:k])


@dataclass(frozen=True)
class GenSpec:
    width: int = 96
    height: int = 64
    channels: int = 3
    min_elements: int = 2
    max_elements: int = 4
    min_elem_w: int = 15
    max_elem_w: int = 28
    min_elem_h: int = 11
    max_elem_h: int = 18
    word_vocab_size: int = 40
    palette_size: int = 6
    mix_label: float = 0.5
    mix_color: float = 0.3
    mix_relational: float = 0.2
    labels: tuple = ()
    colors: tuple = ()

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels", make_label_pool(self.word_vocab_size))
        if not self.colors:
            object.__setattr__(self, "colors", COLOR_NAMES[: self.palette_size])
        if self.channels != 3:
            raise ValueError("only 3-channel rendering is supported")
        if self.min_elements < 1 or self.max_elements < self.min_elements:
            raise ValueError("element count range invalid")
        if self.max_elem_w > self.width or self.max_elem_h > self.height:
            raise ValueError("element size range exceeds image")
        if self.min_elem_w < GLYPH_W * 2 + 3 or self.min_elem_h < GLYPH_H + 2:
            raise ValueError("elements too small to carry a 2-letter glyph stamp")
        if self.max_elements > len(self.labels):
            raise ValueError("label pool smaller than max element count")
        if self.mix_label + self.mix_color + self.mix_relational <= 0:
            raise ValueError("template mix must have positive mass")
        for c in self.colors:
            if c not in COLOR_RGB:
                raise ValueError(f"unknown color {c!r}")


@dataclass(frozen=True)
class Element:
    label: str
    color: str
    box: BBox


@dataclass
class GroundingSample:
    image: np.ndarray          # (H, W, C) float64 in [0, 1]
    instruction: TokenSequence
    instruction_text: str
    gt: BBox
    manifest: tuple
    sample_id: int = -1


# -- relations -------------------------------------------------------------------

RELATIONS = ("right", "left", "above", "below")


def _spans_overlap(a0, a1, b0, b1):
    return b0 <= a1 and b1 >= a0


def relation_holds(rel, anchor: BBox, other: BBox) -> bool:
    """Strict directional relation with perpendicular span overlap."""
    if rel == "right":
        return other.x_min > anchor.x_max and _spans_overlap(anchor.y_min, anchor.y_max, other.y_min, other.y_max)
    if rel == "left":
        return other.x_max < anchor.x_min and _spans_overlap(anchor.y_min, anchor.y_max, other.y_min, other.y_max)
    if rel == "above":
        return other.y_max < anchor.y_min and _spans_overlap(anchor.x_min, anchor.x_max, other.x_min, other.x_max)
    if rel == "below":
        return other.y_min > anchor.y_max and _spans_overlap(anchor.x_min, anchor.x_max, other.x_min, other.x_max)
    raise ValueError(f"unknown relation {rel!r}")


# -- rendering -------------------------------------------------------------------

def _ink_for(rgb):
    lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    return (0.0, 0.0, 0.0) if lum > 0.45 else (1.0, 1.0, 1.0)


def _stamp_label(img, label, x, y, ink):
    for ci, ch in enumerate(label):
        rows = _FONT[ch]
        x0 = x + ci * (GLYPH_W + 1)
        for ry, row in enumerate(rows):
            for rx, cell in enumerate(row):
                if cell == "#":
                    img[y + ry, x0 + rx] = ink


def render(spec: GenSpec, elements) -> np.ndarray:
    img = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    img[:, :] = BACKGROUND
    for el in elements:
        b = el.box
        rgb = COLOR_RGB[el.color]
        img[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1] = rgb
        _stamp_label(img, el.label, b.x_min + 2, b.y_min + 2, _ink_for(rgb))
    return img


# -- generation ------------------------------------------------------------------

def _place_elements(rng, spec):
    n = int(rng.integers(spec.min_elements, spec.max_elements + 1))
    for _ in range(40):  # layout attempts
        boxes = []
        ok = True
        for _ in range(n):
            placed = False
            for _ in range(60):  # placements per element
                w = int(rng.integers(spec.min_elem_w, spec.max_elem_w + 1))
                h = int(rng.integers(spec.min_elem_h, spec.max_elem_h + 1))
                x = int(rng.integers(0, spec.width - w + 1))
                y = int(rng.integers(0, spec.height - h + 1))
                cand = BBox(x, y, x + w - 1, y + h - 1)
                # 2px clearance keeps elements visually separate
                if all(
                    cand.x_min > b.x_max + 2 or cand.x_max < b.x_min - 2
                    or cand.y_min > b.y_max + 2 or cand.y_max < b.y_min - 2
                    for b in boxes
                ):
                    boxes.append(cand)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return boxes
    raise PlacementError(f"could not place {n} elements in {spec.width}x{spec.height}")


def _pick_instruction(rng, spec, elements):
    """Choose a template and target; returns (words, gt_index)."""
    mix = np.array([spec.mix_label, spec.mix_color, spec.mix_relational], dtype=np.float64)
    mix /= mix.sum()
    kind = ("label", "color", "relational")[int(rng.choice(3, p=mix))]

    if kind == "relational":
        candidates = []
        for ai, anchor in enumerate(elements):
            for rel in RELATIONS:
                matches = [
                    oi
                    for oi, other in enumerate(elements)
                    if oi != ai and relation_holds(rel, anchor.box, other.box)
                ]
                if len(matches) == 1:
                    candidates.append((ai, rel, matches[0]))
        if candidates:
            ai, rel, ti = candidates[int(rng.integers(0, len(candidates)))]
            return ["click", "the", "box", rel, "of", elements[ai].label], ti
        kind = "color"  # fall through

    if kind == "color":
        counts = {}
        for el in elements:
            counts[el.color] = counts.get(el.color, 0) + 1
        unique = [c for c in spec.colors if counts.get(c) == 1]
        if unique:
            color = unique[int(rng.integers(0, len(unique)))]
            ti = next(i for i, el in enumerate(elements) if el.color == color)
            return ["click", "the", color, "box"], ti
        kind = "label"  # fall through

    ti = int(rng.integers(0, len(elements)))
    return ["click", elements[ti].label], ti


def build_vocab(spec: GenSpec, label_pool=None) -> Vocab:
    """Vocabulary covering the template words, palette and label pool.

    In the unseen regime a split's spec carries only its label subset;
    pass the full pool so train and test agree on every token id.
    """
    words = list(TEMPLATE_WORDS) + list(spec.colors)
    seen = set(words)
    for lab in spec.labels if label_pool is None else tuple(label_pool):
        if lab not in seen:
            words.append(lab)
            seen.add(lab)
    return Vocab(words)


def gen_sample(seed: int, spec: GenSpec, vocab: Vocab = None) -> GroundingSample:
    """Deterministic sample for (seed, spec). Raises PlacementError when the
    layout budget runs out; callers reseed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    boxes = _place_elements(rng, spec)
    labels = [spec.labels[i] for i in rng.choice(len(spec.labels), size=len(boxes), replace=False)]
    colors = [spec.colors[i] for i in rng.integers(0, len(spec.colors), size=len(boxes))]
    elements = tuple(Element(l, c, b) for l, c, b in zip(labels, colors, boxes))
    words, ti = _pick_instruction(rng, spec, elements)
    if vocab is None:
        vocab = build_vocab(spec)
    return GroundingSample(
        image=render(spec, elements),
        instruction=tokenize_instruction(words, vocab),
        instruction_text=" ".join(words),
        gt=elements[ti].box,
        manifest=elements,
    )


def _derive_seed(master, domain, index, retry=0):
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, domain, index, retry])
    return int(ss.generate_state(1, np.uint64)[0])


def _gen_many(spec, n, master, domain, vocab):
    out = []
    for i in range(n):
        for retry in range(8):
            try:
                s = gen_sample(_derive_seed(master, domain, i, retry), spec, vocab)
                break
            except PlacementError:
                continue
        else:
            raise PlacementError(f"sample {i}: placement failed across reseeds")
        s.sample_id = i
        out.append(s)
    return out


def gen_split(spec: GenSpec, n_train: int, n_test: int, regime: str, seed: int = 0):
    """Train/test sample lists. regime 'seen' shares the label pool;
    'unseen' partitions it so test label words never occur in training."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    if regime not in ("seen", "unseen"):
        raise ValueError(f"regime must be seen|unseen, got {regime!r}")
    vocab = build_vocab(spec)
    if regime == "seen":
        train_spec = test_spec = spec
    else:
        pool = list(spec.labels)
        half = len(pool) // 2
        if half < spec.max_elements:
            raise ValueError("label pool too small to partition into unseen split")
        perm = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 5]))
        ).permutation(len(pool))
        train_labels = tuple(pool[i] for i in sorted(perm[:half]))
        test_labels = tuple(pool[i] for i in sorted(perm[half:]))
        train_spec = dataclasses.replace(spec, labels=train_labels)
        test_spec = dataclasses.replace(spec, labels=test_labels)
    train = _gen_many(train_spec, n_train, seed, 1, vocab)
    test = _gen_many(test_spec, n_test, seed, 2, vocab)
    return train, test


# -- PPM i/o ---------------------------------------------------------------------

def write_ppm(path, img):
    h, w, c = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise DatasetError(f"{path}: not a binary PPM")
    # header = magic + 3 whitespace-separated ints, then a single whitespace byte
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    raw = blob[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


# -- dataset i/o -------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list
    vocab: Vocab
    spec: GenSpec
    meta: dict


def _json_line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_dataset(samples, out_dir, spec: GenSpec, meta=None):
    """images/ + annotations.jsonl + genspec.json under out_dir."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    vocab = build_vocab(spec, label_pool=(meta or {}).get("vocab_labels") or spec.labels)
    with open(os.path.join(out_dir, "annotations.jsonl"), "w", encoding="ascii") as fh:
        for i, s in enumerate(samples):
            name = f"images/{i:05d}.ppm"
            write_ppm(os.path.join(out_dir, name), s.image)
            fh.write(_json_line({
                "schema_version": SCHEMA_VERSION,
                "id": i,
                "image_file": name,
                "instruction_text": s.instruction_text,
                "gt": list(s.gt),
                "manifest": [
                    {"label": e.label, "color": e.color, "box": list(e.box)}
                    for e in s.manifest
                ],
            }))
    echo = {
        "schema_version": SCHEMA_VERSION,
        "genspec": {**dataclasses.asdict(spec), "labels": list(spec.labels), "colors": list(spec.colors)},
        "vocab_words": list(vocab.tokens[N_FIXED_IDS:]),
        "n": len(samples),
    }
    echo.update(meta or {})
    with open(os.path.join(out_dir, "genspec.json"), "w", encoding="ascii") as fh:
        fh.write(json.dumps(echo, sort_keys=True, indent=1))


def read_dataset(dir_path) -> Dataset:
    spec_path = os.path.join(dir_path, "genspec.json")
    ann_path = os.path.join(dir_path, "annotations.jsonl")
    if not (os.path.exists(spec_path) and os.path.exists(ann_path)):
        raise DatasetError(f"{dir_path}: missing genspec.json or annotations.jsonl")
    with open(spec_path, "r", encoding="ascii") as fh:
        echo = json.load(fh)
    if echo.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{dir_path}: schema_version {echo.get('schema_version')} != {SCHEMA_VERSION}")
    gs = dict(echo["genspec"])
    gs["labels"] = tuple(gs.get("labels", ()))
    gs["colors"] = tuple(gs.get("colors", ()))
    spec = GenSpec(**gs)
    vocab = Vocab(echo["vocab_words"])

    samples = []
    with open(ann_path, "r", encoding="ascii") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise DatasetError(f"{dir_path}: record schema mismatch")
            words = rec["instruction_text"].split()
            samples.append(GroundingSample(
                image=read_ppm(os.path.join(dir_path, rec["image_file"])),
                instruction=tokenize_instruction(words, vocab),
                instruction_text=rec["instruction_text"],
                gt=BBox(*rec["gt"]),
                manifest=tuple(
                    Element(m["label"], m["color"], BBox(*m["box"])) for m in rec["manifest"]
                ),
                sample_id=int(rec["id"]),
            ))
    return Dataset(samples=samples, vocab=vocab, spec=spec, meta=echo)
