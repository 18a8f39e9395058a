"""Synthetic multilingual image-translation tasks.

Languages are bijections from a shared concept inventory onto disjoint blocks of
surface token ids plus a word-order rule. A sample is a source sentence rendered
with a 5x7 bitmap font, its surface tokens, and the target-language translation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_CONCEPTS = 40
SURFACE_VOCAB = 120

# special tokens live after the surface block
PAD = 120
BOS = 121
EOS = 122
OCR = 123
TRANSLATE = 124
LANG_BASE = 125
MAX_LANG_TOKENS = 9
VOCAB_SIZE = LANG_BASE + MAX_LANG_TOKENS  # 134

ORDER_RULES = ("identity", "reverse", "swap-adjacent-pairs")
SPLITS = {"train": 0, "score": 1, "eval": 2}
MIN_LEN, MAX_LEN = 3, 8

GLYPH_W, GLYPH_H = 5, 7
GLYPH_GAP = 1
TOKEN_GAP = 3
DISPLAY_LEN = 3

_FONT_ROWS = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "10001", "01010", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
_DISPLAY_ALPHABET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"


class FontTable:
    """Immutable 5x7 glyph bitmaps for A-Z and 0-9."""

    def __init__(self, rows: dict[str, tuple[str, ...]] = _FONT_ROWS):
        glyphs = {}
        for ch, pattern in rows.items():
            g = np.array([[int(c) for c in row] for row in pattern], dtype=np.uint8)
            if g.shape != (GLYPH_H, GLYPH_W):
                raise ValueError(f"glyph {ch!r} is {g.shape}, expected {(GLYPH_H, GLYPH_W)}")
            g.setflags(write=False)
            glyphs[ch] = g
        self._glyphs = glyphs
        h = hashlib.sha256()
        for ch in sorted(glyphs):
            h.update(ch.encode())
            h.update(glyphs[ch].tobytes())
        self.version = h.hexdigest()[:16]

    def __contains__(self, ch: str) -> bool:
        return ch in self._glyphs

    def __getitem__(self, ch: str) -> np.ndarray:
        return self._glyphs[ch]


DEFAULT_FONT = FontTable()


@dataclass(frozen=True)
class PixelGrid:
    pixels: np.ndarray  # (height, width) uint8 in {0, 1}

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, PixelGrid) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self) -> int:
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def digest(self) -> str:
        return hashlib.sha256(str(self.pixels.shape).encode() + self.pixels.tobytes()).hexdigest()


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: int
    surface: tuple[int, ...]  # concept -> surface token id
    order_rule: str

    @property
    def inverse(self) -> dict[int, int]:
        return {tok: c for c, tok in enumerate(self.surface)}

    def apply_order(self, seq: list[int]) -> list[int]:
        return apply_order(self.order_rule, seq)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    source: LanguageSpec
    target: LanguageSpec

    def __post_init__(self):
        if self.source.lang_id == self.target.lang_id:
            raise ValueError("task source and target languages must differ")

    @property
    def name(self) -> str:
        return f"L{self.source.lang_id}-L{self.target.lang_id}"

    def translate(self, source_tokens: list[int]) -> list[int]:
        inv = self.source.inverse
        concepts = [inv[tok] for tok in source_tokens]
        return self.target.apply_order([self.target.surface[c] for c in concepts])


@dataclass(frozen=True)
class Sample:
    v: PixelGrid
    s: tuple[int, ...]
    t: tuple[int, ...]


def apply_order(rule: str, seq: list[int]) -> list[int]:
    seq = list(seq)
    if rule == "identity":
        return seq
    if rule == "reverse":
        return seq[::-1]
    if rule == "swap-adjacent-pairs":
        out = seq[:]
        for i in range(0, len(seq) - 1, 2):
            out[i], out[i + 1] = seq[i + 1], seq[i]
        return out
    raise ValueError(f"unknown order rule {rule!r}")


def make_languages(n: int, seed: int) -> list[LanguageSpec]:
    if n < 2:
        raise ValueError("need at least 2 languages")
    if n * N_CONCEPTS > SURFACE_VOCAB or n > MAX_LANG_TOKENS:
        raise ValueError(f"{n} languages do not fit a surface vocabulary of {SURFACE_VOCAB}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4C414E47]))
    langs = []
    for j in range(n):
        block = np.arange(j * N_CONCEPTS, (j + 1) * N_CONCEPTS)
        surface = tuple(int(x) for x in rng.permutation(block))
        langs.append(LanguageSpec(j, surface, ORDER_RULES[j % len(ORDER_RULES)]))
    return langs


def make_tasks(languages: list[LanguageSpec], pairs: list[tuple[int, int]] | None = None) -> list[TaskSpec]:
    """Default pairs form a cycle: L0->L1, L1->L2, ..., L(n-1)->L0."""
    n = len(languages)
    if pairs is None:
        pairs = [(j, (j + 1) % n) for j in range(n)]
    return [TaskSpec(k, languages[a], languages[b]) for k, (a, b) in enumerate(pairs)]


def display_string(token: int) -> str:
    """Fixed 3-character label for a surface token (injective over the surface block)."""
    if not 0 <= token < SURFACE_VOCAB:
        raise ValueError(f"token {token} is not a surface token")
    base = len(_DISPLAY_ALPHABET)
    code = (token * 2971 + 1297) % base ** DISPLAY_LEN
    chars = []
    for _ in range(DISPLAY_LEN):
        code, r = divmod(code, base)
        chars.append(_DISPLAY_ALPHABET[r])
    return "".join(reversed(chars))


def text_width(n_glyphs: int, n_tokens: int) -> int:
    """Unpadded width of a rendered line."""
    if n_tokens == 0:
        return 0
    return (GLYPH_W + GLYPH_GAP) * n_glyphs - GLYPH_GAP + (TOKEN_GAP - GLYPH_GAP) * (n_tokens - 1)


def render_text(tokens, font: FontTable = DEFAULT_FONT, patch_cols: int = 6) -> PixelGrid:
    labels = [display_string(t) for t in tokens]
    for label in labels:
        bad = [c for c in label if c not in font]
        if bad:
            raise ValueError(f"unsupported character(s) {bad} in display string {label!r}")
    n_glyphs = sum(len(label) for label in labels)
    width = text_width(n_glyphs, len(labels))
    padded = max(patch_cols, -(-width // patch_cols) * patch_cols)
    pixels = np.zeros((GLYPH_H, padded), dtype=np.uint8)
    x = 0
    for k, label in enumerate(labels):
        if k:
            x += TOKEN_GAP - GLYPH_GAP
        for ch in label:
            pixels[:, x:x + GLYPH_W] = font[ch]
            x += GLYPH_W + GLYPH_GAP
    pixels.setflags(write=False)
    return PixelGrid(pixels)


def sample_dataset(task: TaskSpec, n: int, seed: int, split: str,
                   font: FontTable = DEFAULT_FONT, patch_cols: int = 6) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, task.task_id, SPLITS[split], 0x53414D50]))
    out = []
    for _ in range(n):
        length = int(rng.integers(MIN_LEN, MAX_LEN + 1))
        concepts = rng.integers(0, N_CONCEPTS, size=length)
        s = tuple(task.source.surface[int(c)] for c in concepts)
        t = tuple(task.translate(list(s)))
        out.append(Sample(render_text(s, font, patch_cols), s, t))
    return out


def instruction_tokens(task: TaskSpec, kind: str) -> list[int]:
    if kind == "ocr-probe":
        return [OCR]
    if kind == "translate":
        return [TRANSLATE, LANG_BASE + task.source.lang_id, LANG_BASE + task.target.lang_id]
    raise ValueError(f"unknown instruction kind {kind!r}")


def supervision_target(sample: Sample, kind: str) -> tuple[int, ...]:
    """Transcription for the OCR probe, translation otherwise."""
    return sample.s if kind == "ocr-probe" else sample.t


# -- dataset dump --------------------------------------------------------------

def rle_encode(grid: PixelGrid) -> str:
    """``HxW:`` followed by comma-separated run lengths, starting with a background run."""
    flat = grid.pixels.reshape(-1)
    runs = []
    current, count = 0, 0
    for bit in flat:
        if bit == current:
            count += 1
        else:
            runs.append(count)
            current, count = int(bit), 1
    runs.append(count)
    return f"{grid.height}x{grid.width}:" + ",".join(map(str, runs))


def rle_decode(text: str) -> PixelGrid:
    dims, runs = text.split(":")
    h, w = (int(x) for x in dims.split("x"))
    flat = np.zeros(h * w, dtype=np.uint8)
    pos, bit = 0, 0
    for r in runs.split(","):
        r = int(r)
        flat[pos:pos + r] = bit
        pos += r
        bit ^= 1
    if pos != h * w:
        raise ValueError("run lengths do not cover the grid")
    pixels = flat.reshape(h, w)
    pixels.setflags(write=False)
    return PixelGrid(pixels)


def dump_dataset(path: str | Path, task_id: int, split: str, samples: list[Sample]) -> None:
    lines = []
    for smp in samples:
        lines.append("\t".join([
            str(task_id), split,
            " ".join(map(str, smp.s)), " ".join(map(str, smp.t)),
            rle_encode(smp.v),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> tuple[int, str, list[Sample]]:
    task_id, split, samples = None, None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        tid, sp, s, t, grid = line.split("\t")
        task_id, split = int(tid), sp
        samples.append(Sample(rle_decode(grid), tuple(map(int, s.split())), tuple(map(int, t.split()))))
    if task_id is None:
        raise ValueError(f"empty dataset file {path}")
    return task_id, split, samples
