"""Loader for the handwritten-letters benchmark.

Tab-separated rows: id, letter, next_id, word_id, position, fold, then 128
binary pixel fields forming a 16x8 image. Words are reassembled by following
next_id chains (-1 terminates a word).
"""

import gzip

import numpy as np

from .errors import IntegrityError, ParseError
from .featmap import FeatureMap
from .graph import FactorGraphModel
from .trainer import StructuredExample

IMAGE_HEIGHT = 16
IMAGE_WIDTH = 8
N_PIXELS = IMAGE_HEIGHT * IMAGE_WIDTH
ALPHABET = "abcdefghijklmnopqrstuvwxyz"
N_LETTERS = len(ALPHABET)


class OcrWord:
    __slots__ = ("images", "labels", "fold")

    def __init__(self, images, labels, fold):
        self.images = images        # (length, 16, 8) float array of 0/1
        self.labels = labels        # (length,) ints in [0, 26)
        self.fold = fold

    def __len__(self):
        return len(self.labels)


class OcrDataset:
    def __init__(self, words):
        self.words = list(words)

    @property
    def n_characters(self):
        return sum(len(w) for w in self.words)

    def split(self, test_fold=0):
        train = [w for w in self.words if w.fold != test_fold]
        test = [w for w in self.words if w.fold == test_fold]
        return train, test


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt")
    return open(path, "r")


def load_ocr(path):
    """Parse the letters file into an OcrDataset of reassembled words."""
    letters = {}
    order = []
    with _open_maybe_gz(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 6 + N_PIXELS:
                raise ParseError(f"expected {6 + N_PIXELS}+ fields, got {len(fields)}",
                                 line=lineno)
            try:
                lid = int(fields[0])
                letter = fields[1]
                next_id = int(fields[2])
                fold = int(fields[5])
                pixels = [int(x) for x in fields[6: 6 + N_PIXELS]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            if letter not in ALPHABET:
                raise ParseError(f"label {letter!r} outside a-z", line=lineno)
            if any(p not in (0, 1) for p in pixels):
                raise ParseError("pixel value outside {0, 1}", line=lineno)
            if lid in letters:
                raise ParseError(f"duplicate letter id {lid}", line=lineno)
            letters[lid] = (ALPHABET.index(letter), next_id, fold,
                            np.array(pixels, dtype=np.float64).reshape(
                                IMAGE_HEIGHT, IMAGE_WIDTH))
            order.append(lid)

    followed = set()
    for lid in order:
        nid = letters[lid][1]
        if nid != -1:
            if nid not in letters:
                raise IntegrityError(f"letter {lid} links to missing id {nid}")
            if nid in followed:
                raise IntegrityError(f"letter id {nid} is linked twice")
            followed.add(nid)

    words = []
    for lid in order:
        if lid in followed:
            continue                   # not a word head
        imgs, labs = [], []
        fold = letters[lid][2]
        cur = lid
        seen = set()
        while cur != -1:
            if cur in seen:
                raise IntegrityError(f"cycle in next_id chain at {cur}")
            seen.add(cur)
            lab, nid, f, img = letters[cur]
            if f != fold:
                raise IntegrityError(f"fold changes inside the word headed by {lid}")
            imgs.append(img)
            labs.append(lab)
            cur = nid
        words.append(OcrWord(np.stack(imgs), np.array(labs, dtype=int), fold))
    return OcrDataset(words)


# ---------------------------------------------------------------------------
# examples for the structured learners
# ---------------------------------------------------------------------------

def word_to_linear_example(word):
    """Chain CRF example with raw-pixel node features plus the bias triple
    (constant, first-position, last-position)."""
    n = len(word)
    feats = []
    for t in range(n):
        pos = [1.0, 1.0 if t == 0 else 0.0, 1.0 if t == n - 1 else 0.0]
        feats.append(np.concatenate([word.images[t].reshape(-1), pos]))
    model = FactorGraphModel(feats, [N_LETTERS] * n,
                             edges=[(i, i + 1) for i in range(n - 1)],
                             pairwise="transitions")
    return model, word.labels


def word_to_structured_example(word):
    """Trainer-facing example: per-character image maps on a chain."""
    n = len(word)
    return StructuredExample(
        labels=word.labels, n_labels=[N_LETTERS] * n,
        edges=[(i, i + 1) for i in range(n - 1)],
        node_maps=[FeatureMap(word.images[t][:, :, None]) for t in range(n)],
        weight_labels=N_LETTERS)
