"""Cached feature maps, caption manifests, vocabularies, and a synthetic corpus.

Feature cache layout (little-endian)::

    b"PYCF" | u32 version=1 | u32 rank (2 or 3) | rank x u32 dims | float32 payload

Rank 3 dims are ``[w, h, d]`` (spatial grid); rank 2 dims are ``[L, d]``
(region features without a grid, e.g. detector output).
"""

from __future__ import annotations

import json
import os
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pdcap.errors import ContractError, FormatError

MAGIC = b"PYCF"
VERSION = 1
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)

# Generous cap on float count so a corrupted header cannot request absurd memory.
_MAX_FLOATS = 1 << 31


@dataclass
class FeatureMap:
    """L x d region features, optionally laid out on a w x h grid (row = x*h + y)."""

    data: np.ndarray
    grid: tuple | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ContractError(f"feature data must be a non-empty L x d matrix, got {self.data.shape}")
        if self.grid is not None:
            w, h = self.grid
            if w * h != self.data.shape[0]:
                raise ContractError(f"grid {w}x{h} does not cover {self.data.shape[0]} regions")
            self.grid = (int(w), int(h))
        if not np.isfinite(self.data).all():
            raise ContractError("feature map contains non-finite values")

    @property
    def regions(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[1]

    def as_float64(self):
        return self.data.astype(np.float64)


def write_feature_file(fmap: FeatureMap, path):
    if fmap.grid is not None:
        dims = (fmap.grid[0], fmap.grid[1], fmap.channels)
    else:
        dims = (fmap.regions, fmap.channels)
    header = MAGIC + struct.pack(f"<II{len(dims)}I", VERSION, len(dims), *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fmap.data.astype("<f4").tobytes())


def read_feature_file(path) -> FeatureMap:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError("feature file header truncated", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if rank not in (2, 3):
        raise FormatError(f"rank must be 2 or 3, got {rank}", offset=8)
    off = 12
    if len(blob) < off + 4 * rank:
        raise FormatError("dimension list truncated", offset=len(blob))
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = 1
    for i, n in enumerate(dims):
        if n == 0:
            raise FormatError("zero-sized dimension", offset=12 + 4 * i)
        count *= n
        if count > _MAX_FLOATS:
            raise FormatError(f"dimensions {dims} overflow the payload limit", offset=12 + 4 * i)
    need = off + 4 * count
    if len(blob) < need:
        raise FormatError(
            f"payload truncated: header {dims} needs {4 * count} bytes, found {len(blob) - off}",
            offset=len(blob),
        )
    if len(blob) > need:
        raise FormatError(f"{len(blob) - need} trailing bytes after payload", offset=need)
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float32)
    if rank == 3:
        w, h, d = dims
        return FeatureMap(data.reshape(w * h, d), grid=(w, h))
    return FeatureMap(data.reshape(dims), grid=None)


# -- text ---------------------------------------------------------------------

_TERMINAL_PUNCT = ".,!?"


def tokenize(text):
    """Lowercase, split on whitespace, strip trailing ``. , ! ?``, drop empties."""
    out = []
    for tok in text.lower().split():
        tok = tok.rstrip(_TERMINAL_PUNCT)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    feature_path: str
    captions: tuple

    def __post_init__(self):
        if not self.captions:
            raise ContractError(f"record {self.image_id!r} has no captions")
        for c in self.captions:
            if not tokenize(c):
                raise ContractError(f"record {self.image_id!r} has an empty caption")


class Vocabulary:
    """Bijective token <-> id map with the four reserved tokens first."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ContractError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token):
        return self.index.get(token, UNK)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines())


def build_vocab(records, min_count=5) -> Vocabulary:
    """Tokens seen at least ``min_count`` times, ordered by (count desc, token asc)."""
    if min_count < 1:
        raise ContractError("min_count must be >= 1")
    counts = Counter()
    for rec in records:
        for cap in rec.captions:
            counts.update(tokenize(cap))
    if not counts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def encode_caption(vocab, tokens, t_max=50):
    """``[<bos>, w1, ..., <eos>]`` with at most ``t_max`` ids in total."""
    if t_max < 2:
        raise ContractError("t_max must be >= 2")
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    body = [vocab.id(t) for t in tokens][: t_max - 2]
    return [BOS] + body + [EOS]


def decode_tokens(vocab, ids):
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i < 4:
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


# -- manifest -------------------------------------------------------------------


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(CaptionRecord(str(row["image_id"]), str(row["feature_path"]),
                                             tuple(row["captions"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest row ({exc})") from None
    return records


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {"image_id": r.image_id, "feature_path": r.feature_path, "captions": list(r.captions)}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def resolve_feature_path(manifest_path, record):
    p = Path(record.feature_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# -- synthetic corpus -----------------------------------------------------------

# Caption template: "a <color> <thing> <action> <place>". Each slot owns a block
# of channels; the caption is read back from per-channel means, so it is an
# exact function of the stored features.
_SLOT_WORDS = (
    ("red", "blue", "green", "black", "white", "brown", "yellow", "gray", "pink", "orange", "purple", "golden"),
    ("dog", "cat", "horse", "bird", "man", "woman", "child", "car", "boat", "bike", "train", "cow"),
    ("runs", "sits", "jumps", "stands", "walks", "sleeps", "plays", "eats", "swims", "waits", "rests", "rides"),
    ("outside", "indoors", "nearby", "downtown", "uphill", "offshore", "upstairs", "underground",
     "overhead", "ashore", "abroad", "aloft"),
)


def synthetic_layout(d, vocab_size):
    """Words per slot so that reserved + "a" + slots fit in vocab_size and channels."""
    slots = len(_SLOT_WORDS)
    per_slot = min((vocab_size - len(RESERVED) - 1) // slots, d // slots, len(_SLOT_WORDS[0]))
    if per_slot < 1:
        raise ContractError(
            f"vocab_size={vocab_size} with d={d} leaves no room for the {slots}-slot caption template")
    return per_slot


def caption_from_features(data, per_slot):
    means = np.asarray(data, dtype=np.float64).mean(axis=0)
    words = ["a"]
    for s, pool in enumerate(_SLOT_WORDS):
        block = means[s * per_slot:(s + 1) * per_slot]
        words.append(pool[int(np.argmax(block))])
    return " ".join(words)


def gen_synthetic(out_dir, n=20, L=49, d=32, vocab_size=30, seed=0):
    """Write ``n`` feature files plus ``manifest.jsonl``; returns the manifest path.

    ``L`` that is a perfect square yields spatial rank-3 files, otherwise
    rank-2 region files.
    """
    if min(n, L, d, vocab_size) < 1:
        raise ContractError("n, L, d and vocab_size must all be positive")
    per_slot = synthetic_layout(d, vocab_size)
    side = int(round(L ** 0.5))
    grid = (side, side) if side * side == L else None

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        data = rng.normal(0.0, 0.25, size=(L, d))
        for s in range(len(_SLOT_WORDS)):
            ch = s * per_slot + int(rng.integers(per_slot))
            rows = rng.random(L) < 0.5
            rows[int(rng.integers(L))] = True
            data[rows, ch] += 2.0
        fmap = FeatureMap(data.astype(np.float32), grid=grid)
        image_id = f"img_{i:0{width}d}"
        rel = os.path.join("features", image_id + ".pycf")
        write_feature_file(fmap, out / rel)
        records.append(CaptionRecord(image_id, rel, (caption_from_features(fmap.data, per_slot),)))
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
