"""Tokenization, interleaved document serialization, and window sampling.

A document is a sequence of text spans and media references. Serialization
emits ``<s>``, then one ``<Visual>`` placeholder per media reference and the
tokens of each text span followed by ``<EOC>``. Training windows are cut
around a randomly chosen anchor media with a small random left shift.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

BOS, EOC, VISUAL, PAD, UNK = range(5)
RESERVED = ["<s>", "<EOC>", "<Visual>", "<pad>", "<unk>"]
N_BYTES = 256
FIRST_WORD_ID = len(RESERVED) + N_BYTES  # 261
MAX_VIDEO_FRAMES = 3
SPACE_BYTE = len(RESERVED) + 0x20


class Vocab:
    """Word-level vocabulary with reserved specials and byte fallback.

    Ids 0-4 are the specials, 5-260 the raw bytes, words start at 261.
    Unknown words encode as their UTF-8 bytes; adjacent byte-fallback words
    keep an explicit space byte between them so detokenize round-trips.
    """

    def __init__(self, words: list[str]):
        self.id_to_word = list(words)
        self.word_to_id = {w: FIRST_WORD_ID + i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return FIRST_WORD_ID + len(self.id_to_word)

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        prev_was_bytes = False
        for word in text.split():
            wid = self.word_to_id.get(word)
            if wid is not None:
                ids.append(wid)
                prev_was_bytes = False
            else:
                if prev_was_bytes:
                    ids.append(SPACE_BYTE)
                ids.extend(len(RESERVED) + b for b in word.encode("utf-8"))
                prev_was_bytes = True
        return ids

    def detokenize(self, ids) -> str:
        parts: list[str] = []
        pending: list[int] = []

        def flush():
            if pending:
                parts.append(bytes(pending).decode("utf-8", errors="replace"))
                pending.clear()

        for i in ids:
            i = int(i)
            if len(RESERVED) <= i < FIRST_WORD_ID:
                pending.append(i - len(RESERVED))
            elif i >= FIRST_WORD_ID:
                flush()
                parts.append(self.id_to_word[i - FIRST_WORD_ID])
            else:
                flush()  # specials don't render
        flush()
        return " ".join(" ".join(parts).split())

    def to_dict(self) -> dict:
        return {"words": self.id_to_word}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["words"])


def build_vocab(corpus, max_size: int) -> Vocab:
    """Frequency-ordered word vocab (ties lexicographic) from a text iterator."""
    if max_size < 300:
        raise ValueError(f"max_size must be >= 300, got {max_size}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(text.split())
    if n_texts == 0 or not counts:
        raise ValueError("build_vocab: empty corpus")
    budget = max_size - FIRST_WORD_ID
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([w for w, _ in ranked[:budget]])


# ---------------------------------------------------------------------------
# documents


@dataclass
class MediaItem:
    kind: str  # "image" | "video"
    features: np.ndarray  # [frames, patches, d_vision]
    source_id: str = ""
    min_side_px: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 3 or self.features.shape[0] < 1:
            raise ValueError(f"media features must be [frames, patches, d], "
                             f"got {self.features.shape}")
        if self.kind == "video" and self.features.shape[0] > MAX_VIDEO_FRAMES:
            raise ValueError(f"video uses at most {MAX_VIDEO_FRAMES} frames, "
                             f"got {self.features.shape[0]}")


@dataclass
class TextSpan:
    text: str


@dataclass
class MediaRef:
    media_id: int


Segment = TextSpan | MediaRef


@dataclass
class Document:
    segments: list[Segment]
    media: list[MediaItem]
    doc_id: str = ""

    def __post_init__(self):
        if not self.segments:
            raise ValueError("document needs at least one segment")
        for seg in self.segments:
            if isinstance(seg, MediaRef) and not 0 <= seg.media_id < len(self.media):
                raise ValueError(f"media_id {seg.media_id} out of range "
                                 f"({len(self.media)} media)")

    def text_spans(self) -> list[TextSpan]:
        return [s for s in self.segments if isinstance(s, TextSpan)]


def serialize(doc: Document, vocab: Vocab) -> tuple[list[int], list[tuple[int, int]]]:
    """Token ids plus (position, media_id) entries for every media reference."""
    ids = [BOS]
    media_slice: list[tuple[int, int]] = []
    for seg in doc.segments:
        if isinstance(seg, MediaRef):
            media_slice.append((len(ids), seg.media_id))
            ids.append(VISUAL)
        else:
            ids.extend(vocab.tokenize(seg.text))
            ids.append(EOC)
    return ids, media_slice


@dataclass
class Window:
    token_ids: list[int]
    media_slice: list[tuple[int, int]]  # positions in window coordinates
    loss_mask: np.ndarray  # 1 where the token may serve as a prediction target
    anchor_media: int | None


MAX_SHIFT = 8


def sample_window(doc_tokens: list[int], media_slice: list[tuple[int, int]],
                  L: int, rng: np.random.Generator) -> Window:
    """Cut an L-token window anchored at a random media reference.

    The window starts up to 8 tokens left of the anchor's placeholder and
    truncates at the document end; padding happens at batch time. The loss
    mask zeroes placeholders and any position whose governing media (the
    latest reference at or before it) fell outside the window.
    """
    if L < 8:
        raise ValueError(f"window length must be >= 8, got {L}")
    n = len(doc_tokens)
    if not media_slice:
        ids = doc_tokens[:L]
        return Window(ids, [], _mask(ids, doc_tokens, [], 0), None)
    k = int(rng.integers(len(media_slice)))
    anchor_pos, anchor_media = media_slice[k]
    if n <= L:  # the whole document fits: no cut, every media kept
        return Window(list(doc_tokens), list(media_slice),
                      _mask(doc_tokens, doc_tokens, media_slice, 0), anchor_media)
    shift = int(rng.integers(0, min(MAX_SHIFT, anchor_pos, L - 1) + 1))
    start = anchor_pos - shift
    ids = doc_tokens[start:start + L]
    window_media = [(p - start, m) for p, m in media_slice
                    if start <= p < start + len(ids)]
    mask = _mask(ids, doc_tokens, media_slice, start)
    return Window(ids, window_media, mask, anchor_media)


def _mask(ids: list[int], doc_tokens: list[int],
          media_slice: list[tuple[int, int]], start: int) -> np.ndarray:
    """Target eligibility per window position."""
    mask = np.ones(len(ids), dtype=np.int8)
    visual_positions = {p for p, _ in media_slice}
    for i, tok in enumerate(ids):
        if tok in (VISUAL, PAD):
            mask[i] = 0
            continue
        doc_pos = start + i
        governing = max((p for p in visual_positions if p <= doc_pos), default=None)
        if governing is not None and governing < start:
            mask[i] = 0  # its media context was cut off
    return mask


# ---------------------------------------------------------------------------
# shard files: ndjson records plus a binary feature sidecar


def write_shard(docs: list[Document], path: str) -> None:
    """Write docs to ``path`` (ndjson) with features in ``path.bin``/``.idx.json``."""
    bin_path = path + ".bin"
    idx: dict[str, dict] = {}
    offset = 0
    with open(bin_path, "wb") as bf, open(path, "w") as sf:
        for di, doc in enumerate(docs):
            media_recs = []
            for item in doc.media:
                buf = item.features.astype("<f4").tobytes()
                idx[str(offset)] = {"shape": list(item.features.shape)}
                rec = {"kind": item.kind,
                       "features_ref": f"{os.path.basename(bin_path)}#{offset}",
                       "source_id": item.source_id}
                if item.min_side_px is not None:
                    rec["px"] = item.min_side_px
                media_recs.append(rec)
                bf.write(buf)
                offset += len(buf)
            segs = [{"m": s.media_id} if isinstance(s, MediaRef) else {"t": s.text}
                    for s in doc.segments]
            rec = {"segments": segs, "media": media_recs}
            if doc.doc_id:
                rec["id"] = doc.doc_id
            sf.write(json.dumps(rec) + "\n")
    with open(path + ".idx.json", "w") as f:
        json.dump(idx, f)


def read_shard(path: str) -> list[Document]:
    bin_path = path + ".bin"
    with open(path + ".idx.json") as f:
        idx = json.load(f)
    with open(bin_path, "rb") as f:
        blob = f.read()
    docs: list[Document] = []
    with open(path) as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            rec = json.loads(line)
            media = []
            for mr in rec["media"]:
                _, _, off = mr["features_ref"].partition("#")
                shape = idx[off]["shape"]
                count = int(np.prod(shape))
                feats = np.frombuffer(blob, dtype="<f4", count=count,
                                      offset=int(off)).reshape(shape)
                media.append(MediaItem(kind=mr["kind"], features=feats.copy(),
                                       source_id=mr.get("source_id", ""),
                                       min_side_px=mr.get("px")))
            segments: list[Segment] = []
            for s in rec["segments"]:
                segments.append(MediaRef(s["m"]) if "m" in s else TextSpan(s["t"]))
            docs.append(Document(segments=segments, media=media,
                                 doc_id=rec.get("id", str(line_no))))
    return docs
