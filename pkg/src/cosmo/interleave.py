"""Interleaved-document preprocessing: noisy matching and caption repair.

Image-text similarity matrices come in from an upstream scorer. We add
clamped Gaussian noise so images can match different texts across epochs,
solve the one-to-one assignment exactly (optimal transport with uniform
marginals over a bipartite set reduces to linear assignment), and replace
the matched text of poorly aligned images with generated pseudo-captions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .docs import Document, MediaRef, TextSpan

DEFAULT_SIGMA = 0.04
DEFAULT_CLAMP = 0.08
DEFAULT_REPLACE_BELOW = 0.20
MMC4_BASELINE_THRESHOLD = 0.24


class CaptionerError(RuntimeError):
    """A captioner failed to produce text for a media item."""


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (image_index, text_index)

    def total(self, scores: np.ndarray) -> float:
        return float(sum(scores[i, t] for i, t in self.pairs))


def draw_noise(rng: np.random.Generator, shape, sigma: float = DEFAULT_SIGMA,
               clamp: float = DEFAULT_CLAMP) -> np.ndarray:
    """Zero-mean Gaussian noise with every entry clipped to [-clamp, clamp]."""
    if sigma <= 0 or clamp <= 0:
        raise ValueError("sigma and clamp must be positive")
    return np.clip(rng.normal(0.0, sigma, size=shape), -clamp, clamp)


def perturb(scores: np.ndarray, rng: np.random.Generator,
            sigma: float = DEFAULT_SIGMA, clamp: float = DEFAULT_CLAMP
            ) -> np.ndarray:
    """Return scores + clamped noise; the input matrix is untouched."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores + draw_noise(rng, scores.shape, sigma, clamp)


def match(scores: np.ndarray) -> Assignment:
    """One-to-one image/text assignment maximizing total similarity."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or 0 in scores.shape:
        raise ValueError(f"similarity matrix must be 2D and non-empty, "
                         f"got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("similarity matrix has non-finite entries")
    if scores.shape[0] <= scores.shape[1]:
        rows, cols = linear_sum_assignment(-scores)
        pairs = list(zip(rows.tolist(), cols.tolist()))
    else:
        rows, cols = linear_sum_assignment(-scores.T)
        pairs = sorted((i, t) for t, i in zip(rows.tolist(), cols.tolist()))
    return Assignment(pairs=pairs)


@dataclass
class PrepRecord:
    """Per-document outcome, serialized to the sidecar JSON."""
    assignment: list[tuple[int, int]] = field(default_factory=list)
    replaced: list[int] = field(default_factory=list)
    dropped_media: list[int] = field(default_factory=list)
    dropped: bool = False
    reason: str | None = None
    original_texts: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"assignment": [list(p) for p in self.assignment],
                "replaced": self.replaced,
                "dropped_media": self.dropped_media,
                "dropped": self.dropped,
                "reason": self.reason,
                "original_texts": {str(k): v for k, v in self.original_texts.items()}}


def filter_and_replace(doc: Document, scores: np.ndarray, assignment: Assignment,
                       captioner, replace_below: float = DEFAULT_REPLACE_BELOW,
                       min_image_px: int | None = None,
                       mode: str = "replace") -> tuple[Document | None, PrepRecord]:
    """Repair a document according to its matched similarities.

    ``replace`` mode swaps the matched text of any image scoring below the
    threshold for a generated caption, keeping media untouched. ``drop`` mode
    removes the below-threshold images instead (the coarse-filter baseline).
    Documents left without media are dropped with a recorded reason; captioner
    failures quarantine the document rather than killing the pipeline.
    """
    if mode not in ("replace", "drop"):
        raise ValueError(f"unknown mode {mode!r}")
    scores = np.asarray(scores, dtype=np.float64)
    rec = PrepRecord(assignment=list(assignment.pairs))
    for i, _ in assignment.pairs:
        if not 0 <= i < len(doc.media):
            raise ValueError(f"assignment image index {i} out of range")

    too_small = set()
    if min_image_px is not None:
        for i, m in enumerate(doc.media):
            if m.min_side_px is not None and m.min_side_px < min_image_px:
                too_small.add(i)

    low = {i: t for i, t in assignment.pairs if scores[i, t] < replace_below}
    remove = set(too_small)
    if mode == "drop":
        remove |= set(low)
    if len(remove) >= len(doc.media):
        rec.dropped = True
        rec.dropped_media = sorted(remove)
        rec.reason = "no media left after size filtering" if not low or mode == "replace" \
            else "no media left after threshold filtering"
        return None, rec

    spans = doc.text_spans()
    new_texts = {s: span.text for s, span in enumerate(spans)}
    if mode == "replace":
        for i, t in sorted(low.items()):
            if i in remove:
                continue
            try:
                generated = captioner.generate(doc.media[i])
            except Exception as e:  # noqa: BLE001 - quarantine whatever went wrong
                rec.dropped = True
                rec.reason = f"captioner: {e}"
                return None, rec
            rec.original_texts[t] = new_texts[t]
            new_texts[t] = generated
            rec.replaced.append(i)

    rec.dropped_media = sorted(remove)
    keep_media = [i for i in range(len(doc.media)) if i not in remove]
    remap = {old: new for new, old in enumerate(keep_media)}
    segments = []
    span_idx = 0
    for seg in doc.segments:
        if isinstance(seg, TextSpan):
            segments.append(TextSpan(new_texts[span_idx]))
            span_idx += 1
        elif seg.media_id in remap:
            segments.append(MediaRef(remap[seg.media_id]))
    out = Document(segments=segments, media=[doc.media[i] for i in keep_media],
                   doc_id=doc.doc_id)
    return out, rec


def doc_stats(items: list[tuple[Document, np.ndarray, Assignment]]) -> dict:
    """Corpus statistics over matched pairs: token length and similarity."""
    if not items:
        raise ValueError("doc_stats: empty input")
    tokens, sims = [], []
    n_media = 0
    for doc, scores, assignment in items:
        scores = np.asarray(scores, dtype=np.float64)
        spans = doc.text_spans()
        n_media += len(doc.media)
        for i, t in assignment.pairs:
            tokens.append(len(spans[t].text.split()))
            sims.append(float(scores[i, t]))
    return {"avg_tokens_per_clip": float(np.mean(tokens)),
            "avg_similarity": float(np.mean(sims)),
            "counts": {"docs": len(items), "media": n_media,
                       "pairs": len(tokens)}}


# ---------------------------------------------------------------------------
# shard-level driver used by the CLI


def prep_shard(docs_in: list[Document], sims: dict[str, list[list[float]]],
               captioner, rng: np.random.Generator,
               sigma: float = DEFAULT_SIGMA, clamp: float = DEFAULT_CLAMP,
               replace_below: float = DEFAULT_REPLACE_BELOW,
               min_image_px: int | None = None,
               mode: str = "replace") -> tuple[list[Document], dict[str, dict]]:
    out_docs: list[Document] = []
    report: dict[str, dict] = {}
    for doc in docs_in:
        raw = sims.get(doc.doc_id)
        if raw is None:
            report[doc.doc_id] = PrepRecord(dropped=True,
                                            reason="no similarity matrix").to_dict()
            continue
        scores = np.asarray(raw, dtype=np.float64)
        assignment = match(perturb(scores, rng, sigma, clamp))
        new_doc, rec = filter_and_replace(doc, scores, assignment, captioner,
                                          replace_below, min_image_px, mode)
        report[doc.doc_id] = rec.to_dict()
        if new_doc is not None:
            out_docs.append(new_doc)
    return out_docs, report


def load_sims(path: str) -> dict[str, list[list[float]]]:
    with open(path) as f:
        raw = json.load(f)
    return {k: (v["sim"] if isinstance(v, dict) else v) for k, v in raw.items()}
