"""Caption corpus model: vocabulary, multi-reference manifests and
sentence-embedding tables.

Captions arrive pre-tokenized; no segmentation happens here. The manifest is
UTF-8 JSON lines, one object per audio clip:

    {"audio_id": "...", "feature_path": "...",
     "captions": [{"caption_id": "...", "text": "...",
                   "tokens": ["..."], "embedding_row": 0 | null}, ...]}

Embedding files (little-endian): magic "SEMB", u32 version=1, u32 N, u32 dim,
then N*dim float32 row-major.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .binio import read_f32_array, read_magic, read_u32, write_f32_array, write_magic, write_u32

SEMB_MAGIC = b"SEMB"

PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>", "<unk>")


class EmptyManifest(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateAudioId(ValueError):
    pass


class MissingField(ValueError):
    def __init__(self, field_name: str, line_no: Optional[int] = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"missing or empty field '{field_name}'{where}")
        self.field_name = field_name


class EmptyTokenList(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CaptionRecord:
    """One tokenized reference sentence, optionally bound to an embedding row."""

    caption_id: str
    tokens: tuple[str, ...]
    text: str
    embedding_row: Optional[int] = None

    def __post_init__(self):
        if not self.tokens:
            raise MissingField("tokens")


@dataclass(frozen=True)
class ManifestEntry:
    audio_id: str
    feature_path: str
    captions: tuple[CaptionRecord, ...]


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory with fixed special ids PAD=0, SOS=1, EOS=2, UNK=3."""

    id_to_token: tuple[str, ...]
    token_to_id: dict = field(repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        id_to_token = SPECIAL_TOKENS + tuple(tokens)
        return cls(id_to_token=id_to_token,
                   token_to_id={t: i for i, t in enumerate(id_to_token)})

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def surface_tokens(self) -> tuple[str, ...]:
        return self.id_to_token[len(SPECIAL_TOKENS):]


def write_vocab_file(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"specials": list(SPECIAL_TOKENS),
                   "tokens": list(vocab.surface_tokens)}, fh, ensure_ascii=False)
        fh.write("\n")


def read_vocab_file(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if tuple(obj.get("specials", ())) != SPECIAL_TOKENS:
        raise ParseError(1, f"unexpected special tokens {obj.get('specials')!r}")
    return Vocabulary.from_tokens(tuple(obj["tokens"]))


def build_vocab(manifest: Sequence[ManifestEntry], min_count: int = 1) -> Vocabulary:
    """Count tokens over all captions; keep count >= min_count, ordered by
    descending count then lexicographic."""
    if not manifest:
        raise EmptyManifest("cannot build a vocabulary from an empty manifest")
    counts = Counter()
    for entry in manifest:
        for cap in entry.captions:
            counts.update(cap.tokens)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    if not kept:
        raise EmptyManifest(f"no token reaches min_count={min_count}")
    return Vocabulary.from_tokens(kept)


def encode(tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    """Map tokens to ids (unknown -> UNK) and append EOS."""
    return [vocab.token_to_id.get(t, UNK_ID) for t in tokens] + [EOS_ID]


def decode(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Map ids back to tokens, stopping at the first EOS; specials are dropped."""
    out = []
    for i in ids:
        if i == EOS_ID:
            break
        if i in (PAD_ID, SOS_ID, UNK_ID):
            continue
        out.append(vocab.id_to_token[i])
    return out


def _caption_from_obj(obj: dict, line_no: int) -> CaptionRecord:
    for key in ("caption_id", "text", "tokens"):
        if key not in obj:
            raise MissingField(key, line_no)
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not tokens:
        raise MissingField("tokens", line_no)
    row = obj.get("embedding_row")
    if row is not None and (not isinstance(row, int) or row < 0):
        raise ParseError(line_no, f"embedding_row must be a non-negative int or null, got {row!r}")
    return CaptionRecord(caption_id=obj["caption_id"], tokens=tuple(tokens),
                         text=obj["text"], embedding_row=row)


def load_manifest(path, allow_empty_captions: bool = False) -> list[ManifestEntry]:
    """Parse and validate a JSONL manifest.

    allow_empty_captions admits skeleton manifests (entries without captions)
    as produced by feature extraction before annotations are attached.
    """
    entries: list[ManifestEntry] = []
    seen_audio: set[str] = set()
    seen_caption: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
            for key in ("audio_id", "feature_path", "captions"):
                if key not in obj:
                    raise MissingField(key, line_no)
            audio_id = obj["audio_id"]
            if audio_id in seen_audio:
                raise DuplicateAudioId(f"duplicate audio_id '{audio_id}' at line {line_no}")
            seen_audio.add(audio_id)
            caps_raw = obj["captions"]
            if not isinstance(caps_raw, list):
                raise ParseError(line_no, "captions must be an array")
            if not caps_raw and not allow_empty_captions:
                raise MissingField("captions", line_no)
            captions = []
            for cap_obj in caps_raw:
                cap = _caption_from_obj(cap_obj, line_no)
                if cap.caption_id in seen_caption:
                    raise ParseError(line_no, f"duplicate caption_id '{cap.caption_id}'")
                seen_caption.add(cap.caption_id)
                captions.append(cap)
            entries.append(ManifestEntry(audio_id=audio_id, feature_path=obj["feature_path"],
                                         captions=tuple(captions)))
    return entries


def save_manifest(entries: Sequence[ManifestEntry], path) -> None:
    """Write a manifest deterministically (stable key order, no ASCII escaping)."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            obj = {
                "audio_id": entry.audio_id,
                "feature_path": entry.feature_path,
                "captions": [
                    {"caption_id": c.caption_id, "text": c.text,
                     "tokens": list(c.tokens), "embedding_row": c.embedding_row}
                    for c in entry.captions
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n")


def iter_captions(entries: Sequence[ManifestEntry]):
    """Yield (entry, caption) pairs in manifest order."""
    for entry in entries:
        for cap in entry.captions:
            yield entry, cap


def assign_embedding_rows(entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
    """Number captions 0..N-1 in manifest order and bind the indices."""
    out = []
    row = 0
    for entry in entries:
        caps = []
        for cap in entry.captions:
            caps.append(replace(cap, embedding_row=row))
            row += 1
        out.append(replace(entry, captions=tuple(caps)))
    return out


@dataclass(frozen=True)
class EmbeddingTable:
    """N sentence embeddings of a fixed dimension, one row per caption."""

    dim: int
    rows: np.ndarray

    def __post_init__(self):
        if self.dim < 1 or self.rows.ndim != 2 or self.rows.shape[1] != self.dim:
            raise DimMismatch(f"rows shape {self.rows.shape} vs dim {self.dim}")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding table contains non-finite entries")
        if self.rows.shape[0] and not np.all(np.any(self.rows != 0.0, axis=1)):
            raise ValueError("embedding table contains an all-zero row")


def fallback_embed(tokens: Sequence[str], dim: int = 768, seed: int = 0) -> np.ndarray:
    """Deterministic hashed sentence embedding: unit-norm, no model needed.

    Each unigram and bigram is hashed (keyed blake2b, so the result is stable
    across processes) to a signed coordinate; the signed counts are summed and
    L2-normalized. A sentence of n tokens contributes 2n-1 signed units, an
    odd total, so the sum can never be the zero vector.
    """
    if not tokens:
        raise EmptyTokenList("cannot embed an empty token list")
    if dim < 1:
        raise DimMismatch("embedding dim must be >= 1")
    key = int(seed).to_bytes(8, "little", signed=True)
    grams = list(tokens) + [tokens[i] + "\x1f" + tokens[i + 1] for i in range(len(tokens) - 1)]
    vec = np.zeros(dim, dtype=np.float64)
    for gram in grams:
        digest = hashlib.blake2b(gram.encode("utf-8"), key=key, digest_size=9).digest()
        h = int.from_bytes(digest, "little")
        sign = 1.0 if h & 1 else -1.0
        vec[(h >> 1) % dim] += sign
    return vec / np.linalg.norm(vec)


def embed_manifest(entries: Sequence[ManifestEntry], dim: int = 768,
                   seed: int = 0) -> tuple[list[ManifestEntry], EmbeddingTable]:
    """Fallback-embed every caption; returns the re-indexed manifest and table."""
    entries = assign_embedding_rows(entries)
    rows = [fallback_embed(cap.tokens, dim=dim, seed=seed)
            for _, cap in iter_captions(entries)]
    table = EmbeddingTable(dim=dim, rows=np.asarray(rows, dtype=np.float64))
    return entries, table


def write_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, SEMB_MAGIC)
        write_u32(fh, table.rows.shape[0])
        write_u32(fh, table.dim)
        write_f32_array(fh, table.rows)


def read_embeddings(path, expected_dim: Optional[int] = None) -> EmbeddingTable:
    with open(path, "rb") as fh:
        read_magic(fh, SEMB_MAGIC)
        n = read_u32(fh)
        dim = read_u32(fh)
        if expected_dim is not None and dim != expected_dim:
            raise DimMismatch(f"embedding file has dim {dim}, expected {expected_dim}")
        data = read_f32_array(fh, n * dim)
    return EmbeddingTable(dim=dim, rows=data.reshape(n, dim).astype(np.float64))
