"""Encode every caption of a JSONL manifest with a pretrained contextual
sentence encoder and write the embeddings as a SEMB file.

This tool talks to the captioning toolkit purely through its file formats:

  manifest  UTF-8 JSON lines {audio_id, feature_path,
            captions: [{caption_id, text, tokens, embedding_row}]}
  SEMB      little-endian: magic "SEMB", u32 version=1, u32 N, u32 dim,
            then N*dim float32 row-major

Rows are written in manifest caption order and the embedding_row indices are
written back into the manifest, so row k is caption k. Inference runs in eval
mode with no sampling, so the output is reproducible for fixed weights.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import dataclass

import numpy as np

SEMB_MAGIC = b"SEMB"
SEMB_VERSION = 1
DEFAULT_DIM = 768

POOL_CLS = "cls"
POOL_MEAN = "mean"


class ModelLoadError(RuntimeError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ExportConfig:
    manifest: str
    output: str
    model: str
    pooling: str = POOL_CLS
    batch_size: int = 16
    expected_dim: int = DEFAULT_DIM

    def __post_init__(self):
        if self.pooling not in (POOL_CLS, POOL_MEAN):
            raise ValueError(f"pooling must be '{POOL_CLS}' or '{POOL_MEAN}'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def load_manifest_lines(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def save_manifest_lines(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in records:
            ordered = {
                "audio_id": obj["audio_id"],
                "feature_path": obj["feature_path"],
                "captions": [
                    {"caption_id": c["caption_id"], "text": c["text"],
                     "tokens": c["tokens"], "embedding_row": c.get("embedding_row")}
                    for c in obj["captions"]
                ],
            }
            fh.write(json.dumps(ordered, ensure_ascii=False, separators=(",", ":")) + "\n")


def write_semb(rows: np.ndarray, path) -> None:
    n, dim = rows.shape
    with open(path, "wb") as fh:
        fh.write(SEMB_MAGIC)
        fh.write(struct.pack("<III", SEMB_VERSION, n, dim))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def load_encoder(model_id: str):
    """Load tokenizer and encoder from a local path or hub identifier."""
    import torch
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise ModelLoadError(f"cannot load encoder '{model_id}': {exc}") from exc
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def encode_texts(texts: list[str], tokenizer, model, pooling: str,
                 batch_size: int) -> np.ndarray:
    import torch

    rows = []
    for start in range(0, len(texts), batch_size):
        batch = texts[start:start + batch_size]
        enc = tokenizer(batch, padding=True, truncation=True, return_tensors="pt")
        with torch.no_grad():
            hidden = model(**enc).last_hidden_state
        if pooling == POOL_CLS:
            pooled = hidden[:, 0, :]
        else:
            mask = enc["attention_mask"].unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1)
        rows.append(pooled.cpu().numpy().astype(np.float64))
    return np.concatenate(rows, axis=0)


def export(config: ExportConfig) -> int:
    """Embed every caption; returns the number of rows written."""
    tokenizer, model = load_encoder(config.model)
    hidden_size = getattr(model.config, "hidden_size", None)
    if hidden_size != config.expected_dim:
        raise DimMismatch(
            f"encoder hidden size {hidden_size} != expected {config.expected_dim}")

    records = load_manifest_lines(config.manifest)
    texts = []
    for obj in records:
        for cap in obj["captions"]:
            text = cap.get("text") or " ".join(cap["tokens"])
            texts.append(text)
    if not texts:
        raise ValueError("manifest contains no captions")

    rows = encode_texts(texts, tokenizer, model, config.pooling, config.batch_size)
    write_semb(rows, config.output)

    row = 0
    for obj in records:
        for cap in obj["captions"]:
            cap["embedding_row"] = row
            row += 1
    save_manifest_lines(records, config.manifest)
    return rows.shape[0]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bert-export",
        description="Embed manifest captions with a pretrained sentence encoder")
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--model", required=True,
                        help="local model directory or hub identifier")
    parser.add_argument("--pooling", choices=[POOL_CLS, POOL_MEAN], default=POOL_CLS)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--dim", type=int, default=DEFAULT_DIM)
    args = parser.parse_args(argv)
    config = ExportConfig(manifest=args.manifest, output=args.out, model=args.model,
                          pooling=args.pooling, batch_size=args.batch_size,
                          expected_dim=args.dim)
    try:
        n = export(config)
    except (ModelLoadError, DimMismatch, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__,
                                     "message": str(exc)}) + "\n")
        return 1
    print(f"{n} caption embeddings (dim {config.expected_dim}) -> {config.output}")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
