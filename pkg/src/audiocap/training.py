"""Training loop: Adam on the combined objective, deterministic 9:1 split,
per-epoch validation CIDEr and best-model checkpointing.

One control thread owns parameters and optimizer state; each batch is a
deterministic-order reduction of per-sample gradients followed by a single
Adam step, so a fixed (seed, data, config, dtype) fully determines the run.

Checkpoint file (little-endian): magic "ACKP", u32 version=1, u32 tensor
count, then named tensor blocks (u32 name length + UTF-8 name, u32 rank,
rank u32 dims, float32 payload), a vocabulary section (u32 count, then
length-prefixed UTF-8 surface tokens in id order), a stats section (u32 D,
D float32 means, D float32 stds) and a metadata section (u32 best epoch,
f64 best validation CIDEr, f64 alpha, u32 max decode length).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import corpus as corpus_mod
from .binio import (
    CorruptTensor,
    TruncatedFile,
    read_f32_array,
    read_magic,
    read_u32,
    write_f32_array,
    write_magic,
    write_u32,
)
from .corpus import EmbeddingTable, ManifestEntry, Vocabulary, build_vocab, encode
from .features import FeatureStats, compute_stats, read_features, standardize
from .metrics import EvalCorpus, EvalItem, cider
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    forward_loss,
    greedy_decode,
    init_params,
    zero_grads,
)
from .nn import ShapeMismatch

ACKP_MAGIC = b"ACKP"

LOSS_CE_ONLY = "ce"
LOSS_COMBINED = "combined"


class TooFewEntries(ValueError):
    pass


class MissingEmbedding(KeyError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 25
    alpha: float = 10.0
    val_ratio: float = 0.1
    seed: int = 0
    loss_mode: str = LOSS_COMBINED
    clip_norm: Optional[float] = None  # off by default; L2 clip when set

    def __post_init__(self):
        if not 0.0 < self.val_ratio < 1.0:
            raise ValueError("val_ratio must lie strictly between 0 and 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss_mode not in (LOSS_CE_ONLY, LOSS_COMBINED):
            raise ValueError(f"unknown loss_mode '{self.loss_mode}'")


@dataclass
class AdamState:
    m: dict
    u: dict
    t: int = 0

    @classmethod
    def init_like(cls, params: ModelParams) -> "AdamState":
        return cls(m={name: np.zeros_like(arr) for name, arr in params.named_arrays()},
                   u={name: np.zeros_like(arr) for name, arr in params.named_arrays()})


@dataclass
class Checkpoint:
    """Everything greedy decoding needs, plus the selection bookkeeping."""

    config: ModelConfig
    params: ModelParams
    vocab: Vocabulary
    stats: FeatureStats
    best_val_cider: float
    epoch: int


def split_dev(entries: Sequence[ManifestEntry], val_ratio: float = 0.1,
              seed: int = 0) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Partition by audio_id with a seeded shuffle; all captions of one clip
    stay on one side. |val| = round(val_ratio * N), clamped to [1, N-1]."""
    if len(entries) < 2:
        raise TooFewEntries("need at least 2 entries to split")
    order = np.random.default_rng(seed).permutation(len(entries))
    n_val = int(math.floor(val_ratio * len(entries) + 0.5))
    n_val = min(max(n_val, 1), len(entries) - 1)
    val = [entries[i] for i in order[:n_val]]
    train = [entries[i] for i in order[n_val:]]
    return train, val


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState,
              config: TrainConfig) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for (name, p), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: param {p.shape} vs grad {g.shape}")
        m = state.m[name]
        u = state.u[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        u *= config.beta2
        u += (1.0 - config.beta2) * g * g
        p -= config.lr * (m / bc1) / (np.sqrt(u / bc2) + config.adam_eps)


def _accumulate(total: ModelParams, part: ModelParams) -> None:
    for (_, t), (_, s) in zip(total.named_arrays(), part.named_arrays()):
        t += s


def _scale(grads: ModelParams, factor: float) -> None:
    for _, g in grads.named_arrays():
        g *= factor


def _global_norm(grads: ModelParams) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in grads.named_arrays()))


def _load_standardized(entries: Sequence[ManifestEntry], stats_source: Sequence[ManifestEntry],
                       dtype) -> tuple[dict, FeatureStats]:
    raw = {e.audio_id: read_features(e.feature_path).astype(np.float64) for e in entries}
    stats = compute_stats([raw[e.audio_id] for e in stats_source])
    feats = {aid: standardize(mat, stats).astype(dtype) for aid, mat in raw.items()}
    return feats, stats


def _caption_embedding(embeddings: Optional[EmbeddingTable],
                       cap: corpus_mod.CaptionRecord) -> np.ndarray:
    if embeddings is None:
        raise MissingEmbedding(cap.caption_id)
    if cap.embedding_row is None or not 0 <= cap.embedding_row < embeddings.rows.shape[0]:
        raise MissingEmbedding(cap.caption_id)
    return embeddings.rows[cap.embedding_row]


def validation_cider(params: ModelParams, vocab: Vocabulary, feats: dict,
                     val_entries: Sequence[ManifestEntry], max_len: int) -> float:
    """Greedy-decode every validation clip and score CIDEr against its own
    references (IDF statistics come from the validation references)."""
    items = []
    for entry in val_entries:
        hyp = greedy_decode(params, feats[entry.audio_id], vocab, max_len)
        items.append(EvalItem(audio_id=entry.audio_id, hypothesis=tuple(hyp),
                              references=tuple(tuple(c.tokens) for c in entry.captions)))
    return cider(EvalCorpus(items=tuple(items)))


def train(entries: Sequence[ManifestEntry], embeddings: Optional[EmbeddingTable],
          config: TrainConfig, model_config: Optional[ModelConfig] = None,
          dtype=np.float32, val_entries: Optional[Sequence[ManifestEntry]] = None,
          min_count: int = 1) -> tuple[Checkpoint, list[dict]]:
    """Train from manifest entries and return (checkpoint, per-epoch log).

    By default the entries are split 9:1 into train/validation by audio_id.
    Passing val_entries explicitly disables the split and trains on all of
    `entries` (used by desk-scale memorization experiments that validate on
    the training clips themselves).

    model_config, when given, supplies the layer dimensions; its vocab_size is
    replaced by the size of the vocabulary built from the training captions.
    Standardization statistics always come from the training subset only.
    """
    if val_entries is None:
        train_entries, val_entries = split_dev(entries, config.val_ratio, config.seed)
    else:
        train_entries = list(entries)
        val_entries = list(val_entries)
    if not train_entries or not val_entries:
        raise TooFewEntries("both train and validation sides must be non-empty")

    vocab = build_vocab(train_entries, min_count=min_count)
    if model_config is None:
        model_config = ModelConfig(vocab_size=vocab.size)
    else:
        model_config = replace(model_config, vocab_size=vocab.size)

    all_entries = list(train_entries) + [e for e in val_entries if e not in train_entries]
    feats, stats = _load_standardized(all_entries, train_entries, dtype)

    pairs = [(entry.audio_id, cap) for entry in train_entries for cap in entry.captions]
    combined_mode = config.loss_mode == LOSS_COMBINED
    if combined_mode:
        # Fail fast on missing rows before spending any epochs.
        for _, cap in pairs:
            _caption_embedding(embeddings, cap)

    params = init_params(model_config, seed=config.seed, dtype=dtype)
    state = AdamState.init_like(params)
    rng = np.random.default_rng(config.seed)
    alpha = config.alpha if combined_mode else 0.0

    best_params = params.copy()
    best_cider = -math.inf
    best_epoch = 0
    log: list[dict] = []

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(pairs))
        epoch_ce = epoch_sent = epoch_comb = 0.0
        for start in range(0, len(perm), config.batch_size):
            window = [pairs[i] for i in perm[start:start + config.batch_size]]
            # Length-sorted within the shuffled window; each sentence still
            # runs exactly its own number of steps (no padded-step loss).
            window.sort(key=lambda pc: len(pc[1].tokens))
            batch_grads = zero_grads(params)
            for audio_id, cap in window:
                ids = encode(cap.tokens, vocab)
                e_ref = _caption_embedding(embeddings, cap) if combined_mode else None
                report, caches = forward_loss(params, feats[audio_id], ids, e_ref, alpha)
                if not math.isfinite(report.combined):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch} (caption {cap.caption_id}): "
                        f"ce={report.ce} sentence={report.sentence}")
                epoch_ce += report.ce
                epoch_sent += report.sentence
                epoch_comb += report.combined
                _accumulate(batch_grads, backward(params, caches))
            _scale(batch_grads, 1.0 / len(window))
            if config.clip_norm is not None:
                norm = _global_norm(batch_grads)
                if norm > config.clip_norm:
                    _scale(batch_grads, config.clip_norm / norm)
            adam_step(params, batch_grads, state, config)

        val_score = validation_cider(params, vocab, feats, val_entries,
                                     model_config.max_decode_len)
        if val_score > best_cider:
            best_cider = val_score
            best_epoch = epoch
            best_params = params.copy()
        log.append({
            "epoch": epoch,
            "ce": epoch_ce / len(pairs),
            "sentence": epoch_sent / len(pairs),
            "combined": epoch_comb / len(pairs),
            "val_cider": val_score,
        })

    ckpt = Checkpoint(config=model_config, params=best_params, vocab=vocab, stats=stats,
                      best_val_cider=best_cider, epoch=best_epoch)
    return ckpt, log


def write_log(log: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record) + "\n")


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)
    write_u32(fh, arr.ndim)
    for d in arr.shape:
        write_u32(fh, d)
    write_f32_array(fh, arr)


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    name_len = read_u32(fh)
    raw = fh.read(name_len)
    if len(raw) < name_len:
        raise CorruptTensor("tensor name truncated")
    name = raw.decode("utf-8")
    rank = read_u32(fh)
    if rank > 4:
        raise CorruptTensor(f"tensor '{name}' declares implausible rank {rank}")
    dims = [read_u32(fh) for _ in range(rank)]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    try:
        data = read_f32_array(fh, count)
    except TruncatedFile as exc:
        raise CorruptTensor(f"tensor '{name}' payload truncated") from exc
    return name, data.reshape(dims)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = ckpt.params.named_arrays()
    with open(path, "wb") as fh:
        write_magic(fh, ACKP_MAGIC)
        write_u32(fh, len(tensors))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)
        surface = ckpt.vocab.surface_tokens
        write_u32(fh, len(surface))
        for token in surface:
            raw = token.encode("utf-8")
            write_u32(fh, len(raw))
            fh.write(raw)
        write_u32(fh, ckpt.stats.dim)
        write_f32_array(fh, ckpt.stats.mean)
        write_f32_array(fh, ckpt.stats.std)
        write_u32(fh, ckpt.epoch)
        fh.write(struct.pack("<d", ckpt.best_val_cider))
        fh.write(struct.pack("<d", ckpt.config.alpha))
        write_u32(fh, ckpt.config.max_decode_len)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint and fail fast on any structural inconsistency."""
    from .nn import AffineParams, GruCellParams

    with open(path, "rb") as fh:
        read_magic(fh, ACKP_MAGIC)
        n_tensors = read_u32(fh)
        tensors = dict(_read_tensor(fh) for _ in range(n_tensors))

        n_surface = read_u32(fh)
        surface = []
        for _ in range(n_surface):
            tok_len = read_u32(fh)
            raw = fh.read(tok_len)
            if len(raw) < tok_len:
                raise TruncatedFile("vocabulary token truncated")
            surface.append(raw.decode("utf-8"))
        d = read_u32(fh)
        mean = read_f32_array(fh, d)
        std = read_f32_array(fh, d)
        epoch = read_u32(fh)
        meta = fh.read(8 + 8 + 4)
        if len(meta) < 20:
            raise TruncatedFile("metadata section truncated")
        best_val_cider, alpha = struct.unpack("<dd", meta[:16])
        (max_decode_len,) = struct.unpack("<I", meta[16:])

    expected = ["encoder.w_ih", "encoder.w_hh", "encoder.b_ih", "encoder.b_hh",
                "enc_proj.w", "enc_proj.b", "word_emb",
                "decoder.w_ih", "decoder.w_hh", "decoder.b_ih", "decoder.b_hh",
                "out_proj.w", "out_proj.b", "sent_proj.w", "sent_proj.b"]
    for name in expected:
        if name not in tensors:
            raise CorruptTensor(f"checkpoint is missing tensor '{name}'")

    params = ModelParams(
        encoder=GruCellParams(tensors["encoder.w_ih"], tensors["encoder.w_hh"],
                              tensors["encoder.b_ih"], tensors["encoder.b_hh"]),
        enc_proj=AffineParams(tensors["enc_proj.w"], tensors["enc_proj.b"]),
        word_emb=tensors["word_emb"],
        decoder=GruCellParams(tensors["decoder.w_ih"], tensors["decoder.w_hh"],
                              tensors["decoder.b_ih"], tensors["decoder.b_hh"]),
        out_proj=AffineParams(tensors["out_proj.w"], tensors["out_proj.b"]),
        sent_proj=AffineParams(tensors["sent_proj.w"], tensors["sent_proj.b"]),
    )
    vocab = Vocabulary.from_tokens(surface)
    vocab_size = params.out_proj.w.shape[0]
    if params.word_emb.shape[0] != vocab_size or vocab.size != vocab_size:
        raise ShapeMismatch(
            f"vocab size mismatch: out_proj {vocab_size}, word_emb "
            f"{params.word_emb.shape[0]}, vocabulary {vocab.size}")
    if params.encoder.input_size != d:
        raise ShapeMismatch(
            f"feature dim mismatch: encoder expects {params.encoder.input_size}, "
            f"stats carry {d}")

    config = ModelConfig(
        vocab_size=vocab_size,
        feat_dim=params.encoder.input_size,
        enc_hidden=params.encoder.hidden_size,
        v_dim=params.enc_proj.w.shape[0],
        dec_hidden=params.decoder.hidden_size,
        word_emb_dim=params.word_emb.shape[1],
        sent_emb_dim=params.sent_proj.w.shape[0],
        alpha=alpha,
        max_decode_len=max_decode_len,
    )
    if params.decoder.input_size != config.word_emb_dim + config.v_dim:
        raise ShapeMismatch(
            f"decoder input {params.decoder.input_size} != word_emb_dim + v_dim "
            f"{config.word_emb_dim + config.v_dim}")
    stats = FeatureStats(mean=mean.astype(np.float64), std=std.astype(np.float64))
    return Checkpoint(config=config, params=params, vocab=vocab, stats=stats,
                      best_val_cider=best_val_cider, epoch=epoch)
