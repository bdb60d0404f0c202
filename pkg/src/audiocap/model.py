"""GRU encoder-decoder captioner with a combined word/sentence objective.

The encoder runs a single-layer GRU over the standardized T x D feature
matrix, mean-pools the hidden states and projects them to a fixed-size audio
embedding v. The decoder is a second GRU fed, at every step, the previous
token's embedding concatenated with v (teacher forcing during training,
its own argmax during greedy decoding).

Training objective per (audio, caption) pair:

    ce        = sum over steps of -log p(target_t)          (word loss)
    sentence  = 1 - cos(sent_proj(mean_t h_t), e_ref)       (sentence loss)
    combined  = ce + alpha * sentence

Backward composes the layer backwards from nn.py in exact reverse order; the
sentence branch flows through sent_proj and the mean pool into every decoder
step and, through v, into the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .corpus import EOS_ID, PAD_ID, SOS_ID, UNK_ID, Vocabulary, decode as decode_ids
from .nn import (
    AffineParams,
    GruCellParams,
    affine_backward,
    affine_forward,
    cosine_dissim_backward,
    cosine_dissim_forward,
    gru_cell_backward,
    gru_cell_forward,
    mean_pool_backward,
    mean_pool_forward,
    softmax_ce_backward,
    softmax_ce_forward,
)


class EmptyCaption(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feat_dim: int = 64
    enc_hidden: int = 512
    v_dim: int = 256
    dec_hidden: int = 512
    word_emb_dim: int = 256
    sent_emb_dim: int = 768
    alpha: float = 10.0
    max_decode_len: int = 50

    def __post_init__(self):
        for name in ("vocab_size", "feat_dim", "enc_hidden", "v_dim", "dec_hidden",
                     "word_emb_dim", "sent_emb_dim", "max_decode_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class ModelParams:
    encoder: GruCellParams
    enc_proj: AffineParams
    word_emb: np.ndarray
    decoder: GruCellParams
    out_proj: AffineParams
    sent_proj: AffineParams

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) listing used by the optimizer and checkpoints."""
        return [
            ("encoder.w_ih", self.encoder.w_ih),
            ("encoder.w_hh", self.encoder.w_hh),
            ("encoder.b_ih", self.encoder.b_ih),
            ("encoder.b_hh", self.encoder.b_hh),
            ("enc_proj.w", self.enc_proj.w),
            ("enc_proj.b", self.enc_proj.b),
            ("word_emb", self.word_emb),
            ("decoder.w_ih", self.decoder.w_ih),
            ("decoder.w_hh", self.decoder.w_hh),
            ("decoder.b_ih", self.decoder.b_ih),
            ("decoder.b_hh", self.decoder.b_hh),
            ("out_proj.w", self.out_proj.w),
            ("out_proj.b", self.out_proj.b),
            ("sent_proj.w", self.sent_proj.w),
            ("sent_proj.b", self.sent_proj.b),
        ]

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder=GruCellParams(self.encoder.w_ih.copy(), self.encoder.w_hh.copy(),
                                  self.encoder.b_ih.copy(), self.encoder.b_hh.copy()),
            enc_proj=AffineParams(self.enc_proj.w.copy(), self.enc_proj.b.copy()),
            word_emb=self.word_emb.copy(),
            decoder=GruCellParams(self.decoder.w_ih.copy(), self.decoder.w_hh.copy(),
                                  self.decoder.b_ih.copy(), self.decoder.b_hh.copy()),
            out_proj=AffineParams(self.out_proj.w.copy(), self.out_proj.b.copy()),
            sent_proj=AffineParams(self.sent_proj.w.copy(), self.sent_proj.b.copy()),
        )


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan), 1/sqrt(fan)) init for every tensor."""
    rng = np.random.default_rng(seed)
    emb_bound = 1.0 / np.sqrt(config.word_emb_dim)
    return ModelParams(
        encoder=nn.init_gru(rng, config.feat_dim, config.enc_hidden, dtype),
        enc_proj=nn.init_affine(rng, config.v_dim, config.enc_hidden, dtype),
        word_emb=rng.uniform(-emb_bound, emb_bound,
                             (config.vocab_size, config.word_emb_dim)).astype(dtype),
        decoder=nn.init_gru(rng, config.word_emb_dim + config.v_dim, config.dec_hidden, dtype),
        out_proj=nn.init_affine(rng, config.vocab_size, config.dec_hidden, dtype),
        sent_proj=nn.init_affine(rng, config.sent_emb_dim, config.dec_hidden, dtype),
    )


def zero_grads(params: ModelParams) -> ModelParams:
    """Gradient container with the same structure, all zeros."""
    return ModelParams(
        encoder=GruCellParams(np.zeros_like(params.encoder.w_ih),
                              np.zeros_like(params.encoder.w_hh),
                              np.zeros_like(params.encoder.b_ih),
                              np.zeros_like(params.encoder.b_hh)),
        enc_proj=AffineParams(np.zeros_like(params.enc_proj.w),
                              np.zeros_like(params.enc_proj.b)),
        word_emb=np.zeros_like(params.word_emb),
        decoder=GruCellParams(np.zeros_like(params.decoder.w_ih),
                              np.zeros_like(params.decoder.w_hh),
                              np.zeros_like(params.decoder.b_ih),
                              np.zeros_like(params.decoder.b_hh)),
        out_proj=AffineParams(np.zeros_like(params.out_proj.w),
                              np.zeros_like(params.out_proj.b)),
        sent_proj=AffineParams(np.zeros_like(params.sent_proj.w),
                               np.zeros_like(params.sent_proj.b)),
    )


def _accum_gru(acc: GruCellParams, d: GruCellParams) -> None:
    acc.w_ih += d.w_ih
    acc.w_hh += d.w_hh
    acc.b_ih += d.b_ih
    acc.b_hh += d.b_hh


@dataclass(frozen=True)
class LossReport:
    ce: float
    sentence: float
    combined: float
    token_count: int


def encode(params: ModelParams, f: np.ndarray):
    """Encode a standardized T x D feature matrix into the audio embedding v.

    Returns (v, cache). Identical features always give identical v; the
    captions never enter this path.
    """
    f = np.asarray(f)
    if f.ndim != 2 or f.shape[1] != params.encoder.input_size:
        raise nn.DimensionMismatch(
            f"features {f.shape} vs encoder input size {params.encoder.input_size}")
    if f.shape[0] == 0:
        raise nn.EmptySequence("feature matrix has no frames")
    h = np.zeros(params.encoder.hidden_size, dtype=f.dtype)
    step_caches = []
    hiddens = np.empty((f.shape[0], h.shape[0]), dtype=f.dtype)
    for t in range(f.shape[0]):
        h, cache = gru_cell_forward(params.encoder, f[t], h)
        step_caches.append(cache)
        hiddens[t] = h
    pooled, t_count = mean_pool_forward(hiddens)
    v, proj_cache = affine_forward(params.enc_proj, pooled)
    return v, (step_caches, t_count, proj_cache)


def teacher_forced_step_inputs(params: ModelParams, v: np.ndarray,
                               gt_token_ids: Sequence[int]):
    """Shift-by-one teacher forcing: step t consumes concat(emb[in_t], v).

    Input tokens are [SOS, gt_1, ..., gt_{L-1}]; targets are the ground truth
    ids themselves, so the final target is EOS. v rides along at every step.
    Returns (step_inputs, input_ids, target_ids).
    """
    if not gt_token_ids:
        raise EmptyCaption("caption has no token ids")
    if gt_token_ids[-1] != EOS_ID:
        raise ValueError("ground-truth id sequence must end with EOS")
    input_ids = [SOS_ID] + list(gt_token_ids[:-1])
    step_inputs = [np.concatenate([params.word_emb[i], v]) for i in input_ids]
    return step_inputs, input_ids, list(gt_token_ids)


def forward_loss(params: ModelParams, f: np.ndarray, gt_token_ids: Sequence[int],
                 e_ref, alpha: float):
    """Run one teacher-forced pass and evaluate the combined objective.

    ce is the per-sentence sum of step cross-entropies; sentence is the cosine
    dissimilarity between the projected mean decoder state and e_ref. Passing
    e_ref=None skips the sentence branch entirely (word loss only, sentence
    reported as 0). Returns (LossReport, caches) with caches consumed by
    `backward`.
    """
    v, enc_cache = encode(params, f)
    step_inputs, input_ids, target_ids = teacher_forced_step_inputs(params, v, gt_token_ids)

    h = np.zeros(params.decoder.hidden_size, dtype=v.dtype)
    hiddens = np.empty((len(target_ids), h.shape[0]), dtype=v.dtype)
    dec_caches = []
    ce = 0.0
    for t, (x, target) in enumerate(zip(step_inputs, target_ids)):
        h, gru_cache = gru_cell_forward(params.decoder, x, h)
        logits, out_cache = affine_forward(params.out_proj, h)
        step_loss, ce_cache = softmax_ce_forward(logits, target)
        ce += step_loss
        hiddens[t] = h
        dec_caches.append((gru_cache, out_cache, ce_cache))

    step_count = len(target_ids)
    if e_ref is None:
        sentence = 0.0
        sent_cache = None
        cos_cache = None
    else:
        pooled, step_count = mean_pool_forward(hiddens)
        e_hat, sent_cache = affine_forward(params.sent_proj, pooled)
        sentence, cos_cache = cosine_dissim_forward(e_hat, np.asarray(e_ref, dtype=v.dtype))
    combined = ce + alpha * sentence

    report = LossReport(ce=float(ce), sentence=float(sentence),
                        combined=float(combined), token_count=len(target_ids))
    caches = (enc_cache, dec_caches, input_ids, step_count, sent_cache, cos_cache, alpha)
    return report, caches


def backward(params: ModelParams, caches) -> ModelParams:
    """Exact gradient of the combined loss w.r.t. every parameter tensor."""
    enc_cache, dec_caches, input_ids, step_count, sent_cache, cos_cache, alpha = caches
    grads = zero_grads(params)
    emb_dim = params.word_emb.shape[1]

    # Sentence branch: cosine -> sent_proj -> mean pool over decoder states.
    if cos_cache is None:
        dh_pool = np.zeros((step_count, params.decoder.hidden_size),
                           dtype=params.word_emb.dtype)
    else:
        de_hat = cosine_dissim_backward(cos_cache, alpha)
        dpooled, dsent = affine_backward(params.sent_proj, sent_cache, de_hat)
        grads.sent_proj.w += dsent.w
        grads.sent_proj.b += dsent.b
        dh_pool = mean_pool_backward(step_count, dpooled)

    # Decoder, reverse time.
    dh_next = np.zeros(params.decoder.hidden_size, dtype=dh_pool.dtype)
    dv = np.zeros(params.enc_proj.w.shape[0], dtype=dh_pool.dtype)
    for t in range(len(dec_caches) - 1, -1, -1):
        gru_cache, out_cache, ce_cache = dec_caches[t]
        dlogits = softmax_ce_backward(ce_cache)
        dh_t, dout = affine_backward(params.out_proj, out_cache, dlogits)
        grads.out_proj.w += dout.w
        grads.out_proj.b += dout.b
        dh = dh_t + dh_next + dh_pool[t]
        dx, dh_next, dgru = gru_cell_backward(params.decoder, gru_cache, dh)
        _accum_gru(grads.decoder, dgru)
        grads.word_emb[input_ids[t]] += dx[:emb_dim]
        dv += dx[emb_dim:]

    # Encoder: v projection, pool, then reverse time over frames.
    enc_steps, t_count, proj_cache = enc_cache
    dpooled_enc, dproj = affine_backward(params.enc_proj, proj_cache, dv)
    grads.enc_proj.w += dproj.w
    grads.enc_proj.b += dproj.b
    dh_pool_enc = mean_pool_backward(t_count, dpooled_enc)
    dh_next = np.zeros(params.encoder.hidden_size, dtype=dv.dtype)
    for t in range(len(enc_steps) - 1, -1, -1):
        dh = dh_next + dh_pool_enc[t]
        _, dh_next, dgru = gru_cell_backward(params.encoder, enc_steps[t], dh)
        _accum_gru(grads.encoder, dgru)

    return grads


def greedy_decode(params: ModelParams, f: np.ndarray, vocab: Vocabulary,
                  max_len: int = 50) -> list[str]:
    """Argmax decoding from SOS until EOS or max_len tokens.

    PAD/SOS/UNK can never be emitted (masked out), EOS terminates and is not
    returned, and argmax ties resolve to the smallest token id, so decoding is
    fully deterministic.
    """
    v, _ = encode(params, f)
    h = np.zeros(params.decoder.hidden_size, dtype=v.dtype)
    mask = np.zeros(params.out_proj.w.shape[0])
    mask[[PAD_ID, SOS_ID, UNK_ID]] = -np.inf
    prev = SOS_ID
    out_ids: list[int] = []
    for _ in range(max_len):
        x = np.concatenate([params.word_emb[prev], v])
        h, _ = gru_cell_forward(params.decoder, x, h)
        logits, _ = affine_forward(params.out_proj, h)
        nxt = int(np.argmax(logits + mask))
        if nxt == EOS_ID:
            break
        out_ids.append(nxt)
        prev = nxt
    return decode_ids(out_ids + [EOS_ID], vocab)
