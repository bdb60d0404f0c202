"""Command-line pipeline: extract -> stats -> build-vocab -> embed -> train ->
caption -> evaluate.

Every subcommand is deterministic for identical inputs, flags and seed. Exit
codes: 0 success, 1 input/validation error, 2 internal numeric failure; errors
go to stderr as one JSON record per line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import features as feat_mod
from . import metrics as metrics_mod
from . import training as train_mod
from .binio import FormatError
from .model import ModelConfig, greedy_decode
from .training import NonFiniteLoss, TrainConfig


def _error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _env_default(name: str, fallback, cast):
    """Flags beat environment beats built-in defaults."""
    raw = os.environ.get(name)
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError:
        return fallback


DEFAULT_SEED = _env_default("AUDIOCAP_SEED", 0, int)
DEFAULT_JOBS = _env_default("AUDIOCAP_JOBS", os.cpu_count() or 1, int)
DEFAULT_PRECISION = _env_default("AUDIOCAP_PRECISION", "f32", str)


def _load_caption_map(path) -> dict:
    """Caption source file: JSONL {audio_id, captions:[{caption_id,text,tokens}]}."""
    caps: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            caps[obj["audio_id"]] = [
                corpus_mod.CaptionRecord(caption_id=c["caption_id"], text=c["text"],
                                         tokens=tuple(c["tokens"]))
                for c in obj["captions"]
            ]
    return caps


def cmd_extract(args) -> int:
    caption_map = _load_caption_map(args.captions) if args.captions else {}
    wav_dir = Path(args.wav_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wavs:
        _error("NoInput", f"no .wav files under {wav_dir}")
        return 1

    failures = []

    def one(wav_path: Path):
        clip = feat_mod.load_wav(wav_path)
        if args.sample_rate_check and clip.sample_rate != args.sample_rate_check:
            raise feat_mod.InvalidParam(
                f"{wav_path}: sample rate {clip.sample_rate} != {args.sample_rate_check}")
        lms = feat_mod.extract_lms(clip, window_ms=args.window_ms, hop_ms=args.hop_ms,
                                   n_mels=args.n_mels)
        out_path = out_dir / (wav_path.stem + ".lmsf")
        feat_mod.write_features(lms, out_path)
        return wav_path.stem, str(out_path)

    def safely(wav_path: Path):
        try:
            return one(wav_path)
        except Exception as exc:
            return wav_path, exc

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(safely, wavs))
    else:
        outcomes = [safely(w) for w in wavs]

    results = []
    for outcome in outcomes:  # per-file diagnostics, keep going
        if isinstance(outcome[1], Exception):
            failures.append(outcome)
            _error(type(outcome[1]).__name__, f"{outcome[0]}: {outcome[1]}")
        else:
            results.append(outcome)

    entries = [corpus_mod.ManifestEntry(audio_id=aid, feature_path=fp,
                                        captions=tuple(caption_map.get(aid, ())))
               for aid, fp in results]
    corpus_mod.save_manifest(entries, args.manifest_out)
    print(f"extracted {len(results)} clips -> {args.manifest_out}")
    return 1 if failures else 0


def cmd_stats(args) -> int:
    entries = corpus_mod.load_manifest(args.manifest, allow_empty_captions=True)
    train_entries, _ = train_mod.split_dev(entries, args.val_ratio, args.seed)
    stats = feat_mod.compute_stats(
        [feat_mod.read_features(e.feature_path) for e in train_entries])
    feat_mod.write_stats(stats, args.out)
    print(f"stats over {len(train_entries)} training clips -> {args.out}")
    return 0


def cmd_build_vocab(args) -> int:
    entries = corpus_mod.load_manifest(args.manifest)
    vocab = corpus_mod.build_vocab(entries, min_count=args.min_count)
    corpus_mod.write_vocab_file(vocab, args.out)
    print(f"vocabulary of {vocab.size} ids -> {args.out}")
    return 0


def cmd_embed(args) -> int:
    entries = corpus_mod.load_manifest(args.manifest)
    entries, table = corpus_mod.embed_manifest(entries, dim=args.dim, seed=args.seed)
    corpus_mod.write_embeddings(table, args.out)
    corpus_mod.save_manifest(entries, args.manifest)
    print(f"{table.rows.shape[0]} caption embeddings (dim {table.dim}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    entries = corpus_mod.load_manifest(args.manifest)
    embeddings = None
    if args.loss == train_mod.LOSS_COMBINED:
        if not args.embeddings:
            _error("MissingEmbedding", "--embeddings is required with --loss combined")
            return 1
        embeddings = corpus_mod.read_embeddings(args.embeddings)

    feat_dim = feat_mod.read_features(entries[0].feature_path).shape[1]
    sent_dim = embeddings.dim if embeddings is not None else args.sent_emb_dim
    model_config = ModelConfig(
        vocab_size=5,  # replaced by the built vocabulary
        feat_dim=feat_dim,
        enc_hidden=args.enc_hidden,
        v_dim=args.v_dim,
        dec_hidden=args.dec_hidden,
        word_emb_dim=args.word_emb_dim,
        sent_emb_dim=sent_dim,
        alpha=args.alpha,
        max_decode_len=args.max_decode_len,
    )
    config = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                         alpha=args.alpha, val_ratio=args.val_ratio, seed=args.seed,
                         loss_mode=args.loss, clip_norm=args.clip_norm)
    dtype = np.float64 if args.precision == "f64" else np.float32
    ckpt, log = train_mod.train(entries, embeddings, config,
                                model_config=model_config, dtype=dtype)
    train_mod.save_checkpoint(ckpt, args.out_ckpt)
    if args.log:
        train_mod.write_log(log, args.log)
    print(f"best epoch {ckpt.epoch} val CIDEr {ckpt.best_val_cider:.6f} -> {args.out_ckpt}")
    return 0


def _collect_feature_inputs(args) -> list[tuple[str, np.ndarray]]:
    clips: list[tuple[str, np.ndarray]] = []
    if args.features:
        path = Path(args.features)
        if path.is_dir():
            for p in sorted(path.glob("*.lmsf")):
                clips.append((p.stem, feat_mod.read_features(p)))
        else:
            for entry in corpus_mod.load_manifest(path, allow_empty_captions=True):
                clips.append((entry.audio_id, feat_mod.read_features(entry.feature_path)))
    else:
        for p in sorted(Path(args.wav).glob("*.wav")):
            clip = feat_mod.load_wav(p)
            clips.append((p.stem, feat_mod.extract_lms(clip)))
    return clips


def cmd_caption(args) -> int:
    ckpt = train_mod.load_checkpoint(args.ckpt)
    clips = _collect_feature_inputs(args)
    if not clips:
        _error("NoInput", "no feature or wav inputs found")
        return 1
    dtype = ckpt.params.word_emb.dtype

    def one(item):
        audio_id, raw = item
        f = feat_mod.standardize(raw, ckpt.stats).astype(dtype)
        return audio_id, greedy_decode(ckpt.params, f, ckpt.vocab,
                                       ckpt.config.max_decode_len)

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            decoded = list(pool.map(one, clips))
    else:
        decoded = [one(c) for c in clips]

    with open(args.out, "w", encoding="utf-8") as fh:
        for audio_id, tokens in decoded:
            fh.write(json.dumps({"audio_id": audio_id, "tokens": tokens},
                                ensure_ascii=False, separators=(",", ":")) + "\n")
    print(f"captioned {len(decoded)} clips -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    hyps = {}
    with open(args.hypotheses, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            hyps[obj["audio_id"]] = tuple(obj["tokens"])
    refs = {e.audio_id: tuple(tuple(c.tokens) for c in e.captions)
            for e in corpus_mod.load_manifest(args.manifest)}
    missing = sorted(set(hyps) - set(refs))
    if missing:
        _error("MissingReferences", f"no references for audio_ids: {missing}")
        return 1
    items = tuple(metrics_mod.EvalItem(audio_id=aid, hypothesis=hyp,
                                       references=refs[aid])
                  for aid, hyp in sorted(hyps.items()))
    report = metrics_mod.evaluate(metrics_mod.EvalCorpus(items=items),
                                  cider_scale=1.0 if args.cider_raw else 10.0)
    text = metrics_mod.format_report(report)
    with open(args.out_report, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audiocap",
                                     description="Audio captioning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="WAVs -> LMSF feature files + manifest")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest-out", required=True)
    p.add_argument("--captions", help="JSONL {audio_id, captions:[...]} to attach")
    p.add_argument("--sample-rate-check", type=int, default=None)
    p.add_argument("--jobs", type=int, default=DEFAULT_JOBS)
    p.add_argument("--window-ms", type=float, default=40.0)
    p.add_argument("--hop-ms", type=float, default=20.0)
    p.add_argument("--n-mels", type=int, default=64)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", help="standardization stats over the training split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-ratio", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("build-vocab", help="token inventory from manifest captions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("embed", help="sentence embeddings for every caption")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["fallback"], default="fallback")
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train the captioner")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--loss", choices=[train_mod.LOSS_CE_ONLY, train_mod.LOSS_COMBINED],
                   default=train_mod.LOSS_COMBINED)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--val-ratio", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--log")
    p.add_argument("--precision", choices=["f32", "f64"], default=DEFAULT_PRECISION)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--enc-hidden", type=int, default=512)
    p.add_argument("--v-dim", type=int, default=256)
    p.add_argument("--dec-hidden", type=int, default=512)
    p.add_argument("--word-emb-dim", type=int, default=256)
    p.add_argument("--sent-emb-dim", type=int, default=768)
    p.add_argument("--max-decode-len", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="greedy-decode clips with a checkpoint")
    p.add_argument("--ckpt", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--features", help="directory of .lmsf files or a manifest")
    group.add_argument("--wav", help="directory of .wav files")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=DEFAULT_JOBS)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="score hypotheses against manifest references")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--cider-raw", action="store_true",
                   help="report CIDEr without the x10 scale")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits itself; keep 1 for usage errors
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        _error("NonFiniteLoss", str(exc))
        return 2
    except (ValueError, KeyError, OSError, FormatError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
