"""Shared builders for synthetic corpora used across the test suite."""

from __future__ import annotations

import wave

import numpy as np
import pytest

from audiocap.corpus import CaptionRecord, ManifestEntry
from audiocap.features import write_features


def write_wav(path, samples: np.ndarray, sample_rate: int = 16000,
              channels: int = 1) -> None:
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    if channels > 1:
        pcm = np.repeat(pcm[:, None], channels, axis=1)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def synthetic_manifest(tmp_path, captions_per_audio: list[list[list[str]]],
                       n_frames: int = 10, feat_dim: int = 8,
                       seed: int = 0) -> list[ManifestEntry]:
    """Random standardized features on disk plus the given token captions.

    captions_per_audio[i] is the list of token lists for clip i.
    """
    rng = np.random.default_rng(seed)
    entries = []
    cap_no = 0
    for i, captions in enumerate(captions_per_audio):
        audio_id = f"clip{i:03d}"
        path = tmp_path / f"{audio_id}.lmsf"
        write_features(rng.normal(size=(n_frames, feat_dim)).astype(np.float32), path)
        records = []
        for tokens in captions:
            records.append(CaptionRecord(caption_id=f"c{cap_no:04d}",
                                         tokens=tuple(tokens),
                                         text=" ".join(tokens)))
            cap_no += 1
        entries.append(ManifestEntry(audio_id=audio_id, feature_path=str(path),
                                     captions=tuple(records)))
    return entries


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
