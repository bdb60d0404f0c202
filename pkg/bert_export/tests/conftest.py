import json

import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizer

CHARS = list("汽车在行驶中男司机和女乘客聊天伴随着发动机声音乐播放刹停于路边引擎") \
    + list("abcdefghijklmnopqrstuvwxyz0123456789")


def build_encoder(path, hidden_size=768, heads=12):
    """Materialize a tiny randomly-initialized BERT-style encoder on disk."""
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + CHARS
    path.mkdir(parents=True, exist_ok=True)
    vocab_file = path / "vocab.txt"
    vocab_file.write_text("\n".join(vocab) + "\n", encoding="utf-8")
    tokenizer = BertTokenizer(vocab_file=str(vocab_file))
    tokenizer.save_pretrained(str(path))
    torch.manual_seed(0)
    config = BertConfig(vocab_size=len(vocab), hidden_size=hidden_size,
                        num_hidden_layers=1, num_attention_heads=heads,
                        intermediate_size=256, max_position_embeddings=64)
    BertModel(config).save_pretrained(str(path))
    return path


@pytest.fixture(scope="session")
def encoder_dir(tmp_path_factory):
    return build_encoder(tmp_path_factory.mktemp("encoder"))


@pytest.fixture(scope="session")
def narrow_encoder_dir(tmp_path_factory):
    return build_encoder(tmp_path_factory.mktemp("narrow"), hidden_size=384, heads=6)


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for obj in entries:
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n")


@pytest.fixture
def manifest_path(tmp_path):
    entries = [
        {"audio_id": "car01", "feature_path": "car01.lmsf", "captions": [
            {"caption_id": "c0", "text": "汽车在行驶中", "tokens": ["汽车", "在", "行驶", "中"],
             "embedding_row": None},
            {"caption_id": "c1", "text": "男司机在聊天", "tokens": ["男", "司机", "在", "聊天"],
             "embedding_row": None},
        ]},
        {"audio_id": "car02", "feature_path": "car02.lmsf", "captions": [
            {"caption_id": "c2", "text": "汽车停在路边", "tokens": ["汽车", "停", "在", "路边"],
             "embedding_row": None},
            {"caption_id": "c3", "text": "汽车在行驶中", "tokens": ["汽车", "在", "行驶", "中"],
             "embedding_row": None},
        ]},
    ]
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, entries)
    return path
