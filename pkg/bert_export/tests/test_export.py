import json

import numpy as np
import pytest

from bert_export.export import DimMismatch, ExportConfig, ModelLoadError, export, main

# Validation goes through the captioning toolkit's own reader: the SEMB file
# must be consumable by the training pipeline as-is.
from audiocap.corpus import read_embeddings


def run_export(manifest_path, out_path, encoder_dir, **kwargs):
    config = ExportConfig(manifest=str(manifest_path), output=str(out_path),
                          model=str(encoder_dir), **kwargs)
    return export(config)


class TestExport:
    def test_semb_passes_primary_reader(self, tmp_path, manifest_path, encoder_dir):
        out = tmp_path / "emb.semb"
        n = run_export(manifest_path, out, encoder_dir)
        table = read_embeddings(out, expected_dim=768)
        assert n == 4
        assert table.rows.shape == (4, 768)
        assert np.all(np.isfinite(table.rows))

    def test_rows_follow_manifest_order(self, tmp_path, manifest_path, encoder_dir):
        out = tmp_path / "emb.semb"
        run_export(manifest_path, out, encoder_dir)
        records = [json.loads(line) for line in
                   open(manifest_path, encoding="utf-8") if line.strip()]
        rows = [c["embedding_row"] for r in records for c in r["captions"]]
        assert rows == [0, 1, 2, 3]

    def test_deterministic_across_runs(self, tmp_path, manifest_path, encoder_dir):
        a, b = tmp_path / "a.semb", tmp_path / "b.semb"
        run_export(manifest_path, a, encoder_dir)
        run_export(manifest_path, b, encoder_dir)
        assert a.read_bytes() == b.read_bytes()

    def test_identical_captions_identical_rows(self, tmp_path, manifest_path,
                                               encoder_dir):
        # captions c0 and c3 carry the same text
        out = tmp_path / "emb.semb"
        run_export(manifest_path, out, encoder_dir)
        table = read_embeddings(out)
        np.testing.assert_array_equal(table.rows[0], table.rows[3])

    def test_self_cosine_is_one(self, tmp_path, manifest_path, encoder_dir):
        out = tmp_path / "emb.semb"
        run_export(manifest_path, out, encoder_dir)
        rows = read_embeddings(out).rows
        cos = float(rows[0] @ rows[3]) / (np.linalg.norm(rows[0]) * np.linalg.norm(rows[3]))
        assert abs(cos - 1.0) < 1e-6

    def test_pooling_modes_differ(self, tmp_path, manifest_path, encoder_dir):
        cls_out, mean_out = tmp_path / "cls.semb", tmp_path / "mean.semb"
        run_export(manifest_path, cls_out, encoder_dir, pooling="cls")
        run_export(manifest_path, mean_out, encoder_dir, pooling="mean")
        assert cls_out.read_bytes() != mean_out.read_bytes()
        assert read_embeddings(mean_out).rows.shape == (4, 768)

    def test_batch_size_invariance(self, tmp_path, manifest_path, encoder_dir):
        a, b = tmp_path / "b1.semb", tmp_path / "b4.semb"
        run_export(manifest_path, a, encoder_dir, batch_size=1)
        run_export(manifest_path, b, encoder_dir, batch_size=4)
        ra, rb = read_embeddings(a).rows, read_embeddings(b).rows
        np.testing.assert_allclose(ra, rb, atol=2e-6)


class TestErrors:
    def test_wrong_hidden_size(self, tmp_path, manifest_path, narrow_encoder_dir):
        with pytest.raises(DimMismatch):
            run_export(manifest_path, tmp_path / "x.semb", narrow_encoder_dir)

    def test_missing_model(self, tmp_path, manifest_path):
        with pytest.raises(ModelLoadError):
            run_export(manifest_path, tmp_path / "x.semb", tmp_path / "no-model")

    def test_bad_pooling_flag(self, manifest_path):
        with pytest.raises(ValueError):
            ExportConfig(manifest=str(manifest_path), output="x", model="y",
                         pooling="max")


class TestCli:
    def test_main_success(self, tmp_path, manifest_path, encoder_dir, capsys):
        code = main(["--manifest", str(manifest_path),
                     "--out", str(tmp_path / "e.semb"),
                     "--model", str(encoder_dir)])
        assert code == 0
        assert "4 caption embeddings" in capsys.readouterr().out

    def test_main_failure_exit_one(self, tmp_path, manifest_path, capsys):
        code = main(["--manifest", str(manifest_path),
                     "--out", str(tmp_path / "e.semb"),
                     "--model", str(tmp_path / "missing")])
        assert code == 1
        assert "ModelLoadError" in capsys.readouterr().err


def test_acceptance_exporter_output(tmp_path, manifest_path, encoder_dir):
    """Valid SEMB via the primary reader, dim 768, manifest order, determinism,
    self-cosine 1.0."""
    a, b = tmp_path / "r1.semb", tmp_path / "r2.semb"
    n = run_export(manifest_path, a, encoder_dir)
    run_export(manifest_path, b, encoder_dir)
    table = read_embeddings(a, expected_dim=768)
    records = [json.loads(line) for line in open(manifest_path, encoding="utf-8")
               if line.strip()]
    rows = [c["embedding_row"] for r in records for c in r["captions"]]
    cos = float(table.rows[0] @ table.rows[3]) / (
        np.linalg.norm(table.rows[0]) * np.linalg.norm(table.rows[3]))
    ok = (table.rows.shape == (n, 768) and rows == list(range(n))
          and a.read_bytes() == b.read_bytes() and abs(cos - 1.0) < 1e-6)
    print(f"[{'PASS' if ok else 'FAIL'}] exporter-output: {n} rows, dim 768, "
          f"manifest order {rows}, deterministic={a.read_bytes() == b.read_bytes()}, "
          f"self-cosine {cos:.8f}")
    assert ok
