"""
Unit tests for the run index and artifact writers.
"""
import numpy as np
import pandas as pd
import pytest

from storage import local_store


class TestRunIndex:
    """Test cases for the run index."""

    def test_put_and_get(self, tmp_path):
        manifest = tmp_path / "out" / "manifest.json"

        local_store.put_run("abc", "fit", str(tmp_path / "out"), str(manifest))

        entry = local_store.get_run("abc")
        assert entry["command"] == "fit"
        assert entry["manifest"] == str(manifest)
        assert list(local_store.all_runs()) == ["abc"]

    def test_unknown_run(self):
        assert local_store.get_run("missing") is None
        assert local_store.all_runs() == {}

    def test_index_survives_reload(self, tmp_path):
        """Test several runs accumulate in the index file."""
        local_store.put_run("a", "fit", str(tmp_path), str(tmp_path / "m1.json"))
        local_store.put_run("b", "predict", str(tmp_path), str(tmp_path / "m2.json"))

        assert sorted(local_store._load_index()) == ["a", "b"]

    def test_run_id_length(self):
        assert len(local_store.make_run_id("fit", 1)) == 16


class TestFileHash:
    def test_matches_git_blob_hash(self, tmp_path):
        """Test the hash of b'hello\\n' against the value git computes."""
        path = tmp_path / "x.txt"
        path.write_bytes(b"hello\n")

        assert local_store.file_sha1(str(path)) == "ce013625030ba8dba906f756967f9e9ca394464a"


class TestArtifactWriters:
    """Test cases for JSON and CSV writers."""

    def test_json_with_numpy_values(self, tmp_path):
        path = str(tmp_path / "summary.json")

        local_store.write_json(path, {"seeds": np.array([1, 2]), "rhat": np.float64(1.01)})

        assert local_store.read_json(path) == {"seeds": [1, 2], "rhat": 1.01}

    def test_json_rejects_unknown_types(self, tmp_path):
        with pytest.raises(TypeError):
            local_store.write_json(str(tmp_path / "bad.json"), {"x": object()})

    def test_matrix_keeps_full_precision(self, tmp_path):
        """Test floats survive the CSV writer exactly."""
        values = np.random.default_rng(0).normal(size=(4, 2))
        path = str(tmp_path / "m.csv")

        local_store.write_matrix(path, values, columns=["a", "b"])

        back = pd.read_csv(path, float_precision="round_trip")
        assert list(back.columns) == ["a", "b"]
        assert np.array_equal(back.to_numpy(), values)

    def test_ensure_dir(self, tmp_path):
        target = tmp_path / "a" / "b"

        assert local_store.ensure_dir(str(target)) == str(target)
        assert target.is_dir()
