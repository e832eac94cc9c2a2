"""End-to-end command-line pipeline runs."""

import json

import pytest

from prix_classify import cli
from prix_classify.classifier import load_model
from prix_classify.evaluation import load_results
from prix_classify.features import load_feature_specs, load_vectors
from prix_classify.ingest import load_collection
from prix_classify.synth import SynthConfig


SYNTH = dict(
    num_classes=3, docs_per_class=[4, 4, 4], pages_per_doc=(1, 2),
    words_per_page=(15, 25), vocab_size=60, signatures_per_class=3,
    signature_prob=0.25, noise_words_per_page=(0, 2), zipf_exponent=1.0, seed=13,
)


@pytest.fixture
def synth_config_path(tmp_path):
    path = tmp_path / "synth.json"
    SynthConfig(**SYNTH).to_json(path)
    return path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestGridParsing:
    def test_forms(self):
        assert cli.parse_grid("8..64x2") == [8, 16, 32, 64]
        assert cli.parse_grid("8..64x4") == [8, 32]
        assert cli.parse_grid("8,16") == [8, 16]
        assert cli.parse_grid("64") == [64]
        assert cli.parse_grid([4, 8]) == [4, 8]

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            cli.parse_grid("64..8x2")

    def test_derive_seed_stable(self):
        assert cli.derive_seed(7, "loo") == cli.derive_seed(7, "loo")
        assert cli.derive_seed(7, "loo") != cli.derive_seed(7, "synth")
        assert cli.derive_seed(7, "loo") != cli.derive_seed(8, "loo")


class TestStages:
    def test_full_stage_chain(self, tmp_path, synth_config_path):
        out = tmp_path / "work"
        out.mkdir()
        assert run(["synth", "--config", synth_config_path, "--out", out / "data"]) == 0
        assert (out / "data" / "prix.tsv").exists()
        assert (out / "data" / "run_manifest.json").exists()

        assert run([
            "ingest", "--prix", out / "data" / "prix.tsv",
            "--manifest", out / "data" / "manifest.tsv",
            "--strict", "--out", out / "collection.json",
        ]) == 0
        collection = load_collection(out / "collection.json")
        assert collection.num_documents == 12

        assert run([
            "expectations", "--collection", out / "collection.json",
            "--out", out / "table.json",
        ]) == 0

        assert run([
            "features", "--collection", out / "collection.json",
            "--table", out / "table.json", "--n", "4,8",
            "--vectors-out", out / "vectors.json", "--out", out / "spec.json",
        ]) == 0
        specs = load_feature_specs(out / "spec.json")
        assert [s.n for s in specs] == [4, 8]
        vectors, meta = load_vectors(out / "vectors.json")
        assert meta["n"] == 8 and len(vectors) == 12

        assert run([
            "train", "--spec", out / "spec.json", "--vectors", out / "vectors.json",
            "--arch", "mlp0", "--epochs", "5", "--seed", "3",
            "--out", out / "model.json",
        ]) == 0
        model = load_model(out / "model.json")
        assert model.architecture.input_dim == 8
        assert model.train_config_digest

        assert run([
            "loo", "--collection", out / "collection.json",
            "--granularity", "doc", "--arch", "mlp0", "--n-grid", "8",
            "--epochs", "5", "--seed", "1", "--out", out / "loo",
        ]) == 0
        results = load_results(out / "loo" / "results.json")
        assert len(results) == 1
        assert (out / "loo" / "curve_document.csv").exists()
        assert (out / "loo" / "document" / "confusion_mlp0_8.json").exists()

        assert run([
            "report", "--results", out / "loo" / "results.json",
            "--out", out / "report",
        ]) == 0
        assert (out / "report" / "curve_document.csv").read_bytes() == (
            out / "loo" / "curve_document.csv"
        ).read_bytes()

    def test_page_vote_granularity_emits_both(self, tmp_path, synth_config_path):
        out = tmp_path / "w"
        out.mkdir()
        run(["synth", "--config", synth_config_path, "--out", out / "data"])
        run(["ingest", "--prix", out / "data" / "prix.tsv",
             "--manifest", out / "data" / "manifest.tsv", "--out", out / "c.json"])
        assert run([
            "loo", "--collection", out / "c.json", "--granularity", "page-vote",
            "--arch", "mlp0", "--n-grid", "8", "--epochs", "4", "--out", out / "loo",
        ]) == 0
        results = load_results(out / "loo" / "results.json")
        assert {r.granularity for r in results} == {"page", "page-voted"}
        assert (out / "loo" / "curve_page.csv").exists()
        assert (out / "loo" / "curve_page-voted.csv").exists()

    def test_strict_ingest_failure_is_reported(self, tmp_path, capsys):
        prix = tmp_path / "a.tsv"
        prix.write_text("p1\tword\t0.5\n")
        manifest = tmp_path / "m.tsv"
        manifest.write_text("d1\tA\tp1,p2\nd2\tB\tp1x\n")
        code = run(["ingest", "--prix", prix, "--manifest", manifest,
                    "--strict", "--out", tmp_path / "c.json"])
        assert code != 0
        err = capsys.readouterr().err
        assert "ingest" in err and "no index data" in err

    def test_missing_input_names_stage(self, tmp_path, capsys):
        code = run(["expectations", "--collection", tmp_path / "absent.json",
                    "--out", tmp_path / "t.json"])
        assert code != 0
        assert "expectations" in capsys.readouterr().err

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["--version"])
        assert exc.value.code == 0
        assert "prix-classify" in capsys.readouterr().out


class TestRunAll:
    def _config(self, tmp_path, **loo):
        payload = {
            "seed": 11,
            "synth": dict(SYNTH),
            "features": {"min_chars": 3, "min_doc_freq": 1.0},
            "loo": {
                "granularities": ["document"], "archs": ["mlp0"],
                "n_grid": "4,8", "epochs": 4, **loo,
            },
        }
        path = tmp_path / "runall.json"
        path.write_text(json.dumps(payload))
        return path

    def test_run_all_produces_results(self, tmp_path):
        config = self._config(tmp_path)
        out = tmp_path / "out"
        assert run(["run-all", "--config", config, "--out", out]) == 0
        results = load_results(out / "loo" / "results.json")
        assert len(results) == 2
        assert (out / "features.json").exists()
        assert (out / "run_manifest.json").exists()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["stage"] == "run-all" and manifest["seed"] == 11

    def test_failing_stage_named_on_stderr(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "prix": ["/nonexistent/*.tsv"],
                                    "manifest": "/nonexistent/m.tsv"}))
        code = run(["run-all", "--config", path, "--out", tmp_path / "out"])
        assert code != 0
        assert "ingest:" in capsys.readouterr().err

    def test_config_without_inputs_rejected(self, tmp_path, capsys):
        path = tmp_path / "empty.json"
        path.write_text(json.dumps({"seed": 1}))
        code = run(["run-all", "--config", path, "--out", tmp_path / "out"])
        assert code != 0
        assert "synth" in capsys.readouterr().err
