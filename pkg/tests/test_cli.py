"""CLI surface: exit codes, printed config, and command behavior."""

import json

import pytest

from milsurv.cli import dispatch
from milsurv.features import peek_header, read_features


def run(capsys, *argv):
    code = dispatch(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParamcount:
    def test_transmil_1024(self, capsys):
        code, out, _ = run(capsys, "paramcount", "--head", "transmil", "--dim", "1024")
        assert code == 0
        assert out.strip().splitlines()[-1] == "2673172"

    def test_prints_resolved_config(self, capsys):
        _, out, _ = run(capsys, "paramcount", "--head", "mean", "--dim", "768")
        config = json.loads(out.splitlines()[0])
        assert config["command"] == "paramcount"
        assert config["dim"] == 768

    def test_unknown_head_rejected(self, capsys):
        with pytest.raises(SystemExit):
            dispatch(["paramcount", "--head", "gated", "--dim", "64"])


class TestSynth:
    def test_deterministic_output_trees(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for out_dir in (a, b):
            code, _, _ = run(capsys, "synth", "--n", "100", "--censor", "0.45",
                             "--seed", "7", "--out", str(out_dir))
            assert code == 0
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        a_files = sorted((a / "features").iterdir())
        b_files = sorted((b / "features").iterdir())
        assert [f.name for f in a_files] == [f.name for f in b_files]
        for fa, fb in zip(a_files, b_files):
            assert fa.read_bytes() == fb.read_bytes()

    def test_validation_error_exit_code(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--n", "5", "--out", str(tmp_path))
        assert code == 1
        assert json.loads(err)["error"] == "ConfigurationError"


class TestConcatCommand:
    def test_ensemble_header_dim(self, tmp_path, capsys):
        import numpy as np

        from milsurv.features import FeatureMatrix, write_features
        from milsurv.rng import Rng

        rng = Rng(0)
        coords = rng.integers(0, 4096, (6, 2)).astype(np.int32)
        for ext, d in (("uni", 1024), ("hibou-base", 768)):
            (tmp_path / ext).mkdir()
            for stem in ("s1", "s2"):
                fm = FeatureMatrix(ext, rng.normal(shape=(6, d)).astype(np.float32),
                                   coords.copy())
                write_features(fm, tmp_path / ext / f"{stem}.milf")
        out_dir = tmp_path / "ens"
        code, _, _ = run(capsys, "concat", "--parts", "uni,hibou-base",
                         "--in", str(tmp_path), "--out", str(out_dir))
        assert code == 0
        for stem in ("s1", "s2"):
            ext_id, m, d = peek_header(out_dir / f"{stem}.milf")
            assert (ext_id, m, d) == ("uni+hibou-base", 6, 1792)
            read_features(out_dir / f"{stem}.milf")  # checksum holds

    def test_missing_directory(self, tmp_path, capsys):
        code, _, err = run(capsys, "concat", "--parts", "uni",
                           "--in", str(tmp_path), "--out", str(tmp_path / "o"))
        assert code == 1
        assert "error" in json.loads(err)


class TestIngestSplitTrainEval:
    @pytest.fixture()
    def cohort_dir(self, tmp_path):
        from milsurv.cohort import synth_cohort
        from milsurv.rng import Rng

        synth_cohort(24, 4, 0.3, 1.0, Rng(3), tmp_path / "cohort")
        return tmp_path / "cohort"

    def test_ingest(self, cohort_dir, capsys):
        code, out, _ = run(capsys, "ingest", "--manifest", str(cohort_dir / "manifest.csv"),
                           "--features", str(cohort_dir))
        assert code == 0
        assert "accepted 24 cases" in out

    def test_split_then_train_then_eval(self, cohort_dir, tmp_path, capsys):
        split_path = tmp_path / "split.csv"
        code, out, _ = run(capsys, "split", "--manifest", str(cohort_dir / "manifest.csv"),
                           "--features", str(cohort_dir), "--folds", "3",
                           "--seed", "5", "--out", str(split_path))
        assert code == 0
        assert split_path.exists()

        run_dir = tmp_path / "run"
        code, out, _ = run(capsys, "train", "--manifest", str(cohort_dir / "manifest.csv"),
                           "--features", str(cohort_dir), "--extractors", "synthetic",
                           "--head", "mean", "--folds", "2", "--epochs", "2",
                           "--earliest-stop", "2", "--seed", "1", "--out", str(run_dir))
        assert code == 0
        assert (run_dir / "report.csv").exists()
        ckpts = sorted((run_dir / "checkpoints").glob("*.milc"))
        assert ckpts

        code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpts[0]),
                           "--manifest", str(cohort_dir / "manifest.csv"),
                           "--features", str(cohort_dir), "--extractors", "synthetic")
        assert code == 0
        assert "c-index over 24 cases" in out

    def test_report_rerender(self, cohort_dir, tmp_path, capsys):
        run_dir = tmp_path / "run"
        run(capsys, "train", "--manifest", str(cohort_dir / "manifest.csv"),
            "--features", str(cohort_dir), "--extractors", "synthetic",
            "--head", "mean", "--folds", "2", "--epochs", "2",
            "--earliest-stop", "2", "--seed", "1", "--out", str(run_dir))
        out_md = tmp_path / "again.md"
        code, _, _ = run(capsys, "report", "--in", str(run_dir / "report.csv"),
                         "--format", "markdown", "--out", str(out_md))
        assert code == 0
        assert "MIL Method" in out_md.read_text()


class TestGradcheckCommand:
    def test_passes_and_prints_per_op_lines(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0
        assert "linear" in out
        assert "head:transmil" in out

    def test_nonzero_exit_on_impossible_tolerance(self, capsys):
        code, _, _ = run(capsys, "gradcheck", "--tol-primitives", "1e-18")
        assert code == 2
