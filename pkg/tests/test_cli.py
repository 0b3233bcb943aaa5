import csv
import json
from pathlib import Path

import numpy as np
import pytest

from unitary_forge import network
from unitary_forge.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SYNTH_FAILED, build_parser, build_config, main
from unitary_forge.config import ConfigError, RunConfig, apply_override
from unitary_forge.gates import circuit_from_json, flat_unitary
from unitary_forge.linalg import haar_unitary, hs_distance, save_unitary

SMOKE = ["--set", "train.iterations=2", "--set", "train.episodes_per_iter=8",
         "--set", "train.updates_per_iter=2", "--set", "net.hidden=[16]", "--workers", "1"]


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out.strip().splitlines(), out.err


def toffoli():
    t = np.eye(8, dtype=complex)
    t[6:, 6:] = [[0, 1], [1, 0]]
    return t


@pytest.fixture
def weights_dir(tmp_path, trained_1q):
    """A run directory holding the shared trained net and its config."""
    net, _ = trained_1q
    d = tmp_path / "run"
    d.mkdir()
    cfg = RunConfig.from_dict({"net": {"hidden": list(net.spec.hidden)}, "train": {"depth_cap": 8}})
    cfg.save(d / "config.json")
    network.save(net, d / "weights.dvnu")
    return d


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()

    def test_minimal_config_is_valid(self):
        assert RunConfig.from_dict({}).to_dict() == RunConfig().to_dict()

    @pytest.mark.parametrize(
        "data,field",
        [({"train": {"foo": 1}}, "train.foo"), ({"bogus": 1}, "bogus"), ({"env": {"epsilon": 0.5}}, "env"),
         ({"seed": "x"}, "seed"), ({"kinds": ["Q"]}, "kinds"), ({"train": {"toggles": "2"}}, "train.toggles")],
    )
    def test_field_level_errors(self, data, field):
        with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
            RunConfig.from_dict(data)

    def test_override_parses_json(self):
        d = {}
        apply_override(d, "net.hidden", "[8, 4]")
        apply_override(d, "env.mode", "diagonalization")
        assert d == {"net": {"hidden": [8, 4]}, "env": {"mode": "diagonalization"}}


class TestPrecedence:
    """default < config file < flag < --set, checked field by field."""

    @pytest.fixture
    def cfg_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 5, "env": {"epsilon": 0.02}, "train": {"iterations": 9}}))
        return str(p)

    def cfg(self, argv):
        return build_config(build_parser().parse_args(["train", *argv]))

    @pytest.mark.parametrize(
        "argv,seed,eps,iters",
        [
            ([], 0, 1e-2, 150),
            (["--config", "{f}"], 5, 0.02, 9),
            (["--seed", "3"], 3, 1e-2, 150),
            (["--config", "{f}", "--seed", "3", "--epsilon", "0.03"], 3, 0.03, 9),
            (["--config", "{f}", "--set", "train.iterations=4"], 5, 0.02, 4),
            (["--config", "{f}", "--epsilon", "0.03", "--set", "env.epsilon=0.04"], 5, 0.04, 9),
        ],
    )
    def test_matrix(self, cfg_file, argv, seed, eps, iters):
        cfg = self.cfg([a.replace("{f}", cfg_file) for a in argv])
        assert (cfg.seed, cfg.env.epsilon, cfg.train.iterations) == (seed, eps, iters)

    def test_toggles_flag(self):
        assert self.cfg(["--toggles", "010"]).train.toggles.perturb is True
        assert self.cfg(["--toggles", "010"]).train.toggles.nerf is False


class TestTrain:
    def test_smoke_run(self, tmp_path, capsys):
        code, out, _ = run(["train", "--out", str(tmp_path), *SMOKE], capsys)
        assert code == EXIT_OK
        run_dir = Path(out[-1])
        for name in ("config.json", "manifest.json", "metrics.csv", "weights.dvnu"):
            assert (run_dir / name).is_file()
        assert (run_dir / "circuits").is_dir()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["status"] == "complete" and manifest["seed"] == 0
        assert "weights.dvnu" in manifest["files"]
        rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
        assert len(rows) == 2 * 10 and rows[-1]["iteration"] == "1"

    def test_diagonalization_mode(self, tmp_path, capsys):
        code, out, _ = run(["train", "--out", str(tmp_path), "--mode", "diagonalization", *SMOKE], capsys)
        assert code == EXIT_OK
        cfg = RunConfig.load(Path(out[-1]) / "config.json")
        assert cfg.env.mode == "diagonalization" and cfg.env.side_mode == "left_right"

    def test_resume_continues_without_duplicates(self, tmp_path, capsys):
        argv = ["train", "--out", str(tmp_path / "a"), *SMOKE, "--set", "train.iterations=4"]
        code, out, _ = run([*argv, "--stop-after", "2"], capsys)
        assert code == EXIT_OK
        partial = Path(out[-1])
        assert json.loads((partial / "manifest.json").read_text())["status"] == "partial"
        code, _, _ = run(["train", "--resume", str(partial)], capsys)
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(partial / "metrics.csv")))
        assert [int(r["iteration"]) for r in rows[::10]] == [0, 1, 2, 3]
        _, out, _ = run([*argv[:2], str(tmp_path / "b"), *argv[3:]], capsys)
        full = Path(out[-1])
        assert (full / "metrics.csv").read_bytes() == (partial / "metrics.csv").read_bytes()
        assert (full / "weights.dvnu").read_bytes() == (partial / "weights.dvnu").read_bytes()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        code, _, err = run(["train", "--out", str(tmp_path), "--set", "train.gamma=3"], capsys)
        assert code == EXIT_CONFIG and "train" in err

    def test_unreadable_config(self, tmp_path, capsys):
        code, _, _ = run(["train", "--config", str(tmp_path / "missing.json")], capsys)
        assert code == EXIT_CONFIG

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        code, _, _ = run(["train", "--out", str(blocker / "sub"), *SMOKE], capsys)
        assert code == EXIT_IO


class TestSynth:
    def test_identity(self, weights_dir, tmp_path, capsys):
        save_unitary(np.eye(2), tmp_path / "eye.json")
        code, out, _ = run(["synth", "--weights", str(weights_dir / "weights.dvnu"),
                            "--target", str(tmp_path / "eye.json")], capsys)
        assert code == EXIT_OK
        report = json.loads(out[-1])
        assert report["success"] and report["length"] == 0 and report["d_hs"] == 0.0
        assert (weights_dir / "circuits" / "eye.qasm").is_file()

    def test_solves_and_replays(self, weights_dir, tmp_path, capsys):
        from unitary_forge.gates import Circuit, make_gate, unitary_of

        u = unitary_of(Circuit(1, [make_gate(k, [0], 1) for k in ("H", "T", "H", "S")]))
        save_unitary(u, tmp_path / "w.json")
        code, out, _ = run(["synth", "--weights", str(weights_dir / "weights.dvnu"),
                            "--target", str(tmp_path / "w.json"), "--out", str(tmp_path / "c"), "--beam", "4"], capsys)
        assert code == EXIT_OK
        circ = circuit_from_json(json.loads((tmp_path / "c" / "w.json").read_text()))
        assert hs_distance(flat_unitary(circ), u) <= 2e-2
        report = json.loads((tmp_path / "c" / "w.report.json").read_text())
        assert set(report["gate_counts"]) >= {"total", "t_count", "clifford_count"}

    def test_failure_writes_report(self, weights_dir, tmp_path, capsys):
        save_unitary(haar_unitary(1, np.random.default_rng(0)), tmp_path / "haar.json")
        code, out, _ = run(["synth", "--weights", str(weights_dir / "weights.dvnu"),
                            "--target", str(tmp_path / "haar.json"), "--max-steps", "3"], capsys)
        assert code == EXIT_SYNTH_FAILED
        report = json.loads((weights_dir / "circuits" / "haar.report.json").read_text())
        assert not report["success"] and report["best_distance"] > 0

    def test_malformed_target(self, weights_dir, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"n_qubits": 1, "re": [[1, 0], [0, 1]]}))
        code, _, err = run(["synth", "--weights", str(weights_dir / "weights.dvnu"),
                            "--target", str(tmp_path / "bad.json")], capsys)
        assert code == EXIT_IO and "'im'" in err
        (tmp_path / "bad.json").write_text(json.dumps({"n_qubits": 1, "re": [[1, 0]], "im": [[0, 0]]}))
        code, _, err = run(["synth", "--weights", str(weights_dir / "weights.dvnu"),
                            "--target", str(tmp_path / "bad.json")], capsys)
        assert code == EXIT_IO and "'re'" in err

    def test_missing_weights(self, tmp_path, capsys):
        save_unitary(np.eye(2), tmp_path / "eye.json")
        code, _, _ = run(["synth", "--weights", str(tmp_path / "none.dvnu"), "--target",
                          str(tmp_path / "eye.json")], capsys)
        assert code == EXIT_IO

    def test_qubit_mismatch(self, weights_dir, tmp_path, capsys):
        save_unitary(np.eye(4), tmp_path / "eye2.json")
        code, _, _ = run(["synth", "--weights", str(weights_dir / "weights.dvnu"),
                          "--target", str(tmp_path / "eye2.json")], capsys)
        assert code == EXIT_CONFIG

    def test_toffoli_with_diagonalization_weights(self, tmp_path, capsys):
        code, out, _ = run(["train", "--out", str(tmp_path), "--mode", "diagonalization", "--qubits", "3",
                            "--epsilon", "1e-6", *SMOKE, "--set", "train.iterations=1"], capsys)
        assert code == EXIT_OK
        run_dir = Path(out[-1])
        save_unitary(toffoli(), tmp_path / "toffoli.json")
        # a beam wider than the action set keeps every one-gate prefix, so depth two is exhaustive
        code, out, _ = run(["synth", "--weights", str(run_dir / "weights.dvnu"),
                            "--target", str(tmp_path / "toffoli.json"), "--beam", "80", "--max-steps", "2"], capsys)
        assert code == EXIT_OK
        report = json.loads(out[-1])
        assert report["length"] == 2
        assert report["gate_counts"]["t_count"] == 7
        assert report["d_hs"] < 1e-6
        qasm = (run_dir / "circuits" / "toffoli.qasm").read_text()
        assert qasm.count("h q[2];") == 2


class TestOtherCommands:
    def test_eval_csv(self, weights_dir, tmp_path, capsys):
        code, out, _ = run(["eval", "--weights", str(weights_dir / "weights.dvnu"), "--depths", "1-2,4",
                            "--per-depth", "5", "--random-control", "--no-timing", "--out", str(tmp_path)], capsys)
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(Path(out[-1]) / "success.csv")))
        assert [r["depth_bucket"] for r in rows] == ["1", "2", "4", "1:random", "2:random", "4:random"]
        assert all(float(r["wilson_lo"]) <= float(r["rate"]) <= float(r["wilson_hi"]) for r in rows)
        assert {r["mean_ms"] for r in rows} == {"0"}

    def test_eval_bad_depths(self, weights_dir, capsys):
        code, _, _ = run(["eval", "--weights", str(weights_dir / "weights.dvnu"), "--depths", "0-2"], capsys)
        assert code == EXIT_CONFIG

    def test_oracle_golden_corpus(self, tmp_path, capsys):
        corpus = Path(__file__).parent / "data" / "golden_oracle_1q.json"
        golden = json.loads(corpus.read_text())
        sub = {"epsilon": golden["epsilon"], "targets": [t for t in golden["targets"] if t["min_depth"] <= 3]}
        (tmp_path / "c.json").write_text(json.dumps(sub))
        code, out, _ = run(["oracle", "--corpus", str(tmp_path / "c.json"), "--epsilon", str(golden["epsilon"]),
                            "--max-depth", "3", "--out", str(tmp_path)], capsys)
        assert code == EXIT_OK
        rows = {r["id"]: r for r in csv.DictReader(open(Path(out[-1]) / "oracle.csv"))}
        assert len(rows) == len(sub["targets"])
        for t in sub["targets"]:
            assert int(rows[t["id"]]["min_depth"]) == t["min_depth"]

    def test_oracle_needs_input(self, capsys):
        assert run(["oracle"], capsys)[0] == EXIT_CONFIG

    def test_ablate_corners(self, tmp_path, capsys):
        code, out, _ = run(["ablate", "--grid", "corners", "--seeds", "2", "--depths", "1-2", "--per-depth", "3",
                            "--out", str(tmp_path), *SMOKE], capsys)
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(Path(out[-1]) / "summary.csv")))
        assert len(rows) == 4
        assert {r["toggles"] for r in rows} == {"canonicalize=1;perturb=1;nerf=1", "canonicalize=0;perturb=0;nerf=0"}

    def test_phase_experiment(self, tmp_path, capsys):
        code, out, _ = run(["phase-experiment", "--epochs", "5", "--grid-points", "4", "--out", str(tmp_path)], capsys)
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(Path(out[-1]) / "phase.csv")))
        assert len(rows) == 8
