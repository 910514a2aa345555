import json

import numpy as np
import pytest

from mpgraph.cli import ingest, main

ONE_NODE_MODEL = """
x ~ GaussianMeanVariance(0.0, 1.0)
y ~ GaussianMeanPrecision(x, 1.0)
observe y :: ()
"""

RW_MODEL = """
x[0] ~ GaussianMeanVariance(0.0, 1e12)
d ~ GaussianMeanVariance(0.0, 1e12)
w ~ Gamma(1.0, 1e-12)
u ~ Gamma(1.0, 1e-12)
for t in 1:T {
  m[t] ~ Addition(x[t-1], d)
  x[t] ~ GaussianMeanPrecision(m[t], w)
  y[t] ~ GaussianMeanPrecision(x[t], u)
  observe y[t] :: ()
}
"""


@pytest.fixture
def rw_files(tmp_path):
    model = tmp_path / "rw.mp"
    model.write_text(RW_MODEL)
    rng = np.random.default_rng(0)
    x, rows = 0.0, []
    for _ in range(20):
        x += -0.1 + rng.normal(0, 0.1)
        rows.append(x + rng.normal(0, 0.3))
    data = tmp_path / "data.csv"
    data.write_text("y\n" + "\n".join(repr(v) for v in rows) + "\n")
    return model, data


class TestIngest:
    def test_csv_matrix(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y1,y2\n" + "\n".join(f"{i},{i+0.5}" for i in range(50)) + "\n")
        table = ingest(str(p))
        assert table["y"].shape == (50, 2)

    def test_json_scalar_series(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text(json.dumps({"y": list(np.linspace(0, 1, 48))}))
        table = ingest(str(p))
        assert table["y"].shape == (48,)

    def test_ragged_rows_report_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y1,y2\n1,2\n3\n")
        with pytest.raises(Exception, match="row 3"):
            ingest(str(p))

    def test_non_numeric_cell_reported(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y\n1.0\nbanana\n")
        with pytest.raises(Exception, match="row 3, column 1"):
            ingest(str(p))


class TestExitCodes:
    def test_unknown_subcommand_is_parse_error(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_model_syntax_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.mp"
        bad.write_text("x ~ ~\n")
        data = tmp_path / "d.csv"
        data.write_text("y\n1.0\n")
        assert main(["infer", str(bad), str(data)]) == 1

    def test_rule_unavailable_is_scheduling_error(self, tmp_path, capsys):
        model = tmp_path / "m.mp"
        # latent variance on a variance-parameterized node has no update rule
        model.write_text(
            "w ~ Gamma(1.0, 1.0)\nx ~ GaussianMeanVariance(0.0, w)\n"
            "y ~ GaussianMeanPrecision(x, 1.0)\nobserve y :: ()\n"
        )
        data = tmp_path / "d.csv"
        data.write_text("y\n1.0\n")
        assert main(["infer", str(model), str(data)]) == 2
        assert "no rule" in capsys.readouterr().err

    def test_numerical_failure(self, tmp_path, capsys):
        model = tmp_path / "m.mp"
        model.write_text(ONE_NODE_MODEL)
        data = tmp_path / "d.csv"
        data.write_text("y\nnan\n")
        assert main(["infer", str(model), str(data)]) == 3
        assert "not finite" in capsys.readouterr().err


class TestInfer:
    def test_one_node_conjugate_posterior(self, tmp_path):
        model = tmp_path / "m.mp"
        model.write_text(ONE_NODE_MODEL)
        data = tmp_path / "d.json"
        data.write_text(json.dumps({"y": [0.8]}))
        out = tmp_path / "out"
        assert main(["infer", str(model), str(data), "--iters", "1", "-o", str(out)]) == 0
        result = json.loads((out / "result.json").read_text())
        post = result["marginals"]["x"]
        # conjugate oracle: precisions 1 + 1, mean = y/2
        assert post["type"] == "GaussianCanonical"
        assert post["params"]["precision"][0][0] == pytest.approx(2.0, abs=1e-12)
        assert post["params"]["weighted_mean"][0] == pytest.approx(0.8, abs=1e-12)
        trace = (out / "free_energy.csv").read_text().splitlines()
        assert trace[0] == "iteration,free_energy_nats"
        assert len(trace) == 2

    def test_artifacts_are_reproducible(self, rw_files, tmp_path):
        model, data = rw_files
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            code = main(["infer", str(model), str(data), "--const", "T=20",
                         "--iters", "10", "--seed", "7", "-o", str(out)])
            assert code == 0
            outs.append((out / "result.json").read_bytes() + (out / "free_energy.csv").read_bytes())
        assert outs[0] == outs[1]


class TestCompileCommand:
    def test_writes_listings(self, rw_files, tmp_path):
        model, _ = rw_files
        out = tmp_path / "compiled"
        assert main(["compile", str(model), "--const", "T=4", "-o", str(out)]) == 0
        schedule = (out / "schedule.txt").read_text()
        algorithm = (out / "algorithm.txt").read_text()
        assert "schedule X:" in schedule and "q[x[1]] <- msg[" in schedule
        assert "step X:" in algorithm and "free_energy:" in algorithm

    def test_factorization_override(self, rw_files, tmp_path):
        model, data = rw_files
        spec = tmp_path / "rf.json"
        spec.write_text(json.dumps({"factors": [
            {"id": "X", "variables": [f"x[{t}]" for t in range(5)]},
            {"id": "P", "variables": ["d"]},
            {"id": "W", "variables": ["w"]},
            {"id": "U", "variables": ["u"]},
        ]}))
        out = tmp_path / "c2"
        assert main(["compile", str(model), "--const", "T=4",
                     "--factorization", str(spec), "-o", str(out)]) == 0
        assert "schedule P:" in (out / "schedule.txt").read_text()


class TestStreamCommand:
    def test_stream_writes_batches(self, rw_files, tmp_path):
        model, data = rw_files
        out = tmp_path / "stream"
        assert main(["stream", str(model), str(data), "--batch-size", "5",
                     "--iters", "5", "-o", str(out)]) == 0
        files = sorted(out.glob("batch_*.json"))
        assert len(files) == 4
        first = json.loads(files[0].read_text())
        assert "free_energy" in first and "marginals" in first


class TestSeedEnv:
    def test_env_seed_used_and_flag_overrides(self, tmp_path, monkeypatch):
        import numpy as np

        model = tmp_path / "m.mp"
        model.write_text(ONE_NODE_MODEL)
        data = tmp_path / "d.json"
        data.write_text(json.dumps({"y": [0.4]}))
        out1, out2, out3 = tmp_path / "o1", tmp_path / "o2", tmp_path / "o3"
        monkeypatch.setenv("MPGRAPH_SEED", "55")
        assert main(["infer", str(model), str(data), "--iters", "1", "-o", str(out1)]) == 0
        assert json.loads((out1 / "result.json").read_text())["seed"] == 55
        assert main(["infer", str(model), str(data), "--iters", "1",
                     "--seed", "7", "-o", str(out2)]) == 0
        assert json.loads((out2 / "result.json").read_text())["seed"] == 7


class TestDemo:
    def test_hmgm_demo_trace_non_increasing_and_converged(self, tmp_path):
        out = tmp_path / "demo"
        assert main(["demo", "hmgm", "--seed", "1", "-o", str(out)]) == 0
        lines = (out / "hmgm_free_energy.csv").read_text().splitlines()[1:]
        trace = [float(line.split(",")[1]) for line in lines]
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
        posterior = json.loads((out / "hmgm_posterior.json").read_text())
        assert posterior["converged"] is True
        assert set(posterior["marginals"]) >= {"T", "m1", "W1", "x[0]"}
