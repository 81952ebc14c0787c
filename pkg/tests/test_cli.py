import csv
import json

import numpy as np
import pytest

from msgmimc.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main

BENCH = """
[bench]
top = 3, 3
etas = 0.25, 0.0625
thetas_deg = 0
samples = 5
cycles = 8
strategies = W(2,2); V(1,1)
"""

ESTIMATE = """
[grid]
base_Q1 = 2, 2
max_level = 9
[run]
qoi = Q1
eps = 2e-2
n_min = 16
refit_every = 8
"""

RATES = """
[grid]
base_Q1 = 2, 2
base_Q2 = 2, 2
[rates]
box = 2, 2
samples = 6
"""


def write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, command, text, out, *extra):
    return main([command, "--config", write(tmp_path, text), "--out", str(tmp_path / out), *extra])


# ---------------------------------------------------------------- configuration errors


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\na = 1\n",
        "[run]\ncolour = blue\n",
        "[run]\nqoi = Q7\n",
        "[run]\neps = -1\n",
        "[solver]\nmu = 3\n",
        "[bench]\nstrategies = X(1,1)\n",
        "[run]\nqoi = Q2\n[grid]\nbase_Q2 = 1, 1\n",
    ],
)
def test_invalid_config_exit_code(tmp_path, text, capsys):
    assert run(tmp_path, "estimate", text, "o") == EXIT_CONFIG
    assert "invalid configuration" in capsys.readouterr().err


def test_missing_file_and_bad_flags(tmp_path):
    assert main(["rates", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == EXIT_CONFIG
    assert main(["estimate", "--qoi", "Q9", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


# ---------------------------------------------------------------- solve-bench


def test_solve_bench_outputs(tmp_path):
    assert run(tmp_path, "solve-bench", BENCH, "b") == EXIT_OK
    out = tmp_path / "b"
    resolved = (out / "config.resolved.ini").read_text()
    assert "top = 3, 3" in resolved and "[solver]" in resolved
    long = read_csv(out / "residuals.csv")
    summary = read_csv(out / "summary.csv")
    factors = read_csv(out / "factors.csv")
    assert {r["solver"] for r in long} == {"MG", "MSG"}
    assert {r["cycle"] for r in long} == {"W(2,2)", "V(1,1)"}
    assert len(factors) == 2 * 2 * 2 * 5
    # quantile rows recomputed from the long table
    for row in summary[:: max(1, len(summary) // 25)]:
        key = (row["solver"], row["eta"], row["theta"], row["cycle"])
        k = int(row["cycle_index"])
        hists = {}
        for r in long:
            if (r["solver"], r["eta"], r["theta"], r["cycle"]) == key:
                hists.setdefault(r["sample"], []).append(float(r["resnorm"]))
        vals = [h[min(k, len(h) - 1)] for h in hists.values()]
        want = np.quantile(vals, [0.2, 0.4, 0.6, 0.8])
        got = [float(row[c]) for c in ("q20", "q40", "q60", "q80")]
        assert np.allclose(got, want, rtol=1e-15, atol=0)


def test_solve_bench_thread_determinism(tmp_path):
    assert run(tmp_path, "solve-bench", BENCH, "t1", "--threads", "1") == EXIT_OK
    assert run(tmp_path, "solve-bench", BENCH, "t3", "--threads", "3") == EXIT_OK
    for name in ("residuals.csv", "summary.csv", "factors.csv"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t3" / name).read_bytes()


# ---------------------------------------------------------------- rates


def test_rates_outputs_and_determinism(tmp_path):
    assert run(tmp_path, "rates", RATES, "r1", "--qoi", "Q1,Q2") == EXIT_OK
    assert run(tmp_path, "rates", RATES, "r2", "--qoi", "Q1,Q2", "--threads", "2") == EXIT_OK
    js = json.loads((tmp_path / "r1" / "rates.json").read_text())
    assert js["schema_version"] == 1 and set(js["qois"]) == {"Q1", "Q2"}
    gamma = js["qois"]["Q1"]["rates"]["gamma"]
    assert np.allclose(gamma, [1, 1], atol=1e-10)
    for name in ("rates.json", "rates.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


# ---------------------------------------------------------------- estimate and cost-theorem


def test_estimate_outputs_and_determinism(tmp_path):
    assert run(tmp_path, "estimate", ESTIMATE, "e1", "--seed", "1", "2") == EXIT_OK
    assert run(tmp_path, "estimate", ESTIMATE, "e4", "--seed", "1", "2", "--threads", "4") == EXIT_OK
    rows = read_csv(tmp_path / "e1" / "runs.csv")
    assert [r["seed"] for r in rows] == ["1", "2"]
    for r in rows:
        assert r["status"] == "converged"
        assert float(r["sqrtV"]) <= 2e-2
        assert float(r["cost_non_recycled"]) >= float(r["cost_recycled"])
        assert float(r["ratio"]) == pytest.approx(float(r["cost_non_recycled"]) / float(r["cost_recycled"]))
    dump = json.loads((tmp_path / "e1" / "estimate_Q1_eps0.02_seed1.json").read_text())
    assert dump["schema_version"] == 1 and dump["N"] == int(rows[0]["N"])
    for name in ("runs.csv", "occupancy.csv", "estimate_Q1_eps0.02_seed1.json", "estimate_Q1_eps0.02_seed2.json"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e4" / name).read_bytes()
    assert read_csv(tmp_path / "e1" / "timing.csv")[0]["wall_seconds"]


def test_estimate_budget_exit_code(tmp_path):
    text = ESTIMATE + "max_samples = 20\n"
    assert run(tmp_path, "estimate", text, "e", "--eps", "1e-6") == EXIT_BUDGET
    row = read_csv(tmp_path / "e" / "runs.csv")[0]
    assert row["status"] == "budget" and row["N"] == "20"


def test_estimate_solver_failure_exit_code(tmp_path, capsys):
    text = ESTIMATE + "[solver]\nnu0_max = 1\neps_solver = 1e-14\n"
    assert run(tmp_path, "estimate", text, "e") == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_cost_theorem(tmp_path):
    assert run(tmp_path, "cost-theorem", "", "c") == EXIT_OK
    row = read_csv(tmp_path / "c" / "theorem.csv")[0]
    assert float(row["predicted"]) == pytest.approx((1 - 2**-2.5) ** 2, rel=1e-12)
    assert run(tmp_path, "cost-theorem", "[theorem]\nbeta = 3\ngamma = 1\n", "c1") == EXIT_OK
    row = read_csv(tmp_path / "c1" / "theorem.csv")[0]
    assert float(row["predicted"]) == pytest.approx(1 - 2**-2.0, rel=1e-12)
    assert run(tmp_path, "cost-theorem", "[theorem]\nbeta = 3, 4\ngamma = 1\n", "c2") == EXIT_CONFIG


def test_cost_theorem_reads_estimates(tmp_path):
    assert run(tmp_path, "estimate", ESTIMATE, "e", "--seed", "3") == EXIT_OK
    text = f"[theorem]\nestimate_dir = {tmp_path / 'e'}\n"
    assert run(tmp_path, "cost-theorem", text, "c") == EXIT_OK
    rows = read_csv(tmp_path / "c" / "theorem.csv")
    assert len(rows) == 2 and rows[1]["qoi"] == "Q1"
    dump = json.loads((tmp_path / "e" / "estimate_Q1_eps0.02_seed3.json").read_text())
    measured = dump["cost"]["recycled"] / dump["cost"]["non_recycled"]
    assert float(rows[1]["measured"]) == pytest.approx(measured, rel=1e-15)
    assert run(tmp_path, "cost-theorem", f"[theorem]\nestimate_dir = {tmp_path / 'empty'}\n", "c3") == EXIT_CONFIG
