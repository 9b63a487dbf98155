import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from popsim import io
from popsim.calibration import TargetTable
from popsim.cli import main
from popsim.config import ConfigError, load_config
from popsim.domain import State
from popsim.engine import RunPlan, run
from popsim.health.calibration import MortalityOutput, default_targets
from popsim.health.model import default_theta, health_domain, health_simulator
from popsim.health.population import InitConfig, init_population

ROOT = Path(__file__).resolve().parents[1]

SMALL = {
    "seed": 3,
    "init": {"size": 400},
    "run": {"horizon": 20, "snapshot": 10},
    "interventions": {"horizon": 30, "replications": 2},
    "sampling": {"invitees": 60, "horizon": 60},
    "calibration": {"horizon": 30, "max_evals": 8},
    "outputs": {"dir": "out"},
}


def write_config(tmp_path, **changes):
    cfg = json.loads(json.dumps(SMALL))
    for section, value in changes.items():
        if isinstance(value, dict):
            cfg.setdefault(section, {}).update(value)
        else:
            cfg[section] = value
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def files(out: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_shipped_configs_validate():
    for path in [ROOT / "configs" / "desk_scale.yaml", ROOT / "configs" / "quick.yaml",
                 ROOT / "src" / "popsim" / "data" / "desk_scale.yaml"]:
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path, run={"horizn": 3})
    with pytest.raises(ConfigError, match="horizn"):
        load_config(path)
    assert main(["run", str(path)]) == 1


def test_missing_config_exit_code(tmp_path):
    assert main(["run", str(tmp_path / "nope.yaml")]) == 1


def test_bad_flag_exit_code(tmp_path):
    assert main(["run", str(write_config(tmp_path)), "--threads", "0"]) == 1
    assert main(["run"]) == 1


def test_runtime_error_exit_code(tmp_path):
    path = write_config(tmp_path, parameters={"overrides": {"weibull_shape": -1.0}})
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2


def test_run_twice_is_byte_identical(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(path), "--out", str(tmp_path / "b")]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b and {"population.csv", "population.psim", "trackers.csv", "snapshot_000000.csv"} <= set(a)


def test_threads_do_not_change_results(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path), "--threads", "1", "--out", str(tmp_path / "one")]) == 0
    assert main(["run", str(path), "--threads", "8", "--out", str(tmp_path / "eight")]) == 0
    assert files(tmp_path / "one") == files(tmp_path / "eight")


def test_horizon_zero_writes_initial_population(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path), "--horizon", "0", "--out", str(tmp_path / "o")]) == 0
    pop = io.read_population_csv(tmp_path / "o" / "population.csv", health_domain())
    assert pop.identical(init_population(InitConfig(n=400), default_theta(), 3))


def test_manifest_and_replay(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["run", str(path), "--seed", "11", "--horizon", "5", "--out", str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 11 and manifest["settings"]["horizon"] == 5
    assert len(manifest["config_sha256"]) == 64 and "numpy" in manifest["versions"]
    replay = ["run", str(path), "--replay", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]
    assert main(replay) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    # an edited config still replays, with a warning
    path.write_text(path.read_text() + "\n# edited\n")
    assert main(replay[:-1] + [str(tmp_path / "c")]) == 0
    assert "warning" in capsys.readouterr().err.lower()
    assert files(tmp_path / "a") == files(tmp_path / "c")


def test_compare_duplicate_and_null_scenarios(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "o"
    assert main(["compare", str(path), "--scenarios", "baseline,baseline,industry", "--replications", "1",
                 "--out", str(out)]) == 0
    with open(out / "compare_counts.csv") as fh:
        header, values = [line.strip().split(",") for line in fh]
    assert header[2:] == ["baseline", "baseline", "industry"]
    assert values[2] == values[3]
    summary = read_csv(out / "compare_summary.csv")
    assert [r["scenario"] for r in summary] == ["baseline", "baseline", "industry"]


def test_compare_unknown_scenario(tmp_path):
    assert main(["compare", str(write_config(tmp_path)), "--scenarios", "baseline,tax"]) == 1


def test_sample_outputs(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "o"
    assert main(["sample", str(path), "--out", str(out)]) == 0
    design = read_csv(out / "design.csv")
    assert len(design) == 60
    sample = io.read_sample_csv(out / "sample.csv", out / "design.csv")
    assert sample.n == 60 and "stroke_end" in sample.columns
    for k in sample.columns:
        assert np.array_equal(sample.mask[k], ~sample.participated)
    groups = [r["group"] for r in read_csv(out / "incidence.csv")]
    assert groups == ["population", "participants", "invitees"]


def test_zero_invite_design(tmp_path):
    path = write_config(tmp_path, sampling={"invitees": 0})
    out = tmp_path / "o"
    assert main(["sample", str(path), "--out", str(out)]) == 0
    assert len((out / "sample.csv").read_text().splitlines()) == 1
    assert len(read_csv(out / "design.csv")) == 0


def test_no_missingness_sample_equals_population_subset(tmp_path):
    path = write_config(tmp_path, sampling={"nonparticipation": "none", "invitees": 50})
    out = tmp_path / "o"
    assert main(["sample", str(path), "--out", str(out)]) == 0
    sample = io.read_sample_csv(out / "sample.csv")
    pop = init_population(InitConfig(n=400), default_theta(), 3)
    idx = sample.ids.astype(int)
    assert not any(m.any() for m in sample.mask.values())
    for k in ("age", "sbp", "smoking", "sex"):
        assert np.array_equal(sample.values[k], pop[k][idx])


def test_calibrate_writes_trace(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "o"
    assert main(["calibrate", str(path), "--out", str(out)]) == 0
    trace = read_csv(out / "trace.csv")
    assert len(trace) == 8
    best = [float(r["best_f"]) for r in trace]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    fit = read_csv(out / "fit.csv")[0]
    assert float(fit["objective"]) == min(float(r["f"]) for r in trace)


def test_calibrate_self_target_gives_zero(tmp_path):
    theta = default_theta()
    start = State(init_population(InitConfig(n=400), theta, 3), theta)
    base = default_targets()
    output = MortalityOutput.for_state(start, base, 30)
    yhat = output(run(health_simulator(3), start, RunPlan(30)))
    TargetTable(base.keys, yhat[:-1], base.weights, {k: (yhat[-1], w) for k, (_, w) in base.scalars.items()}
                ).to_csv(tmp_path / "self.csv")
    path = write_config(tmp_path, calibration={"max_evals": 1})
    assert main(["calibrate", str(path), "--target", str(tmp_path / "self.csv"), "--out", str(tmp_path / "o")]) == 0
    assert float(read_csv(tmp_path / "o" / "fit.csv")[0]["objective"]) == 0.0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "popsim.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "calibrate" in proc.stdout
