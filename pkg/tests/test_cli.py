import csv
import io

import pytest

from stlsgd.cli import (ConfigError, build_config, expand_grid, load_configs, main, parse_config_text,
                        run_experiment, sweep)

QUAD = """\
run.algorithm = sync
run.seed = 3
run.return_mode = last
objective.kind = quadratic
objective.dim = 4
objective.sigma2 = 0.0
objective.x0 = 2.0
data.clients = 3
schedule.eta1 = 0.5
schedule.T = 40
schedule.alpha = 0
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_and_build():
    cfg = build_config(parse_config_text(QUAD + "# comment\n\n"))
    assert cfg.algorithm == "sync" and cfg.seed == 3 and cfg.clients == 3
    assert cfg.target_gap == 1e-4


@pytest.mark.parametrize("text,msg", [
    ("run.algoritm = sync\n", "unknown key"),
    ("run.seed = 1\nrun.seed = 2\n", "duplicate"),
    ("just words\n", "expected"),
])
def test_parse_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


def test_validation_messages():
    raw = parse_config_text(QUAD.replace("schedule.alpha = 0\n", ""))
    with pytest.raises(ConfigError, match="schedule.alpha"):
        build_config(raw)
    raw = parse_config_text(QUAD.replace("run.algorithm = sync", "run.algorithm = stl-nc-2")
                             + "schedule.T1 = 10\nschedule.S = 2\n")
    with pytest.raises(ConfigError, match="objective.kind = pl"):
        build_config(raw)
    with pytest.raises(ConfigError, match="cannot parse"):
        build_config(parse_config_text(QUAD.replace("run.seed = 3", "run.seed = x")))


def test_sync_noiseless_gap_decreases():
    cfg = build_config(parse_config_text(QUAD.replace("schedule.T = 40", "schedule.T = 10")))
    trace, summary = run_experiment(cfg)
    gaps = trace.column("gap")
    assert len(gaps) == 11
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert summary.final_gap < gaps[0]
    assert summary.comm_rounds_total == 10
    assert summary.comm_rounds_to_target <= summary.comm_rounds_total


def test_grid_expansion():
    raw = parse_config_text(QUAD.replace("schedule.eta1 = 0.5", "schedule.eta1 = 0.1 | 0.5"))
    grid = expand_grid(raw)
    assert [r["run.name"] for r in grid] == ["run[eta1=0.1]", "run[eta1=0.5]"]
    assert len(expand_grid(parse_config_text(QUAD))) == 1


def test_outputs_byte_identical(tmp_path):
    cfg = write(tmp_path, "q.cfg", QUAD.replace("objective.sigma2 = 0.0", "objective.sigma2 = 1.0"))
    assert main(["--config", str(cfg), "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert main(["--config", str(cfg), "--out", str(tmp_path / "b"), "--quiet"]) == 0
    for name in ("q.trace.csv", "q.plan.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "q.trace.csv").read_text().splitlines()[0]
    assert header == "t,comm_rounds,gap,grad_norm_sq,divergence,eta,k,stage"
    rows = list(csv.DictReader(io.StringIO((tmp_path / "a" / "summary.csv").read_text())))
    assert rows[0]["algorithm"] == "sync" and rows[0]["comm_rounds_total"] == "40"


def test_seed_override_changes_output(tmp_path):
    cfg = write(tmp_path, "q.cfg", QUAD.replace("objective.sigma2 = 0.0", "objective.sigma2 = 1.0"))
    main(["--config", str(cfg), "--out", str(tmp_path / "a"), "--quiet"])
    main(["--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "9", "--quiet"])
    assert (tmp_path / "a" / "q.trace.csv").read_bytes() != (tmp_path / "b" / "q.trace.csv").read_bytes()


def test_exit_codes(tmp_path):
    bad = write(tmp_path, "bad.cfg", "run.bogus = 1\n")
    assert main(["--config", str(bad), "--out", str(tmp_path), "--quiet"]) == 2
    missing = write(tmp_path, "m.cfg", QUAD.replace("objective.kind = quadratic",
                                                     "objective.kind = logistic\nobjective.path = /nope.svm"))
    assert main(["--config", str(missing), "--out", str(tmp_path), "--quiet"]) == 2
    assert main(["--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path), "--quiet"]) == 2
    boom = write(tmp_path, "boom.cfg", QUAD.replace("schedule.eta1 = 0.5", "schedule.eta1 = 1e300"))
    assert main(["--config", str(boom), "--out", str(tmp_path), "--quiet"]) == 3


def test_sweep_continues_after_failure(tmp_path):
    good = load_configs(write(tmp_path, "good.cfg", QUAD))
    boom = load_configs(write(tmp_path, "boom.cfg", QUAD.replace("schedule.eta1 = 0.5", "schedule.eta1 = 1e300")))
    summaries, failures = sweep(good + boom, tmp_path / "out")
    assert [s.name for s in summaries] == ["good"]
    assert failures[0][0] == "boom" and failures[0][2] == 3
    assert (tmp_path / "out" / "summary.csv").read_text().count("\n") == 2


def test_empty_sweep_is_an_error(tmp_path):
    with pytest.raises(ConfigError):
        sweep([], tmp_path)


def test_logistic_synthetic_and_stl(tmp_path):
    text = """\
run.algorithm = stl-sc | local
run.return_mode = last
objective.kind = logistic
objective.path = synthetic
data.clients = 4
data.iid_fraction = 50
schedule.eta1 = 0.5
schedule.T1 = 20
schedule.k1 = 4
schedule.S = 3
schedule.T = 140
schedule.k = 10
schedule.alpha = 0.01
"""
    summaries, failures = sweep(load_configs(write(tmp_path, "g.cfg", text)), tmp_path / "o")
    assert not failures
    by = {s.algorithm: s for s in summaries}
    assert by["stl-sc"].comm_rounds_total == 5 + 8 + 10
    assert by["local"].comm_rounds_total == 14
    assert all(s.final_gap > 0 for s in summaries)
