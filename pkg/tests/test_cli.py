"""End-to-end checks for the command-line front end."""
import json
import re

import numpy as np
import pytest

from pdslab.cli import (
    ConfigError,
    ExperimentConfig,
    emit_table,
    entrypoint,
    load_config,
)
from pdslab.data import read_jsonl
from pdslab.mdp import load_mdp
from pdslab.pipeline import CSV_HEADER


def _base_doc(tmp_path, **over):
    doc = {
        "schema_version": 1,
        "mdp": {"kind": "lowrank", "num_states": 4, "num_actions": 2, "dim": 2,
                "gamma": 0.9, "r_max": 1.0, "seed": 3},
        "data": {"n0": [40], "n1": [0, 30], "labeled_quality": "medium",
                 "unlabeled_quality": "expert", "noise": False},
        "methods": ["pds"],
        "seeds": [0],
        "output": str(tmp_path / "results.csv"),
    }
    doc.update(over)
    return doc


def _write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_unknown_fields_are_named(tmp_path):
    doc = _base_doc(tmp_path)
    doc["extra_knob"] = 1
    with pytest.raises(ConfigError, match="extra_knob"):
        ExperimentConfig.from_dict(doc)

    doc = _base_doc(tmp_path)
    doc["mdp"]["fanout"] = 2
    with pytest.raises(ConfigError, match="fanout"):
        ExperimentConfig.from_dict(doc)

    doc = _base_doc(tmp_path)
    doc["data"]["horizon"] = 5
    with pytest.raises(ConfigError, match="horizon"):
        ExperimentConfig.from_dict(doc)


def test_duplicate_seeds_rejected(tmp_path):
    doc = _base_doc(tmp_path, seeds=[1, 2, 1])
    with pytest.raises(ConfigError, match="distinct"):
        ExperimentConfig.from_dict(doc)


def test_n1_without_unlabeled_quality_rejected(tmp_path):
    doc = _base_doc(tmp_path)
    del doc["data"]["unlabeled_quality"]
    with pytest.raises(ConfigError, match="unlabeled_quality"):
        ExperimentConfig.from_dict(doc)
    # n1 all zero is fine without a preset
    doc["data"]["n1"] = [0]
    ExperimentConfig.from_dict(doc)


def test_unknown_method_and_kind_rejected(tmp_path):
    doc = _base_doc(tmp_path, methods=["pds", "psd"])
    with pytest.raises(ConfigError, match="psd"):
        ExperimentConfig.from_dict(doc)
    doc = _base_doc(tmp_path)
    doc["mdp"]["kind"] = "dense"
    with pytest.raises(ConfigError, match="dense"):
        ExperimentConfig.from_dict(doc)


def test_schema_version_checked(tmp_path):
    doc = _base_doc(tmp_path, schema_version=2)
    with pytest.raises(ConfigError, match="schema_version"):
        ExperimentConfig.from_dict(doc)


def test_round_trip_is_a_fixed_point(tmp_path):
    cfg = ExperimentConfig.from_dict(_base_doc(tmp_path, methods=["pds", "uds"]))
    doc2 = cfg.to_dict()
    cfg2 = ExperimentConfig.from_dict(doc2)
    assert cfg2 == cfg
    assert cfg2.to_dict() == doc2


def test_run_writes_csv_and_summary(tmp_path):
    path = _write_config(tmp_path, _base_doc(tmp_path))
    assert entrypoint(["run", "--config", path]) == 0

    csv_text = (tmp_path / "results.csv").read_text()
    lines = csv_text.strip().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 3  # header + two n1 cells
    md = (tmp_path / "results.md").read_text()
    assert "pds" in md

    # reruns overwrite deterministically (modulo the wall-clock column)
    assert entrypoint(["run", "--config", path]) == 0
    again = (tmp_path / "results.csv").read_text()
    strip = lambda text: [ln.rsplit(",", 1)[0] for ln in text.strip().splitlines()]
    assert strip(again) == strip(csv_text)


def test_run_bad_config_exits_2(tmp_path):
    doc = _base_doc(tmp_path)
    doc["mystery"] = True
    path = _write_config(tmp_path, doc)
    assert entrypoint(["run", "--config", path]) == 2
    assert entrypoint(["run", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert entrypoint(["run", "--config", str(bad)]) == 2


def test_run_cell_failures_exit_3(tmp_path):
    doc = _base_doc(tmp_path, reward={"alpha_mode": "bogus"})
    path = _write_config(tmp_path, doc)
    assert entrypoint(["run", "--config", path]) == 3


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        entrypoint(["frobnicate"])
    assert exc.value.code == 2


def _parse_markdown_cells(md):
    """{(method, column_value): mean} from a summary table."""
    lines = [ln for ln in md.strip().splitlines() if ln.startswith("|")]
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    cols = [int(c.split("=")[-1]) for c in header[1:]]
    out = {}
    for line in lines[2:]:
        cells = [c.strip() for c in line.strip("|").split("|")]
        method = cells[0].strip("* ")
        for col, cell in zip(cols, cells[1:]):
            m = re.match(r"\*?\*?([0-9.]+) ± ([0-9.]+)\*?\*?", cell)
            if m:
                out[(method, col)] = (float(m.group(1)), float(m.group(2)))
    return out


def test_table_means_match_csv_oracle(tmp_path):
    doc = _base_doc(tmp_path, methods=["pds", "uds", "no_share"], seeds=[0, 1])
    path = _write_config(tmp_path, doc)
    assert entrypoint(["run", "--config", path]) == 0

    csv_path = tmp_path / "results.csv"
    lines = csv_path.read_text().strip().splitlines()
    header = lines[0].split(",")
    i_m, i_n1, i_sub = header.index("method"), header.index("n1"), header.index("subopt_mean")
    groups = {}
    for line in lines[1:]:
        parts = line.split(",")
        groups.setdefault((parts[i_m], int(parts[i_n1])), []).append(float(parts[i_sub]))
    oracle = {key: float(np.mean(vals)) for key, vals in groups.items()}

    cells = _parse_markdown_cells(emit_table(csv_path))
    assert set(cells) == set(oracle)
    for key, (mean, _std) in cells.items():
        assert mean == pytest.approx(oracle[key], abs=5e-5)  # table rounds to 4 places


def test_emit_table_single_row(tmp_path):
    csv_path = tmp_path / "one.csv"
    csv_path.write_text(
        CSV_HEADER + "\n"
        + "pds,40,30,1.5,2.0,0.9,2,0,0.1234,0.2,3.0,1.000\n"
    )
    cells = _parse_markdown_cells(emit_table(csv_path))
    assert cells == {("pds", 30): (0.1234, 0.0)}


def test_emit_table_missing_columns_listed(tmp_path):
    csv_path = tmp_path / "short.csv"
    csv_path.write_text("method,n0,n1\npds,40,30\n")
    with pytest.raises(ConfigError) as exc:
        emit_table(csv_path)
    assert "subopt_mean" in str(exc.value) and "gamma" in str(exc.value)


def test_emit_table_group_by_validation(tmp_path):
    csv_path = tmp_path / "one.csv"
    csv_path.write_text(CSV_HEADER + "\npds,40,30,1.5,2.0,0.9,2,0,0.1,0.2,3.0,1.0\n")
    with pytest.raises(ConfigError, match="group_by"):
        emit_table(csv_path, group_by=("n1", "method"))
    with pytest.raises(ConfigError, match="bogus"):
        emit_table(csv_path, group_by=("method", "bogus"))
    emit_table(csv_path, group_by=("method", "n0"))  # other columns work


def test_gen_mdp_and_sample(tmp_path):
    mdp_path = str(tmp_path / "m.json")
    assert entrypoint(["gen-mdp", "--kind", "lowrank", "--states", "5",
                       "--actions", "3", "--dim", "2", "--seed", "7",
                       "--out", mdp_path]) == 0
    mdp = load_mdp(mdp_path)
    assert (mdp.num_states, mdp.num_actions, mdp.dim) == (5, 3, 2)

    data_path = str(tmp_path / "d.jsonl")
    assert entrypoint(["sample", "--mdp", mdp_path, "--n", "25",
                       "--quality", "random", "--seed", "1",
                       "--out", data_path]) == 0
    ds = read_jsonl(data_path)
    assert len(ds) == 25 and ds.labeled

    unl_path = str(tmp_path / "u.jsonl")
    assert entrypoint(["sample", "--mdp", mdp_path, "--n", "10", "--unlabeled",
                       "--quality", "random", "--seed", "2",
                       "--out", unl_path]) == 0
    for line in (tmp_path / "u.jsonl").read_text().strip().splitlines():
        assert json.loads(line)["r"] is None


def test_gen_mdp_kind_flag_mismatches_exit_2(tmp_path):
    out = str(tmp_path / "m.json")
    assert entrypoint(["gen-mdp", "--kind", "tabular", "--states", "4",
                       "--actions", "2", "--dim", "3", "--out", out]) == 2
    assert entrypoint(["gen-mdp", "--kind", "adversarial", "--states", "4",
                       "--actions", "2", "--dim", "3", "--out", out]) == 2
    assert entrypoint(["gen-mdp", "--kind", "lowrank", "--states", "4",
                       "--actions", "2", "--out", out]) == 2


def test_fit_ensemble_and_relabel(tmp_path, capsys):
    mdp_path = str(tmp_path / "m.json")
    entrypoint(["gen-mdp", "--kind", "lowrank", "--states", "5", "--actions", "3",
                "--dim", "2", "--seed", "7", "--out", mdp_path])
    lab_path = str(tmp_path / "lab.jsonl")
    entrypoint(["sample", "--mdp", mdp_path, "--n", "60", "--quality", "random",
                "--seed", "1", "--out", lab_path])
    model_path = str(tmp_path / "model.json")
    assert entrypoint(["fit-ensemble", "--in", lab_path, "--mdp", mdp_path,
                       "--L", "5", "--seed", "9", "--out", model_path]) == 0
    capsys.readouterr()

    unl_path = str(tmp_path / "u.jsonl")
    entrypoint(["sample", "--mdp", mdp_path, "--n", "12", "--unlabeled",
                "--quality", "random", "--seed", "2", "--out", unl_path])
    filled_path = str(tmp_path / "filled.jsonl")
    capsys.readouterr()
    assert entrypoint(["relabel", "--in", unl_path, "--out", filled_path,
                       "--model", model_path, "--k", "1.5"]) == 0
    summary = json.loads(capsys.readouterr().out.strip())
    assert summary["count"] == 12 and summary["relabeled"] == 12
    assert summary["k"] == 1.5
    for line in (tmp_path / "filled.jsonl").read_text().strip().splitlines():
        assert json.loads(line)["r"] is not None

    # declared ensemble size must match the stored model
    assert entrypoint(["relabel", "--in", unl_path, "--out", filled_path,
                       "--model", model_path, "--L", "7"]) == 2
    assert entrypoint(["relabel", "--in", unl_path, "--out", filled_path,
                       "--model", model_path, "--k", "fast"]) == 2


def test_bounds_subcommand(tmp_path, capsys):
    assert entrypoint(["bounds", "--d", "4", "--n0", "1000", "--n1", "0,10000",
                       "--c0", "0.5", "--c1", "0.5", "--format", "csv"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].startswith("n0,n1,offline_term")
    assert len(out) == 3
    first = dict(zip(out[0].split(","), out[1].split(",")))
    assert first["sbr_exact"] == "1"  # nothing shared, ratio is one by definition

    assert entrypoint(["bounds", "--d", "4", "--n0", "100", "--c0", "0.0"]) == 0
    md = capsys.readouterr().out
    assert "inf" in md


def test_table_subcommand(tmp_path, capsys):
    path = _write_config(tmp_path, _base_doc(tmp_path))
    entrypoint(["run", "--config", path])
    capsys.readouterr()
    assert entrypoint(["table", "--csv", str(tmp_path / "results.csv")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("|") and "pds" in out
    assert entrypoint(["table", "--csv", str(tmp_path / "results.csv"),
                       "--group-by", "method,bogus"]) == 2


def test_load_config_round_trips_from_disk(tmp_path):
    path = _write_config(tmp_path, _base_doc(tmp_path))
    cfg = load_config(path)
    assert cfg.n0_values == (40,) and cfg.n1_values == (0, 30)
    assert cfg.methods == ("pds",)
