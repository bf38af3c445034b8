import copy
import json
from importlib import resources
from pathlib import Path

import pytest

from conftest import minimal_scenario_dict, scenario, scenario_text
from sfcsim import cli
from sfcsim.errors import ParseError, PresetPreconditionFailed, SchemaError, Unrecoverable
from sfcsim.experiments import ReportBundle, compare, compare_runs, run_experiment
from sfcsim.scenario import build_chain, emits, load, loads, parse_app

PRESET_DIR = Path(str(resources.files("sfcsim") / "presets"))
PRESET_FILES = sorted(PRESET_DIR.glob("*.yaml"))


# -- loading ---------------------------------------------------------------


def test_minimal_scenario_defaults(minimal):
    scn = scenario(minimal)
    assert scn.management["control_rtt"] == 0.01
    assert scn.management["scaling"]["hysteresis"] == 3
    flow = scn.traffic[0]
    assert flow["process"] == "constant" and flow["reliability"] == "none"
    assert scn.topology["links"][0]["loss"] == 0.0
    assert scn.chains[0]["transport"] == "datagram"


def test_flow_without_stop_or_count_runs_for_duration(minimal):
    del minimal["traffic"][0]["stop"]
    assert scenario(minimal).traffic[0]["stop"] == minimal["duration"]


def test_yaml_syntax_error_has_line():
    with pytest.raises(ParseError) as err:
        loads("name: x\ntopology: [unclosed\n")
    assert err.value.line is not None


def test_schema_error_names_field_and_line(minimal):
    minimal["topology"]["links"][0]["delay"] = -1
    with pytest.raises(SchemaError) as err:
        loads(scenario_text(minimal))
    assert err.value.field == "topology.links[0].delay"
    text = scenario_text(minimal)
    expected = next(i for i, l in enumerate(text.splitlines(), 1) if "delay: -1" in l)
    assert err.value.line == expected


def test_missing_required_section(minimal):
    del minimal["topology"]
    with pytest.raises(SchemaError):
        scenario(minimal)


@pytest.mark.parametrize("mutate,message", [
    (lambda d: d["topology"]["links"][0].update(b=9), "unknown"),
    (lambda d: d["topology"]["pops"].append({"id": 0}), "duplicate POP"),
    (lambda d: d["traffic"][0].update(app="9:9"), "9:9"),
    (lambda d: d["traffic"][0].update(source=2), "source"),
    (lambda d: d["chains"][0]["vlinks"].append({"src": "fw", "dst": "nat", "bandwidth": 1}),
     "nat"),
    (lambda d: d.setdefault("faults", {}).update(failures=[{"target": "pop:7", "at": 0.1}]),
     "unknown pop 7"),
])
def test_reference_errors(minimal, mutate, message):
    mutate(minimal)
    with pytest.raises(SchemaError, match=message):
        scenario(minimal)


def test_emit_load_round_trip(minimal):
    scn = scenario(minimal)
    again = loads(emits(scn))
    assert again.to_dict() == scn.to_dict()


@pytest.mark.parametrize("path", PRESET_FILES, ids=lambda p: p.stem)
def test_presets_validate_and_round_trip(path):
    scn = load(path)
    assert loads(emits(scn)).to_dict() == scn.to_dict()


def test_build_chain_and_app_parsing(minimal):
    scn = scenario(minimal)
    spec = build_chain(scn.chains[0], "baseline")
    assert spec.app == parse_app("1:1") and spec.transport == "baseline"
    spec.validate()
    with pytest.raises(ValueError):
        parse_app("nope")


def test_unreadable_file(tmp_path):
    with pytest.raises(ParseError):
        load(tmp_path / "missing.yaml")


# -- experiments -------------------------------------------------------------


def test_run_experiment_is_deterministic(minimal):
    a = run_experiment(scenario(minimal)).files()
    b = run_experiment(scenario(minimal)).files()
    assert a == b
    c = run_experiment(scenario(minimal), seed=99).data
    assert c["seed"] == 99


def test_bundle_write_and_read(minimal, tmp_path):
    bundle = run_experiment(scenario(minimal))
    names = sorted(p.name for p in bundle.write(tmp_path))
    assert names == ["failover.csv", "flows.csv", "monitor.csv", "recoveries.csv",
                     "report.json", "scaling.csv"]
    back = ReportBundle.read(tmp_path)
    assert back.data == json.loads(bundle.to_json())
    assert back.tables == bundle.tables
    header = bundle.tables["flows.csv"].splitlines()[0]
    assert header.startswith("run,flow,destination,sent,delivered,loss_ratio")


def test_compare_self_is_zero(minimal):
    bundle = run_experiment(scenario(minimal))
    diff = compare(bundle, bundle)
    deltas = diff["runs"]["main"]["flows"]["1"]
    assert all(v in (0, 0.0, None) for v in deltas.values())
    assert diff["warnings"] == []


def test_compare_mismatched_flows_warns(minimal):
    a = run_experiment(scenario(minimal))
    d = copy.deepcopy(minimal)
    d["traffic"].append({"flow": 2, "app": "1:1", "source": 1, "rate_pps": 10,
                         "packet_bytes": 200, "stop": 0.5})
    b = run_experiment(scenario(d))
    diff = compare(a, b)
    assert diff["runs"]["main"]["only_b"] == ["2"]
    assert "1" in diff["runs"]["main"]["flows"]
    assert diff["warnings"]


def test_compare_assisted_against_baseline():
    bundle = run_experiment(load(PRESET_DIR / "network_assisted_transport.yaml"))
    diff = compare_runs(bundle, "baseline", "assisted")
    delta = diff["runs"]["baseline->assisted"]["flows"]["7"]["recovery_delay_mean"]
    assert delta < 0


def test_preset_precondition(minimal):
    with pytest.raises(PresetPreconditionFailed):
        run_experiment(scenario(minimal), "detnet")
    with pytest.raises(PresetPreconditionFailed):
        run_experiment(scenario(minimal), "network_assisted_transport")


def test_unadmitted_chain_still_reports(minimal):
    minimal["chains"][0]["nfs"][0]["cpu"] = 99
    bundle = run_experiment(scenario(minimal))
    mgmt = bundle.data["runs"]["main"]["management"]["1:1"]
    assert mgmt["lifecycle"] == "failed"
    assert bundle.data["runs"]["main"]["simulation"]["flows"] == {}


def test_schedule_rate_change_reaches_source(minimal):
    minimal["traffic"][0].update(stop=1.0, schedule=[{"at": 0.5, "rate_pps": 200}])
    bundle = run_experiment(scenario(minimal))
    sent = bundle.flow("main", 1)["counters"]["sent"]
    assert sent == 50 + 100


# -- command line --------------------------------------------------------------


def write(tmp_path, data, name="s.yaml"):
    p = tmp_path / name
    p.write_text(scenario_text(data))
    return str(p)


def test_cli_validate_ok(tmp_path, minimal, capsys):
    assert cli.main(["validate", write(tmp_path, minimal)]) == 0
    assert "ok" in capsys.readouterr().out


def test_cli_validate_failure(tmp_path, minimal, capsys):
    minimal["topology"]["links"][0]["bandwidth"] = 0
    assert cli.main(["validate", write(tmp_path, minimal)]) == 1
    err = capsys.readouterr().err
    assert "line" in err and "bandwidth" in err


def test_cli_run_writes_bundle(tmp_path, minimal):
    out = tmp_path / "out"
    assert cli.main(["run", write(tmp_path, minimal), "--seed", "4", "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["seed"] == 4


def test_cli_run_prints_summary(tmp_path, minimal, capsys):
    assert cli.main(["run", write(tmp_path, minimal)]) == 0
    assert "flows" in json.loads(capsys.readouterr().out)


def test_cli_run_precondition_is_validation_failure(tmp_path, minimal):
    assert cli.main(["run", write(tmp_path, minimal), "--preset", "detnet"]) == 1


def test_cli_run_runtime_error(tmp_path, minimal, monkeypatch):
    def boom(*a, **k):
        raise Unrecoverable("simulated failure")

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", write(tmp_path, minimal)]) == 2


def test_cli_compare(tmp_path, minimal, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    path = write(tmp_path, minimal)
    cli.main(["run", path, "--out", str(a)])
    cli.main(["run", path, "--out", str(b)])
    capsys.readouterr()
    assert cli.main(["compare", str(a), str(b)]) == 0
    diff = json.loads(capsys.readouterr().out)
    assert set(diff["runs"]["main"]["flows"]["1"].values()) <= {0, 0.0, None}


def test_cli_compare_bad_bundle(tmp_path):
    assert cli.main(["compare", str(tmp_path / "x"), str(tmp_path / "y")]) == 1


def test_cli_rejects_unknown_preset(tmp_path, minimal):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", write(tmp_path, minimal), "--preset", "nope"])
    assert exc.value.code == 2
