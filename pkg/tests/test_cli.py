import json
import math

import pytest

from diluted_perceptron import cli
from diluted_perceptron.errors import NumericalError


def run(tmp_path, *args, out="out"):
    d = tmp_path / out
    code = cli.main(list(args) + ["--out-dir", str(d)])
    return code, d


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


SMALL = {
    "check-conditions": ["--alpha", "0.1", "--gamma0", "1", "--potential", "tanh:0.2:1"],
    "exact": ["--N", "6", "--alpha", "0.5", "--gamma", "1.5", "--potential", "tanh:0.2:1"],
    "decorrelation": ["--alpha", "0.3", "--gamma", "1", "--potential", "tanh:0.2:1",
                      "--N-list", "6,8", "--n-samples", "40", "--all-pairs", "true"],
    "fixed-point": ["--alpha", "0.1", "--gamma", "1", "--potential", "tanh:0.2:1",
                    "--pop-size", "3000"],
    "magnetization-law": ["--alpha", "0.3", "--gamma", "1", "--potential", "tanh:0.2:1",
                          "--N", "6", "--m", "2", "--n-disorder", "60", "--pop-size", "3000"],
    "free-energy": ["--alpha", "0.1", "--gamma-max", "1", "--potential", "tanh:0.2:1",
                    "--grid", "5", "--pop-size", "2000", "--n-mc", "500", "--n-disorder", "40",
                    "--N-list", "6,8"],
}


def test_check_conditions_example(tmp_path):
    code, d = run(tmp_path, "check-conditions", *SMALL["check-conditions"])
    assert code == 0
    report = json.loads((d / "conditions.json").read_text())
    assert report["contraction_ok"] is True
    assert report["contraction_factor"] == pytest.approx(0.0597, abs=5e-5)
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["command"] == "check-conditions"
    assert manifest["params"] == {"alpha": 0.1, "gamma0": 1.0, "potential": "tanh:0.2:1"}


def test_exact_example(tmp_path):
    code, d = run(tmp_path, "exact", "--N", "2", "--M", "1", "--gamma", "0",
                  "--potential", "const:0.3")
    assert code == 0
    result = json.loads((d / "gibbs.json").read_text())
    assert result["pN"] == pytest.approx(math.log(2) + 0.15, abs=1e-15)


def test_exact_reads_instance_file(tmp_path):
    code, d = run(tmp_path, "exact", *SMALL["exact"])
    assert code == 0
    code2, d2 = run(tmp_path, "exact", "--instance", str(d / "instance.json"),
                    "--potential", "tanh:0.2:1", out="again")
    assert code2 == 0
    assert (d / "gibbs.json").read_bytes() == (d2 / "gibbs.json").read_bytes()


@pytest.mark.parametrize("command", sorted(SMALL))
def test_reruns_are_byte_identical(tmp_path, command):
    code1, d1 = run(tmp_path, command, *SMALL[command], out="a")
    code2, d2 = run(tmp_path, command, *SMALL[command], out="b")
    assert code1 == code2 == 0
    assert files(d1) == files(d2)


def test_decorrelation_csv_columns(tmp_path):
    code, d = run(tmp_path, "decorrelation", *SMALL["decorrelation"], "--seed", "17")
    assert code == 0
    lines = (d / "decorrelation_N6.csv").read_text().splitlines()
    assert lines[0] == "seed,sample_index,statistic_name,value"
    assert lines[1].startswith("17,0,pN,")
    assert len(lines) == 1 + 3 * 40
    summary = json.loads((d / "summary.json").read_text())
    assert {s["statistic"] for s in summary} == {"pN", "decorrelation", "pair_decorrelation"}
    assert all(set(s) == {"statistic", "mean", "std_error", "n_samples", "params"} for s in summary)


def test_free_energy_outputs(tmp_path):
    code, d = run(tmp_path, "free-energy", *SMALL["free-energy"])
    assert code == 0
    assert (d / "rs_curve.csv").read_text().splitlines()[0] == "gamma,G,G_err,F,F_err"
    assert (d / "comparison.csv").read_text().splitlines()[0] == "N,pN,pN_err,F,F_err,abs_diff"
    assert len((d / "rs_curve.csv").read_text().splitlines()) == 6


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nalpha = 0.1\ngamma0 = 1\npotential = tanh:0.2:1\nseed = 5\n")
    resolved = cli.load_config("check-conditions", cfg, {"seed": "9"})
    assert resolved.seed == 9 and resolved.params["alpha"] == 0.1
    empty = tmp_path / "empty.cfg"
    empty.write_text("")
    from_flags = cli.load_config("check-conditions", empty,
                                 {"alpha": "0.2", "gamma0": "0.5", "potential": "zero"})
    assert from_flags.params == {"alpha": 0.2, "gamma0": 0.5, "potential": "zero"}
    assert cli.load_config("check-conditions", cfg).seed == 5


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gamna = 1\n")
    code, d = run(tmp_path, "exact", "--config", str(cfg), "--N", "4", "--potential", "zero")
    assert code == cli.EXIT_CONFIG
    assert "gamna" in capsys.readouterr().err


def test_invalid_parameters_report_precondition(tmp_path, capsys):
    code, d = run(tmp_path, "exact", "--N", "2", "--alpha", "0.5", "--gamma", "5",
                  "--potential", "zero")
    assert code == cli.EXIT_CONFIG
    assert "gamma/N" in capsys.readouterr().err
    assert not any(d.iterdir())


def test_capacity_error_leaves_no_partial_output(tmp_path, capsys):
    code, d = run(tmp_path, "decorrelation", "--alpha", "0.1", "--gamma", "1",
                  "--potential", "zero", "--N-list", "8,30", "--n-samples", "10")
    assert code == cli.EXIT_CAPACITY
    assert "N <= 24" in capsys.readouterr().err
    assert not any(d.iterdir())


def test_numerical_error_exit_code_and_cleanup(tmp_path, monkeypatch):
    def broken(cfg, out):
        out.json("partial.json", {"x": 1})
        raise NumericalError("boom")

    monkeypatch.setitem(cli.RUNNERS, "check-conditions", broken)
    code, d = run(tmp_path, "check-conditions", *SMALL["check-conditions"])
    assert code == cli.EXIT_NUMERICAL
    assert not any(d.iterdir())


MUTATIONS = {
    "alpha": "0.35", "gamma": "1.2", "potential": "bump:0.3:1", "N_list": "6,7",
    "n_samples": "41", "all_pairs": "false", "m_rounding": "stochastic", "chunk_size": "16",
    "seed": "1",
}
NO_OPS = {"workers": "2"}


def _data_files(d):
    return {k: v for k, v in files(d).items() if k != "manifest.json"}


def test_every_parameter_reaches_the_output(tmp_path):
    schema = set(cli.SCHEMAS["decorrelation"]) | {"seed", "workers"}
    assert schema == set(MUTATIONS) | set(NO_OPS)
    base_args = SMALL["decorrelation"] + ["--chunk-size", "32"]
    _, base = run(tmp_path, "decorrelation", *base_args, out="base")
    base_files = _data_files(base)
    for i, (key, value) in enumerate({**MUTATIONS, **NO_OPS}.items()):
        _, d = run(tmp_path, "decorrelation", *base_args, "--" + key.replace("_", "-"), value,
                   out=f"m{i}")
        manifest = json.loads((d / "manifest.json").read_text())
        echoed = manifest.get(key, manifest["params"].get(key))
        assert echoed is not None
        if key in NO_OPS:
            assert _data_files(d) == base_files
        else:
            assert _data_files(d) != base_files, key
