"""Command-line surface: exit codes, file outputs, determinism."""
import math
import subprocess
import sys

import numpy as np
import pytest

from countssm.cli import main
from countssm.io import ModelFile, SynthSpec, load_model, save_model, save_panel, synth_panel
from countssm.metrics import ForecastPair, mae, pdl, rmse
from countssm.regimes import RegimeSpec


@pytest.fixture(scope="module")
def small_panel(tmp_path_factory):
    path = tmp_path_factory.mktemp("panels") / "panel.csv"
    spec = SynthSpec(
        n_series=30,
        horizon=5,
        regime=RegimeSpec(kind="increasing", beta0=3.0, q=0.8),
        eta=(-0.2, 0.4),
    )
    panel, _ = synth_panel(spec, seed=99)
    save_panel(panel, path)
    return path


def test_simulate_writes_csvs(tmp_path):
    out = tmp_path / "study"
    code = main(
        [
            "simulate",
            "--regime",
            "increasing",
            "--q",
            "0.8",
            "--beta0",
            "3",
            "--T",
            "8",
            "--paths",
            "40",
            "--seed",
            "7",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    for name in ("trajectories.csv", "moments.csv", "density.csv"):
        assert (out / name).exists()
    moments = (out / "moments.csv").read_text().splitlines()
    rows = [line.split(",") for line in moments if not line.startswith("#")][1:]
    means = np.array([float(r[1]) for r in rows])
    assert np.all(np.abs(means - 1.0) < 0.6)


def test_simulate_single_path(tmp_path):
    out = tmp_path / "one"
    code = main(
        ["simulate", "--regime", "shared", "--beta0", "3", "--T", "4", "--paths", "1", "--seed", "1", "--out", str(out)]
    )
    assert code == 0
    lines = [l for l in (out / "trajectories.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 1 + 4  # header + T rows for the single path


def test_simulate_invalid_q_exits_2(tmp_path, capsys):
    code = main(
        ["simulate", "--regime", "increasing", "--q", "1.5", "--beta0", "3", "--out", str(tmp_path / "x")]
    )
    assert code == 2
    err = capsys.readouterr().err
    assert "0 < q <= 1" in err


def test_missing_panel_path_exits_2(tmp_path, capsys):
    code = main(
        ["fit", "--panel", str(tmp_path / "nope.csv"), "--regime", "shared", "--out", str(tmp_path / "m")]
    )
    assert code == 2


def test_underdetermined_fit_exits_3(tmp_path, capsys):
    path = tmp_path / "tiny.csv"
    path.write_text("id,period,count\na,1,2\n")
    code = main(["fit", "--panel", str(path), "--regime", "shared", "--out", str(tmp_path / "m")])
    assert code == 3


def test_fit_writes_model_file(tmp_path, small_panel):
    out = tmp_path / "inc.model"
    code = main(
        ["fit", "--panel", str(small_panel), "--regime", "increasing", "--seed", "5", "--out", str(out)]
    )
    assert code == 0
    model = load_model(out)
    assert model.kind == "increasing"
    assert model.seed == 5
    assert len(model.eta) == 2
    assert model.k == 4  # intercept + slope + beta0 + q


def test_compare_outputs_and_thread_determinism(tmp_path, small_panel):
    args = [
        "compare",
        "--panel",
        str(small_panel),
        "--regimes",
        "independent,shared,increasing",
        "--seed",
        "3",
    ]
    out1 = tmp_path / "c1.csv"
    out2 = tmp_path / "c2.csv"
    assert main([*args, "--out", str(out1), "--threads", "1"]) == 0
    assert main([*args, "--out", str(out2), "--threads", "8"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    text = out1.read_text()
    assert "# seed=3" in text
    assert text.splitlines()[-1].startswith("boundary_flags")
    header_row = next(l for l in text.splitlines() if l.startswith("quantity"))
    assert header_row == "quantity,independent,shared,increasing"


def test_compare_with_models_dir_then_validate(tmp_path, small_panel, capsys):
    models = tmp_path / "models"
    code = main(
        [
            "compare",
            "--panel",
            str(small_panel),
            "--regimes",
            "shared,increasing",
            "--seed",
            "4",
            "--out",
            str(tmp_path / "cmp.csv"),
            "--models-dir",
            str(models),
        ]
    )
    assert code == 0
    capsys.readouterr()
    code = main(
        [
            "validate",
            "--panel",
            str(small_panel),
            "--model",
            str(models / "shared.model"),
            "--model",
            str(models / "increasing.model"),
            "--split",
            "last",
            "--out",
            str(tmp_path / "val.csv"),
        ]
    )
    assert code == 0
    lines = [l for l in (tmp_path / "val.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "metric,shared,increasing"
    assert lines[1].startswith("rmse,") and lines[3].startswith("pdl,")


def test_validate_agrees_with_direct_metric_calls(tmp_path, small_panel):
    models = tmp_path / "models"
    main(
        [
            "compare",
            "--panel",
            str(small_panel),
            "--regimes",
            "shared",
            "--seed",
            "4",
            "--out",
            str(tmp_path / "cmp.csv"),
            "--models-dir",
            str(models),
        ]
    )
    out_csv = tmp_path / "val.csv"
    forecast_csv = tmp_path / "fc.csv"
    main(
        [
            "validate",
            "--panel",
            str(small_panel),
            "--model",
            str(models / "shared.model"),
            "--out",
            str(out_csv),
        ]
    )
    main(
        [
            "forecast",
            "--panel",
            str(small_panel),
            "--model",
            str(models / "shared.model"),
            "--out",
            str(forecast_csv),
        ]
    )
    rows = [
        line.split(",")
        for line in forecast_csv.read_text().splitlines()
        if not line.startswith("#")
    ][1:]
    pairs = [ForecastPair(actual=int(r[2]), predicted=float(r[3])) for r in rows if r[2] != ""]
    reported = {
        line.split(",")[0]: float(line.split(",")[1])
        for line in out_csv.read_text().splitlines()
        if line.split(",")[0] in ("rmse", "mae", "pdl")
    }
    assert reported["rmse"] == pytest.approx(rmse(pairs), rel=1e-12)
    assert reported["mae"] == pytest.approx(mae(pairs), rel=1e-12)
    assert reported["pdl"] == pytest.approx(pdl(pairs), rel=1e-12)


def test_validate_perfect_forecast_fixture(tmp_path):
    # constant counts of 2 and an intercept-only independent model forecasting exp(ln 2)
    panel_path = tmp_path / "const.csv"
    lines = ["id,period,count"]
    for i in range(6):
        lines += [f"s{i},1,2", f"s{i},2,2"]
    panel_path.write_text("\n".join(lines) + "\n")
    model = ModelFile(
        kind="independent",
        beta0=5.0,
        p=None,
        q=None,
        eta=(math.log(2.0),),
        eta_names=("intercept",),
        dispersion=5.0,
        loglik=0.0,
        k=2,
        n_obs=6,
        seed=1,
    )
    model_path = tmp_path / "const.model"
    save_model(model, model_path)
    out = tmp_path / "val.csv"
    code = main(
        ["validate", "--panel", str(panel_path), "--model", str(model_path), "--out", str(out)]
    )
    assert code == 0
    values = {
        line.split(",")[0]: float(line.split(",")[1])
        for line in out.read_text().splitlines()
        if line.split(",")[0] in ("rmse", "mae", "pdl")
    }
    assert values["rmse"] < 1e-12
    assert values["mae"] < 1e-12
    assert values["pdl"] < 1e-12


def test_validate_empty_holdout_exits_2(tmp_path, small_panel, capsys):
    models = tmp_path / "models"
    main(
        [
            "compare",
            "--panel",
            str(small_panel),
            "--regimes",
            "shared",
            "--seed",
            "4",
            "--out",
            str(tmp_path / "cmp.csv"),
            "--models-dir",
            str(models),
        ]
    )
    code = main(
        [
            "validate",
            "--panel",
            str(small_panel),
            "--model",
            str(models / "shared.model"),
            "--split",
            "period:1900",
            "--out",
            str(tmp_path / "v.csv"),
        ]
    )
    assert code == 2


def test_fit_joint_refinement_runs(tmp_path, small_panel):
    out = tmp_path / "joint.model"
    code = main(
        [
            "fit",
            "--panel",
            str(small_panel),
            "--regime",
            "shared",
            "--seed",
            "5",
            "--joint",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    model = load_model(out)
    assert model.kind == "shared"
    assert len(model.eta) == 2


def test_study_command_smoke(tmp_path):
    out = tmp_path / "study"
    code = main(["study", "--T", "6", "--paths", "12", "--seed", "2", "--out", str(out)])
    assert code == 0
    for name in ("increasing", "decreasing", "converging", "constant_variance"):
        assert (out / name / "moments.csv").exists()


def test_forecast_keeps_unscored_holdout_rows(tmp_path):
    # a holdout record with an empty count still gets a forecast line;
    # validate then scores only the observed ones
    lines = ["id,period,count"]
    for i in range(8):
        lines += [f"s{i},1,1", f"s{i},2,2", f"s{i},3," if i == 0 else f"s{i},3,1"]
    panel_path = tmp_path / "p.csv"
    panel_path.write_text("\n".join(lines) + "\n")
    models = tmp_path / "models"
    assert (
        main(
            [
                "compare",
                "--panel",
                str(panel_path),
                "--regimes",
                "shared",
                "--split",
                "period:3",
                "--seed",
                "1",
                "--out",
                str(tmp_path / "c.csv"),
                "--models-dir",
                str(models),
            ]
        )
        == 0
    )
    fc = tmp_path / "fc.csv"
    assert (
        main(
            [
                "forecast",
                "--panel",
                str(panel_path),
                "--model",
                str(models / "shared.model"),
                "--split",
                "period:3",
                "--out",
                str(fc),
            ]
        )
        == 0
    )
    rows = [l.split(",") for l in fc.read_text().splitlines() if not l.startswith("#")][1:]
    assert len(rows) == 8
    blank = [r for r in rows if r[2] == ""]
    assert len(blank) == 1 and float(blank[0][3]) > 0.0
    val = tmp_path / "v.csv"
    assert (
        main(
            [
                "validate",
                "--panel",
                str(panel_path),
                "--model",
                str(models / "shared.model"),
                "--split",
                "period:3",
                "--out",
                str(val),
            ]
        )
        == 0
    )
    n_line = [l for l in val.read_text().splitlines() if l.startswith("n,")][0]
    assert n_line == "n,7"


def test_threads_env_fallback(tmp_path, small_panel, monkeypatch):
    monkeypatch.setenv("COUNT_SSM_THREADS", "2")
    out = tmp_path / "c.csv"
    assert (
        main(
            [
                "compare",
                "--panel",
                str(small_panel),
                "--regimes",
                "shared",
                "--seed",
                "6",
                "--out",
                str(out),
            ]
        )
        == 0
    )
    monkeypatch.setenv("COUNT_SSM_THREADS", "not-a-number")
    assert (
        main(
            [
                "compare",
                "--panel",
                str(small_panel),
                "--regimes",
                "shared",
                "--seed",
                "6",
                "--out",
                str(tmp_path / "c2.csv"),
            ]
        )
        == 2
    )


def test_categorical_panel_pipeline(tmp_path):
    # a small panel shaped like the real-data reproduction: categorical
    # entity type, two numeric covariates, per-year periods with a holdout
    rng = np.random.default_rng(2468)
    levels = ["City", "County", "Miscellaneous", "School", "Town", "Village"]
    lines = ["id,period,count,entity_type,coverage,deduct"]
    from countssm.dist import rng_stream
    from countssm.simulate import simulate_path

    for i in range(40):
        level = levels[i % len(levels)]
        coverage = float(rng.uniform(0.0, 2.0))
        deduct = float(rng.uniform(0.0, 1.0))
        lam = math.exp(-0.4 + 0.3 * coverage - 0.2 * deduct + (0.2 if level == "City" else 0.0))
        path = simulate_path(
            RegimeSpec(kind="shared", beta0=2.0), [lam] * 6, rng_stream(777, i)
        )
        for t, year in enumerate(range(2006, 2012)):
            lines.append(f"s{i},{year},{int(path.counts[t])},{level},{coverage!r},{deduct!r}")
    panel_path = tmp_path / "panel.csv"
    panel_path.write_text("\n".join(lines) + "\n")

    models = tmp_path / "models"
    code = main(
        [
            "compare",
            "--panel",
            str(panel_path),
            "--regimes",
            "independent,shared,increasing,decreasing,constant_variance",
            "--reference",
            "entity_type=Miscellaneous",
            "--split",
            "period:2011",
            "--seed",
            "12",
            "--out",
            str(tmp_path / "cmp.csv"),
            "--models-dir",
            str(models),
        ]
    )
    assert code == 0
    model = load_model(models / "shared.model")
    assert model.eta_names[0] == "intercept"
    assert "entity_type=City" in model.eta_names
    assert "entity_type=Miscellaneous" not in model.eta_names  # reference level
    assert len(model.eta) == 1 + 5 + 2

    code = main(
        [
            "validate",
            "--panel",
            str(panel_path),
            "--model",
            str(models / "shared.model"),
            "--model",
            str(models / "increasing.model"),
            "--reference",
            "entity_type=Miscellaneous",
            "--split",
            "period:2011",
            "--out",
            str(tmp_path / "val.csv"),
        ]
    )
    assert code == 0
    text = (tmp_path / "val.csv").read_text()
    assert text.splitlines()[-1].startswith("n,40,40")


def test_module_entrypoint_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "countssm", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "simulate" in proc.stdout and "validate" in proc.stdout
