import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from conoscatter.errors import ConfigInvalid
from conoscatter.harness.cli import EXIT_CHECKS, EXIT_CONFIG, EXIT_OK, main
from conoscatter.harness.config import ExperimentConfig
from conoscatter.harness.pipeline import STAGES, StageError, run_pipeline, run_stage
from conoscatter.harness.suites import compare_oracle, run_geometry_suite

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
[scenario]
name = small-sphere
seed = 2

[geometry]
primitive = sphere
radius = 0.5

[potential]
model = delta
mollify_scale = 0.1
enforce_admissibility = false
grid_n = 32

[wavefield]
probes = 2

[scatter]
level = 1
slice = {slice}
"""


def small_config(tmp_path, slice_="backscatter", name="run"):
    cfg = ExperimentConfig.from_string(SMALL.format(slice=slice_))
    return cfg.with_overrides(out=tmp_path / name)


@pytest.mark.parametrize("text, field", [
    ("[bogus]\n", "bogus"),
    ("[scenario]\ncolour = red\n", "scenario.colour"),
    ("[scenario]\nseed = x\n", "scenario.seed"),
    ("[geometry]\nprimitive = torus\n", "geometry.primitive"),
    ("[geometry]\ncenter = 1 2\n", "geometry.center"),
    ("[potential]\nmollify_scale = 0.01\n", "potential.mollify_scale"),
    ("[potential]\ntaper = 1.5\n", "potential.taper"),
    ("[potential]\nscale = nan\n", "potential.scale"),
    ("[wavefield]\nepsilon = 0.01\n", "wavefield.epsilon"),
    ("[wavefield]\nreceiver_radius = 1.0\n", "wavefield.receiver_radius"),
    ("[scatter]\nds = 0.05\n", "scatter.ds"),
    ("[scatter]\nroute = magic\n", "scatter.route"),
    ("[scatter]\nlevel = 7\n", "scatter.level"),
    ("[reconstruct]\nclassify = vibes\n", "reconstruct.classify"),
    ("[reconstruct]\nspecular_tol = -1\n", "reconstruct.specular_tol"),
    ("[reconstruct]\nexclude_tangential = maybe\n", "reconstruct.exclude_tangential"),
    ("[geometry]\nprimitive = line-in-plane\n[potential]\nprofile = FOURIER_SYMBOL\n"
     "M1 = 0\nM2 = 0\n", "potential.M1"),
    ("[geometry]\nprimitive = line-in-plane\n[potential]\nmodel = delta\n", "potential.profile"),
    ("no section header\n", "<file>"),
])
def test_invalid_config_names_the_field(text, field):
    with pytest.raises(ConfigInvalid) as info:
        ExperimentConfig.from_string(text)
    assert info.value.field == field


def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.ini"):
        assert ExperimentConfig.load(path).scenario.name


def test_digest_ignores_output_location():
    cfg = ExperimentConfig.load(CONFIGS / "sphere_backscatter.ini")
    assert cfg.digest() == cfg.with_overrides(out="/elsewhere", threads=4).digest()
    assert cfg.digest() != cfg.with_overrides(seed=99).digest()


def test_empty_config_is_a_noop(tmp_path):
    cfg = ExperimentConfig.from_string("").with_overrides(out=tmp_path)
    manifest = run_pipeline(cfg)
    assert manifest.status == "NOOP" and manifest.passed
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "NOOP"


def test_zero_potential_pipeline(tmp_path):
    cfg = ExperimentConfig.load(CONFIGS / "zero.ini").with_overrides(out=tmp_path)
    manifest = run_pipeline(cfg)
    assert manifest.passed
    names = {c.name for c in manifest.checks}
    assert {"zero_potential", "zero_traces", "zero_kernel", "no_points_from_zero_data"} <= names


def test_runs_are_deterministic(tmp_path):
    a = run_pipeline(small_config(tmp_path, name="a"))
    b = run_pipeline(small_config(tmp_path, name="b"))
    assert a.passed
    for stage in STAGES:
        assert a.stages[stage]["outputs"] == b.stages[stage]["outputs"]


def test_stages_rerun_alone_reproduce_their_outputs(tmp_path):
    cfg = small_config(tmp_path)
    full = run_pipeline(cfg)
    for stage in ("restrict", "reconstruct"):
        again = run_stage(cfg, stage)
        assert again.stages[stage]["outputs"] == full.stages[stage]["outputs"]


def test_stage_without_inputs_fails(tmp_path):
    with pytest.raises(StageError) as info:
        run_stage(small_config(tmp_path), "restrict")
    assert info.value.stage == "restrict"


def test_identity_slice_stops_the_run(tmp_path):
    cfg = small_config(tmp_path, "identity")
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.cause_code == "SLICE_INVALID"
    assert info.value.cause.condition == 1
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["status"] == "ERROR"


def test_cli_exit_codes(tmp_path):
    runner = CliRunner()
    good = tmp_path / "good.ini"
    good.write_text(SMALL.format(slice="backscatter"))
    res = runner.invoke(main, ["validate", "--config", str(good), "--out", str(tmp_path / "o")])
    assert res.exit_code == EXIT_OK, res.output
    assert "status PASS" in res.output
    bad = tmp_path / "bad.ini"
    bad.write_text("[scatter]\nlevel = 9\n")
    res = runner.invoke(main, ["validate", "--config", str(bad)])
    assert res.exit_code == EXIT_CONFIG
    ident = tmp_path / "ident.ini"
    ident.write_text(SMALL.format(slice="identity"))
    res = runner.invoke(main, ["validate", "--config", str(ident), "--out", str(tmp_path / "i")])
    assert res.exit_code == EXIT_CHECKS


def test_environment_overrides_out(tmp_path, monkeypatch):
    monkeypatch.setenv("CONOSCATTER_OUT", str(tmp_path / "env"))
    res = CliRunner().invoke(main, ["synth", "--config", str(CONFIGS / "zero.ini"),
                                    "--out", str(tmp_path / "flag")])
    assert res.exit_code == EXIT_OK, res.output
    assert (tmp_path / "env" / "potential.json").exists()
    assert not (tmp_path / "flag").exists()


def test_show_config_prints_json():
    res = CliRunner().invoke(main, ["show-config", "--config", str(CONFIGS / "zero.ini")])
    assert json.loads(res.output)["scatter"]["level"] == 0


def test_geometry_suite(tmp_path):
    cfg = ExperimentConfig.from_string(
        "[geometry]\nprimitive = line-in-plane\n"
        "[geometry_suite]\ncertificates = 10\nmultiphase_grid = 4\nprop71_samples = 10\n"
    ).with_overrides(out=tmp_path)
    manifest = run_geometry_suite(cfg)
    assert manifest.passed
    assert {"certificate_rank", "multiphase_ode_vs_closed",
            "prop71_transversal"} <= {c.name for c in manifest.checks}
    assert (tmp_path / "certificates.json").exists()


def test_geometry_suite_noop(tmp_path):
    cfg = ExperimentConfig.from_string("[geometry]\nprimitive = plane\n").with_overrides(
        out=tmp_path)
    assert run_geometry_suite(cfg).status == "NOOP"


def test_oracle_comparison(tmp_path):
    report = compare_oracle(small_config(tmp_path), probes=3, kernel_columns=1)
    assert report["max_rel_error"] <= 1e-3
    assert report["kernel"]["rel_discrepancy"] <= 2e-2
    assert not report["errors"]


def test_oracle_comparison_reports_underresolution(tmp_path):
    cfg = small_config(tmp_path)
    cfg.wavefield.epsilon = 0.02
    report = compare_oracle(cfg, probes=2)
    assert report["errors"][0]["code"] == "QUADRATURE_UNDERRESOLVED"
    assert report["max_rel_error"] is None
