import json
import os

import numpy as np
import pytest

from kinetic.kinetic_errors import ConfigError
from kinetic.kinetic_harness import (CONFIG_DIR, build_parser, derived_seed,
                                     expected_histogram_l1,
                                     load_configuration, loglog_slope, main,
                                     parse_value, run_density_crossval,
                                     run_het_diffusion_suite,
                                     run_integral_convergence, run_scaled_bm,
                                     run_structural_audit, sylvester_trials)
from kinetic.kinetic_fokker_planck import gaussian_cell_averages


def golden(name):
    return os.path.join(CONFIG_DIR, name)


def quick(name, *overrides, tmp_path=None):
    extra = list(overrides)
    if tmp_path is not None:
        extra += [f"Output.directory={tmp_path}", f"Database.ledger={tmp_path / 'runs.db'}",
                  f"Logging.run_log={tmp_path / 'runs.csv'}"]
    return load_configuration(golden(name), extra)


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("1e-3") == 1e-3
    assert parse_value("1.0, 0, 0, 2.0") == (1.0, 0, 0, 2.0)
    assert parse_value("True") is True
    assert parse_value("periodic") == "periodic"


def test_overrides_and_flags():
    config = load_configuration(golden("lambda_family.cfg"), ["Integrals.seeds=7", "Model.case2_isotropic.c=2"],
                                seed=99, out="elsewhere", threads=3)
    assert config.get_int("Integrals", "seeds") == 7
    assert config.master_seed == 99
    assert config.output_dir == "elsewhere"
    assert config.threads == 3
    assert config.model_overrides("case2_isotropic") == {"c": 2}
    assert config.get_list("Integrals", "n_values", convert=int)[0] == 256


def test_config_hash_ignores_threads_and_paths():
    base = load_configuration(golden("fehlberg.cfg"))
    same = load_configuration(golden("fehlberg.cfg"), ["Logging.level=DEBUG"], out="other", threads=8)
    changed = load_configuration(golden("fehlberg.cfg"), seed=base.master_seed + 1)
    assert base.config_hash() == same.config_hash()
    assert base.config_hash() != changed.config_hash()
    assert len(base.config_hash()) == 64


def test_configuration_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_configuration(str(tmp_path / "missing.cfg"))
    with pytest.raises(ConfigError):
        load_configuration(golden("fehlberg.cfg"), ["no_equals_sign"])
    with pytest.raises(ConfigError):
        load_configuration(golden("fehlberg.cfg"), ["nosection=1"])
    config = load_configuration(golden("fehlberg.cfg"), ["Integrals.seeds=many"])
    with pytest.raises(ConfigError):
        config.get_int("Integrals", "seeds")
    with pytest.raises(ConfigError):
        config.get("Integrals", "absent")
    broken = tmp_path / "broken.cfg"
    broken.write_text("[Experiment]\nname = x\n")
    with pytest.raises(ConfigError):
        load_configuration(str(broken))


def test_derived_seeds_are_stable_and_distinct():
    assert derived_seed(1, 12, 0) == derived_seed(1, 12, 0)
    assert derived_seed(1, 12, 0) != derived_seed(1, 12, 1)
    assert derived_seed(1, 12, 0) != derived_seed(2, 12, 0)


def test_loglog_slope():
    n = np.array([10.0, 100.0, 1000.0])
    assert loglog_slope(n, 3.0 / np.sqrt(n)) == pytest.approx(-0.5)


def test_expected_histogram_l1_shrinks_with_samples():
    ref = gaussian_cell_averages(4.0, 40, 1, 0.0, 0.5)
    small, large = expected_histogram_l1(ref, 1000), expected_histogram_l1(ref, 100000)
    assert large < small
    assert small == pytest.approx(10.0 * large, rel=0.3)


def test_sylvester_trials_table():
    table = sylvester_trials(3, 5, [1, 3])
    assert list(table["dim"]) == [1, 3]
    assert table["max_reconstruction"].max() < 1e-9
    assert table["max_fd_relative"].max() < 1e-5


def test_small_structural_audit():
    config = quick("structural_audit.cfg", "Experiment.models=case1_constant, case2_isotropic, neg_case1_periodic, "
                   "neg_case2_gaussian", "Grid.per_axis=21", "Sylvester.trials=3",
                   "Criteria.holds=case1_constant, case2_isotropic")
    report = run_structural_audit(config)
    assert report.all_passed, [c for c in report.criteria if not c.passed]
    assert report.metrics["neg_case1_periodic.verdict"] == "fails"
    assert report.metrics["case2_isotropic.verdict"] == "holds"
    assert len(report.tables["structural_audit"]) == 4


def test_small_form_equivalence():
    config = quick("pde_equivalence_1d.cfg", "Grid.cells_list=50, 100")
    report = run_density_crossval(config)
    assert report.all_passed, [c for c in report.criteria if not c.passed]
    assert report.metrics["observed_order"] > 1.0


def test_small_density_crossval_shapes():
    config = quick("density_positive_1d_hk.cfg", "Ensemble.N=2000", "Grid.cells=16", "Grid.refine=2",
                   "Ensemble.dt=1e-2")
    report = run_density_crossval(config)
    assert set(report.densities) == {"histogram", "fick", "ito_standard"}
    assert len(report.tables["shard_l1"]) == 10
    assert report.metrics["tally"]["alive"] == 2000
    assert report.metrics["l1.fick_vs_ito_standard"] < 0.05


def test_density_crossval_rejects_uneven_shards():
    config = quick("density_positive_1d_hk.cfg", "Ensemble.N=2005")
    with pytest.raises(ConfigError):
        run_density_crossval(config)


def test_small_integral_studies():
    report = run_integral_convergence(quick("lambda_family.cfg", "Integrals.seeds=5", "Integrals.n_values=64, 256"))
    assert set(report.tables["lambda_family"].columns) == {"n", "ito", "stratonovich", "fehlberg", "hk"}
    report = run_integral_convergence(quick("ho_divergence.cfg", "Integrals.seeds_zero=20", "Integrals.seeds=5",
                                            "Integrals.n_values=64, 4096"))
    assert report.metrics["overflow_at_first_step_fraction"] == 1.0
    with pytest.raises(ConfigError):
        run_integral_convergence(quick("lambda_family.cfg", "Experiment.subtype=unknown"))


def test_deterministic_subtype_runs_the_scaled_bm_checks():
    report = run_integral_convergence(quick("scaled_bm.cfg", "Experiment.subtype=deterministic"))
    assert report.all_passed
    assert {"sqrt", "linear", "saturation", "power"} == set(report.tables["scaled_bm"]["family"])
    assert sorted(set(report.tables["scaled_bm"]["lambda"])) == [0.0, 0.25, 255 / 512, 0.5, 0.75, 1.0]


def test_small_het_diffusion_suite():
    config = quick("het_diffusion.cfg", "HetDiffusion.strong_dts=1e-1, 1e-2", "HetDiffusion.strong_paths=20",
                   "HetDiffusion.blowup_N=50", "HetDiffusion.blowup_dt=1e-2", "HetDiffusion.absorb_N=50",
                   "HetDiffusion.absorb_dt=1e-2", "HetDiffusion.quarter_paths=10", "HetDiffusion.spot_N=20",
                   "HetDiffusion.spot_dt=1e-2")
    report = run_het_diffusion_suite(config)
    passed = {c.name: c.passed for c in report.criteria}
    assert passed["alpha = 1/4 Ito rejects x0 = 0"]
    assert passed["heterogeneous diffusion forms share one Ito drift"]
    assert passed["kinetic energy forms give Ito drift k^2/2"]
    assert report.metrics["kinetic_energy.fehlberg_drift"] == pytest.approx(1.0 / 512.0)
    assert len(report.tables["hitting"]) == 4


def test_alpha_two_blow_up_is_read_off_the_driver():
    config = quick("het_diffusion.cfg", "HetDiffusion.strong_dts=1e-1, 1e-2", "HetDiffusion.strong_paths=20",
                   "HetDiffusion.blowup_N=1000", "HetDiffusion.blowup_dt=1e-4", "HetDiffusion.absorb_N=50",
                   "HetDiffusion.absorb_dt=1e-2", "HetDiffusion.quarter_paths=10", "HetDiffusion.spot_N=20",
                   "HetDiffusion.spot_dt=1e-2", "Criteria.se_width=4")
    report = run_het_diffusion_suite(config)
    passed = {c.name: c.passed for c in report.criteria}
    # P(max_{t <= 1} W_t >= 1) = 2 (1 - Phi(1))
    assert report.metrics["alpha_2.blown_up.oracle"] == pytest.approx(0.31731, abs=1e-5)
    assert passed["alpha_2.blown_up fraction within 4 SE of the oracle"]
    assert 0.0 <= report.metrics["alpha_2.em_blown_up.fraction"] <= 1.0
    hitting = report.tables["hitting"].set_index("alpha")
    assert hitting.loc[2.0, "fraction"] == report.metrics["alpha_2.blown_up.fraction"]


def test_main_writes_outputs_ledger_and_log(tmp_path, capsys):
    code = main(["--seed", "3", "--out", str(tmp_path), "--set", f"Database.ledger={tmp_path / 'runs.db'}",
                 "--set", f"Logging.run_log={tmp_path / 'runs.csv'}", "scaledbm"])
    assert code == 0
    report = json.loads((tmp_path / "scaled_bm" / "report.json").read_text())
    assert report["provenance"]["master_seed"] == 3
    assert (tmp_path / "runs.db").exists()
    assert (tmp_path / "runs.csv").exists()
    assert "scaled_bm: all criteria pass" in capsys.readouterr().out


def test_global_options_precede_the_subcommand():
    args = build_parser().parse_args(["--seed", "5", "--threads", "2", "--set", "A.b=1", "--set", "A.c=2",
                                      "--config", "x.cfg", "--out", "o", "density"])
    assert (args.command, args.seed, args.threads, args.config, args.out) == ("density", 5, 2, "x.cfg", "o")
    assert args.set == ["A.b=1", "A.c=2"]
    assert build_parser().parse_args(["audit"]).set == []
    with pytest.raises(SystemExit):
        build_parser().parse_args(["audit", "--seed", "5"])


def test_main_reruns_are_byte_identical(tmp_path):
    args = ["--set", f"Database.ledger={tmp_path / 'runs.db'}",
            "--set", f"Logging.run_log={tmp_path / 'runs.csv'}"]
    assert main(args + ["--out", str(tmp_path / "a"), "scaledbm"]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "4", "scaledbm"]) == 0
    first = (tmp_path / "a" / "scaled_bm" / "report.json").read_bytes()
    assert first == (tmp_path / "b" / "scaled_bm" / "report.json").read_bytes()


def test_main_exit_codes(tmp_path, capsys):
    assert main(["list-models"]) == 0
    assert "neg_case1_periodic" in capsys.readouterr().out
    assert main(["--config", str(tmp_path / "missing.cfg"), "audit"]) == 1
    assert "Error:" in capsys.readouterr().err
    failing = ["--out", str(tmp_path), "--set", "Criteria.spread_max=0",
               "--set", f"Database.ledger={tmp_path / 'runs.db'}", "--set", f"Logging.run_log={tmp_path / 'runs.csv'}",
               "scaledbm"]
    assert main(failing) == 2


@pytest.mark.slow
@pytest.mark.parametrize("command, config", [
    ("audit", "structural_audit.cfg"),
    ("density", "pde_equivalence_1d.cfg"),
    ("density", "pde_equivalence_2d.cfg"),
    ("density", "density_positive_1d_hk.cfg"),
    ("density", "density_positive_1d_ito.cfg"),
    ("density", "density_positive_2d.cfg"),
    ("density", "density_negative.cfg"),
    ("integrals", "lambda_family.cfg"),
    ("integrals", "fehlberg.cfg"),
    ("integrals", "ho_divergence.cfg"),
    ("integrals", "hk_conversion.cfg"),
    ("hetdiff", "het_diffusion.cfg"),
    ("scaledbm", "scaled_bm.cfg"),
])
def test_golden_configs_pass(command, config, tmp_path):
    code = main(["--config", golden(config), "--out", str(tmp_path),
                 "--set", f"Database.ledger={tmp_path / 'runs.db'}", "--set", f"Logging.run_log={tmp_path / 'runs.csv'}",
                 command])
    assert code == 0
