"""Experiment driver and command line.

Each subcommand runs one experiment from an INI config (see configs/), checks
its criteria, writes report.json / report.md / CSV / SVG into the output
directory and records the run in the SQLite ledger and the CSV run log.

    python -m kinetic.kinetic_harness --config kinetic/configs/structural_audit.cfg audit
    python -m kinetic.kinetic_harness --set Ensemble.N=50000 density
    python -m kinetic.kinetic_harness list-models

Exit code 0 when every criterion passed, 2 when some failed, 1 on errors.
"""

import argparse
import configparser
import datetime
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.stats import norm, poisson

from kinetic import __version__
from kinetic.kinetic_errors import ConfigError, DomainViolation, Error, MissingBounds
from kinetic.kinetic_fokker_planck import (drift_for_ito_form, fick_form,
                                           gaussian_cell_averages,
                                           histogram_density, ito_form,
                                           l1_distance, solve_pde)
from kinetic.kinetic_model_zoo import (MODEL_PRESETS, build_model, list_models,
                                       make_het_diffusion, make_kinetic_energy,
                                       make_scaled_bm)
from kinetic.kinetic_outputs import (ExperimentReport, emit_outputs,
                                     log_run_entry, record_run)
from kinetic.kinetic_sde_engine import (Guards, SamplePath, analytic_path,
                                        euler_maruyama, gaussian_sampler,
                                        interpretation_to_ito, point_sampler,
                                        simulate_ensemble)
from kinetic.kinetic_stoch_integrals import (FEHLBERG, ITO, BrownianPath,
                                             InterpretationTag, Partition,
                                             augmented_diffusion,
                                             by_parts_residual,
                                             conversion_residual,
                                             deterministic_lambda_integral,
                                             fehlberg_residual,
                                             ho_discretization_sum,
                                             lambda_closed_form,
                                             lambda_riemann_sum)
from kinetic.kinetic_tensor_field import (TensorFieldModel, box_grid,
                                          derivative_bound_check,
                                          ellipticity_check, grad_sigma_field,
                                          ito_correction_h, principal_sqrt,
                                          sigma_consistency, sigma_field,
                                          structural_residual,
                                          sylvester_sigma_derivative)

logger = logging.getLogger(__name__)

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_CONFIG = os.path.join(PACKAGE_DIR, "kinetic_config.cfg")
CONFIG_DIR = os.path.join(PACKAGE_DIR, "configs")

# settings that cannot change any result stay out of the config hash
_UNHASHED_SECTIONS = {"Logging", "Database"}
_UNHASHED_KEYS = {"Experiment.threads", "Output.directory", "Output.formats"}

# spawn keys of the random streams derived from the master seed
_KEY_DENSITY = 11
_KEY_LAMBDA = 12
_KEY_FEHLBERG = 13
_KEY_HO = 14
_KEY_HK = 15
_KEY_SCALED = 16
_KEY_HET = 17
_KEY_SYLVESTER = 18

_MISSING = object()


####
# Configuration
####

def _as_int(text):
    value = float(text)
    if not value.is_integer():
        raise ValueError(text)
    return int(value)


def parse_value(text):
    """Typed value of a model parameter: bool, int, float, comma list or string."""
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if "," in text:
        return tuple(parse_value(part) for part in text.split(",") if part.strip())
    for convert in (int, float):
        try:
            return convert(text)
        except ValueError:
            pass
    return text


@dataclass
class ExperimentConfig:
    parser: configparser.ConfigParser
    source: str

    def get(self, section, key, fallback=_MISSING):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        if fallback is _MISSING:
            raise ConfigError(f"missing key '{key}' in section [{section}] of '{self.source}'")
        return fallback

    def _typed(self, section, key, fallback, convert, what):
        if not self.parser.has_option(section, key) and fallback is not _MISSING:
            return fallback
        raw = self.get(section, key)
        try:
            return convert(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = '{raw}' is not a valid {what}") from None

    def get_float(self, section, key, fallback=_MISSING):
        return self._typed(section, key, fallback, float, "number")

    def get_int(self, section, key, fallback=_MISSING):
        return self._typed(section, key, fallback, _as_int, "integer")

    def get_bool(self, section, key, fallback=_MISSING):
        def convert(raw):
            if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "yes", "1")
        return self._typed(section, key, fallback, convert, "boolean")

    def get_list(self, section, key, fallback=_MISSING, convert=str):
        def split(raw):
            return [convert(part.strip()) for part in raw.split(",") if part.strip()]
        return self._typed(section, key, fallback, split, "list")

    @property
    def experiment(self):
        return self.get("Experiment", "name")

    @property
    def subtype(self):
        return self.get("Experiment", "subtype", "")

    @property
    def master_seed(self):
        return self.get_int("Experiment", "master_seed")

    @property
    def threads(self):
        return max(1, self.get_int("Experiment", "threads", 1))

    @property
    def output_dir(self):
        return self.get("Output", "directory", "results")

    @property
    def formats(self):
        return self.get_list("Output", "formats", ["json", "csv", "svg", "md"])

    @property
    def ledger(self):
        return self.get("Database", "ledger", "")

    @property
    def run_log(self):
        return self.get("Logging", "run_log", "")

    @property
    def log_level(self):
        return self.get("Logging", "level", "INFO").upper()

    def model_overrides(self, name):
        section = f"Model.{name}"
        if not self.parser.has_section(section):
            return {}
        return {key: parse_value(value) for key, value in self.parser.items(section)}

    def config_hash(self):
        """sha256 over the sorted section.key=value lines that can influence results."""
        lines = []
        for section in sorted(self.parser.sections()):
            if section in _UNHASHED_SECTIONS:
                continue
            for key, value in sorted(self.parser.items(section)):
                if f"{section}.{key}" not in _UNHASHED_KEYS:
                    lines.append(f"{section}.{key}={value.strip()}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def apply_override(parser, item):
    """Apply one 'section.key=value' override; the section name may itself contain dots."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form section.key=value")
    name, value = item.split("=", 1)
    section, _, key = name.strip().rpartition(".")
    if not section or not key:
        raise ConfigError(f"override '{item}' does not name a section and a key")
    if not parser.has_section(section):
        parser.add_section(section)
    parser.set(section, key, value.strip())


def load_configuration(config_file, overrides=(), seed=None, out=None, threads=None, defaults=DEFAULT_CONFIG):
    """Read the defaults, overlay the experiment file, then apply command-line overrides."""
    for path in (defaults, config_file):
        if path and not os.path.exists(path):
            raise ConfigError(f"Configuration file '{path}' not found.")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read([p for p in (defaults, config_file) if p], encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"Error reading configuration file '{config_file}': {e}") from e
    for item in overrides or ():
        apply_override(parser, item)
    if seed is not None:
        apply_override(parser, f"Experiment.master_seed={seed}")
    if out is not None:
        apply_override(parser, f"Output.directory={out}")
    if threads is not None:
        apply_override(parser, f"Experiment.threads={threads}")
    config = ExperimentConfig(parser, config_file)
    config.experiment
    config.master_seed
    return config


def derived_seed(master_seed, *key):
    """An integer seed of its own for each (experiment stream, index) below the master seed."""
    state = np.random.SeedSequence(entropy=master_seed, spawn_key=key).generate_state(1, dtype=np.uint64)
    return int(state[0])


def loglog_slope(x, y):
    return float(np.polyfit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)[0])


def _new_report(config):
    return ExperimentReport(config.experiment, {
        "config_hash": config.config_hash(),
        "master_seed": config.master_seed,
        "code_version": __version__,
        "subtype": config.subtype,
    })


def _model(config, name):
    return build_model(name, config.model_overrides(name))


####
# Structural audit
####

def _audit_model(model, per_axis, analytic_tol):
    pts = box_grid(model.half_width, per_axis, model.dim)
    sigma_consistency(model, pts)
    lam = structural_residual(model, pts)
    norms = np.linalg.norm(lam, axis=1)
    worst = int(np.argmax(norms))
    closed_gap = np.nan
    if model.closed_form_residual is not None:
        closed_gap = float(np.max(np.abs(lam - model.closed_form_residual(pts))))
    h = ito_correction_h(model, pts)
    fd_model = replace(model, grad_D=None, grad_sigma=None)
    fd_norms = np.linalg.norm(structural_residual(fd_model, pts), axis=1)
    ellip = ellipticity_check(model, pts)
    try:
        bounds = derivative_bound_check(model, pts)
        bound_holds = bounds.holds
        bound_ratio = float(np.max(np.max(bounds.max_abs_derivative, axis=0) / np.maximum(bounds.bound, 1e-300)))
    except MissingBounds:
        bound_holds, bound_ratio = None, np.nan
    return {
        "model": model.name,
        "dim": model.dim,
        "points": pts.shape[0],
        "max_residual": float(norms[worst]),
        "argmax": "(" + ", ".join(f"{v:.6g}" for v in pts[worst]) + ")",
        "closed_form_gap": closed_gap,
        "fd_max_residual": float(np.max(fd_norms)),
        "max_h": float(np.max(np.linalg.norm(h, axis=1))),
        "min_eigenvalue": ellip.min_eigenvalue,
        "alpha": ellip.alpha,
        "ellipticity_holds": ellip.holds,
        "bound_holds": bound_holds,
        "bound_ratio": bound_ratio,
        "verdict": "holds" if norms[worst] <= analytic_tol else "fails",
    }


def _random_spd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + d * np.eye(d)


def sylvester_trials(seed, trials, dims, h=1e-5):
    """Worst reconstruction and finite-difference errors of the Sylvester derivative on random SPD pairs."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_KEY_SYLVESTER,)))
    rows = []
    for d in dims:
        recon = fd = 0.0
        for _ in range(trials):
            D = _random_spd(rng, d)
            S = rng.normal(size=(d, d))
            dD = S + S.T
            sigma = principal_sqrt(D)
            deriv = sylvester_sigma_derivative(D, dD)
            recon = max(recon, np.linalg.norm(sigma @ deriv + deriv @ sigma - dD) / np.linalg.norm(dD))
            fd_est = (principal_sqrt(D + h * dD) - principal_sqrt(D - h * dD)) / (2.0 * h)
            fd = max(fd, np.linalg.norm(fd_est - deriv) / np.linalg.norm(deriv))
        rows.append({"dim": d, "trials": trials, "max_reconstruction": float(recon), "max_fd_relative": float(fd)})
    return pd.DataFrame(rows)


def run_structural_audit(config):
    """Residual of div D = 2 sigma div sigma^T on a grid for every listed model, plus Sylvester trials."""
    report = _new_report(config)
    names = config.get_list("Experiment", "models", list(MODEL_PRESETS))
    per_axis = config.get_int("Grid", "per_axis", 41)
    per_axis_3d = config.get_int("Grid", "per_axis_3d", 11)
    analytic_tol = config.get_float("Criteria", "analytic_tol", 1e-10)
    fd_tol = config.get_float("Criteria", "fd_tol", 1e-6)

    rows = []
    for name in names:
        model = _model(config, name)
        if not isinstance(model, TensorFieldModel):
            raise ConfigError(f"'{name}' is not a tensor model and cannot be audited")
        logger.info("auditing %s", name)
        row = _audit_model(model, per_axis if model.dim <= 2 else per_axis_3d, analytic_tol)
        rows.append({"preset": name, **row})
    table = pd.DataFrame(rows)
    report.tables["structural_audit"] = table
    by_name = {row["preset"]: row for row in rows}
    for row in rows:
        report.metric(f"{row['preset']}.max_residual", row["max_residual"])
        report.metric(f"{row['preset']}.fd_max_residual", row["fd_max_residual"])
        report.metric(f"{row['preset']}.verdict", row["verdict"])

    for name in config.get_list("Criteria", "holds", []):
        row = by_name[name]
        report.check(f"{name} max|Lambda| analytic", row["max_residual"], "<=", analytic_tol)
        report.check(f"{name} max|Lambda| finite differences", row["fd_max_residual"], "<=", fd_tol)
    rtol = config.get_float("Criteria", "expected_rtol", 0.05)
    for key in sorted(config.parser.options("Criteria")) if config.parser.has_section("Criteria") else []:
        if key.startswith("expected."):
            name = key.split(".", 1)[1]
            expected = config.get_float("Criteria", key)
            value = by_name[name]["max_residual"]
            report.metric(f"{name}.expected_max_residual", expected)
            report.check(f"{name} max|Lambda| relative to closed form", abs(value - expected) / expected, "<=", rtol)
        elif key.startswith("fails_above."):
            name = key.split(".", 1)[1]
            report.check(f"{name} max|Lambda|", by_name[name]["max_residual"], ">",
                         config.get_float("Criteria", key))
    for row in rows:
        if np.isfinite(row["closed_form_gap"]):
            report.check(f"{row['model']} closed-form Lambda agreement", row["closed_form_gap"], "<=",
                         config.get_float("Criteria", "closed_form_tol", 1e-10))
    report.check("ellipticity holds on every grid", bool(table["ellipticity_holds"].all()), "==", True)
    declared = [r["bound_holds"] for r in rows if r["bound_holds"] is not None]
    report.check("derivative bounds hold on every grid", all(declared), "==", True)
    report.notes += [f"{r['model']}: no declared derivative bounds" for r in rows if r["bound_holds"] is None]

    trials = config.get_int("Sylvester", "trials", 100)
    if trials > 0:
        syl = sylvester_trials(config.master_seed, trials, config.get_list("Sylvester", "dims", [1, 2, 3, 4], _as_int))
        report.tables["sylvester_trials"] = syl
        recon = report.metric("sylvester.max_reconstruction", float(syl["max_reconstruction"].max()))
        fd = report.metric("sylvester.max_fd_relative", float(syl["max_fd_relative"].max()))
        report.check("Sylvester reconstruction", recon, "<=", config.get_float("Criteria", "sylvester_tol", 1e-9))
        report.check("Sylvester vs finite differences", fd, "<=", config.get_float("Criteria", "sylvester_fd_tol", 1e-5))
    return report


####
# Density cross-validation
####

def expected_histogram_l1(reference, n_samples):
    """Expected L1 distance of an N-sample histogram from its exact cell masses (Poisson approximation)."""
    m = np.clip(reference.values, 0.0, None) * reference.cell_volume * n_samples
    mad = 2.0 * m * poisson.pmf(np.floor(m), m)
    return float(np.sum(mad) / n_samples)


def _solve_reference(form, half_width, cells, dim, std, T, refine):
    u0 = gaussian_cell_averages(half_width, cells * refine, dim, 0.0, std)
    return solve_pde(form, u0, T).coarsen(refine)


def _form_equivalence(config, report, model):
    dim = model.dim
    L = config.get_float("Grid", "half_width", model.half_width)
    cells_list = config.get_list("Grid", "cells_list", [64, 128], _as_int)
    std = config.get_float("Ensemble", "initial_std", 0.3)
    T = config.get_float("Ensemble", "T", 0.25)
    rows = []
    for cells in cells_list:
        u0 = gaussian_cell_averages(L, cells, dim, 0.0, std)
        fick = solve_pde(fick_form(model), u0, T)
        ito = solve_pde(ito_form(model), u0, T)
        rows.append({"cells": cells, "dx": 2.0 * L / cells, "l1_gap": l1_distance(fick, ito),
                     "min_fick": float(np.min(fick.values)), "min_ito": float(np.min(ito.values)),
                     "boundary_mass": fick.boundary_mass()})
        report.densities[f"fick_{cells}"] = fick
    table = pd.DataFrame(rows)
    report.tables["form_equivalence"] = table
    report.plots["form_gap_convergence"] = ("form_equivalence", "dx", ["l1_gap"], True)
    gap = report.metric("l1_gap", float(table["l1_gap"].iloc[-1]))
    report.check("fick vs ito_standard L1 gap", gap, "<", config.get_float("Criteria", "gap_max", 2e-3))
    if len(rows) > 1:
        a, b = rows[-2], rows[-1]
        order = report.metric("observed_order", float(np.log(a["l1_gap"] / b["l1_gap"]) / np.log(b["cells"] / a["cells"])))
        report.check("observed refinement order", order, ">=", config.get_float("Criteria", "order_min", 1.0))
    report.metric("min_fick_value", float(table["min_fick"].min()))
    report.check("fick positivity", float(table["min_fick"].min()), ">=", -1e-12)
    return report


def run_density_crossval(config):
    """Monte Carlo histogram of an interpreted SDE against the fick and ito_standard PDE solutions."""
    report = _new_report(config)
    model = _model(config, config.get("Experiment", "model"))
    if not isinstance(model, TensorFieldModel):
        raise ConfigError(f"'{model.name}' is not a tensor model")
    if config.subtype == "form_equivalence":
        return _form_equivalence(config, report, model)

    dim = model.dim
    L = config.get_float("Grid", "half_width", model.half_width)
    cells = config.get_int("Grid", "cells", 64)
    refine = config.get_int("Grid", "refine", 4)
    if refine < 2 or refine % 2:
        raise ConfigError("[Grid] refine must be an even factor >= 2")
    N = config.get_int("Ensemble", "N")
    shards = config.get_int("Ensemble", "shards", 10)
    if N % shards:
        raise ConfigError(f"[Ensemble] N = {N} must be a multiple of shards = {shards}")
    dt = config.get_float("Ensemble", "dt", 1e-3)
    T = config.get_float("Ensemble", "T", 0.25)
    std = config.get_float("Ensemble", "initial_std", 0.3)
    tag = InterpretationTag.from_name(config.get("Ensemble", "interpretation", "hk"))
    drift_mode = config.get("Ensemble", "drift", "raw")
    if drift_mode not in ("raw", "ito_corrected"):
        raise ConfigError("[Ensemble] drift must be 'raw' or 'ito_corrected'")

    sim_model = model if drift_mode == "raw" else replace(model, drift=drift_for_ito_form(model))
    sde = interpretation_to_ito(sim_model, tag)
    # the ito_standard reference always carries the effective Ito drift of the simulated equation
    forms = {"fick": fick_form(model), "ito_standard": ito_form(model, drift=sde.drift_eff)}
    references, gaps = {}, {}
    for key, form in forms.items():
        logger.info("solving the %s reference for %s", key, model.name)
        fine = _solve_reference(form, L, cells, dim, std, T, refine)
        half = _solve_reference(form, L, cells, dim, std, T, refine // 2)
        references[key] = fine
        gaps[key] = report.metric(f"pde_gap.{key}", l1_distance(fine, half))
        report.metric(f"boundary_mass.{key}", fine.boundary_mass())
        report.metric(f"min_value.{key}", float(np.min(fine.values)))
    report.metric("l1.fick_vs_ito_standard", l1_distance(references["fick"], references["ito_standard"]))

    shard_size = N // shards
    ens = simulate_ensemble(sde, gaussian_sampler(np.zeros(dim), std), N, derived_seed(config.master_seed, _KEY_DENSITY),
                            T, dt, Guards(), config.threads, shard_size)
    report.metric("tally", ens.tally)
    hist = histogram_density(ens.terminal, L, cells)
    report.metric("leaked_fraction", hist.leaked_fraction)
    shard_hists = [histogram_density(ens.terminal[i * shard_size:(i + 1) * shard_size], L, cells)
                   for i in range(shards)]
    shard_rows = []
    l1_full = {}
    for key, ref in references.items():
        per_shard = np.array([l1_distance(h, ref) for h in shard_hists])
        shard_rows.append(per_shard)
        full = l1_full[key] = report.metric(f"l1.{key}", l1_distance(hist, ref))
        mean, sd = float(np.mean(per_shard)), float(np.std(per_shard, ddof=1))
        report.metric(f"shard_mean.{key}", mean)
        report.metric(f"shard_sd.{key}", sd)
        bootstrap_floor = mean / np.sqrt(shards)
        poisson_floor = expected_histogram_l1(ref, N)
        report.metric(f"bootstrap_floor.{key}", bootstrap_floor)
        report.metric(f"poisson_floor.{key}", poisson_floor)
        report.metric(f"sampling_bound.{key}",
                      max(bootstrap_floor, poisson_floor) + 2.0 * sd / np.sqrt(shards) + gaps[key])
        logger.info("L1(histogram, %s) = %.4g", key, full)
    report.tables["shard_l1"] = pd.DataFrame({"shard": np.arange(shards), "l1_fick": shard_rows[0],
                                              "l1_ito_standard": shard_rows[1]})
    report.densities.update({"histogram": hist, "fick": references["fick"], "ito_standard": references["ito_standard"]})

    for key in config.get_list("Criteria", "match", ["fick"]):
        if key not in forms:
            raise ConfigError(f"[Criteria] match names unknown PDE form '{key}'")
        report.check(f"L1(histogram, {key}) within sampling error", l1_full[key], "<=",
                     report.metrics[f"sampling_bound.{key}"])
    ratio_min = config.get_float("Criteria", "ratio_min", None)
    if ratio_min is not None:
        ratio = report.metric("l1_ratio.fick_over_ito_standard", l1_full["fick"] / l1_full["ito_standard"])
        report.check("fick mismatch over ito_standard mismatch", ratio, ">=", ratio_min)
    report.check("histogram leakage", hist.leaked_fraction, "<=", config.get_float("Criteria", "leak_max", 1e-3))
    return report


####
# Integral convergence studies
####

def _path_seeds(config, key, count):
    return [derived_seed(config.master_seed, key, i) for i in range(count)]


def _lambda_family(config, report):
    tags = [InterpretationTag.from_name(v) for v in
            config.get_list("Integrals", "interpretations", ["ito", "stratonovich", "fehlberg", "hk"])]
    T = config.get_float("Integrals", "T", 1.0)
    ns = config.get_list("Integrals", "n_values", [2 ** k for k in range(8, 15)], _as_int)
    seeds = config.get_int("Integrals", "seeds", 200)
    n_max = max(ns)
    errors = np.empty((len(tags), len(ns), seeds))
    for s, seed in enumerate(_path_seeds(config, _KEY_LAMBDA, seeds)):
        W = BrownianPath.generate(Partition.uniform(0.0, T, n_max), seed)
        for b, n in enumerate(ns):
            Wn = W.coarsen(n_max // n)
            for a, tag in enumerate(tags):
                errors[a, b, s] = abs(lambda_riemann_sum(lambda w: w, Wn, tag) - lambda_closed_form(Wn, tag.lam))
    medians = np.median(errors, axis=2)
    table = pd.DataFrame({"n": ns})
    for a, tag in enumerate(tags):
        table[tag.label()] = medians[a]
    report.tables["lambda_family"] = table
    report.plots["lambda_family_convergence"] = ("lambda_family", "n", [t.label() for t in tags], True)
    tol = config.get_float("Criteria", "median_max", 0.02)
    lo, hi = config.get_float("Criteria", "slope_min", -0.65), config.get_float("Criteria", "slope_max", -0.35)
    for a, tag in enumerate(tags):
        final = report.metric(f"{tag.label()}.median_error", float(medians[a, -1]))
        slope = report.metric(f"{tag.label()}.slope", loglog_slope(ns, medians[a]))
        report.check(f"{tag.label()} median error at n = {n_max}", final, "<", tol)
        report.check(f"{tag.label()} log-log slope", slope, "in", [lo, hi])


def _fehlberg(config, report):
    T = config.get_float("Integrals", "T", 1.0)
    ns = config.get_list("Integrals", "n_values", [2 ** 8, 2 ** 10, 2 ** 12, 2 ** 14], _as_int)
    seeds = config.get_int("Integrals", "seeds", 200)
    n_max = max(ns)
    residuals = np.empty((seeds, len(ns)))
    for s, seed in enumerate(_path_seeds(config, _KEY_FEHLBERG, seeds)):
        W = BrownianPath.generate(Partition.uniform(0.0, T, n_max), seed)
        for b, n in enumerate(ns):
            residuals[s, b] = abs(fehlberg_residual(np.square, lambda w: 2.0 * w, W.coarsen(n_max // n)))
    medians = np.median(residuals, axis=0)
    report.tables["fehlberg_identity"] = pd.DataFrame({"n": ns, "median_residual": medians,
                                                       "mean_residual": residuals.mean(axis=0)})
    report.plots["fehlberg_convergence"] = ("fehlberg_identity", "n", ["median_residual"], True)
    final = report.metric("median_residual", float(medians[-1]))
    report.metric("slope", loglog_slope(ns, medians))
    improved = report.metric("fraction_improved", float(np.mean(residuals[:, -1] < residuals[:, 0])))
    report.check(f"median residual at n = {n_max}", final, "<", config.get_float("Criteria", "median_max", 1e-2))
    report.check("median residual strictly decreasing", bool(np.all(np.diff(medians) < 0)), "==", True)
    report.check("seeds improving from coarsest to finest", improved, ">=",
                 config.get_float("Criteria", "improved_min", 0.8))


def _dyadic_without_zero(W, n):
    """The path on {k/n : k = 1..n}, taken from a path on {k/N : k = 1..N}."""
    stride = W.partition.times.size // n
    return BrownianPath(Partition(W.partition.times[stride - 1::stride]), W.values[stride - 1::stride], W.seed)


def _ho_divergence(config, report):
    seeds_zero = config.get_int("Integrals", "seeds_zero", 1000)
    n_zero = config.get_int("Integrals", "n_zero", 64)
    at_first = 0
    for seed in _path_seeds(config, _KEY_HO, seeds_zero):
        result = ho_discretization_sum(BrownianPath.generate(Partition.uniform(0.0, 1.0, n_zero), seed))
        at_first += int(result.overflow and result.index == 1)
    frac = report.metric("overflow_at_first_step_fraction", at_first / seeds_zero)
    report.check("Overflow at j = 1 on grids containing t = 0", frac, "==", 1.0)

    ns = config.get_list("Integrals", "n_values", [2 ** k for k in range(6, 17, 2)], _as_int)
    seeds = config.get_int("Integrals", "seeds", 200)
    n_max = max(ns)
    inverse = np.empty((seeds, len(ns)))
    max_term = np.empty_like(inverse)
    overflow = np.empty_like(inverse)
    for s, seed in enumerate(_path_seeds(config, _KEY_HO + 100, seeds)):
        W = BrownianPath.generate(Partition(np.arange(1, n_max + 1) / n_max), seed)
        for b, n in enumerate(ns):
            result = ho_discretization_sum(_dyadic_without_zero(W, n))
            inverse[s, b] = result.max_inverse_denominator
            max_term[s, b] = result.max_term
            overflow[s, b] = result.overflow
    table = pd.DataFrame({"n": ns, "median_max_inverse_denominator": np.median(inverse, axis=0),
                          "median_max_term": np.median(max_term, axis=0), "overflow_fraction": overflow.mean(axis=0)})
    report.tables["ho_divergence"] = table
    report.plots["ho_growth"] = ("ho_divergence", "n", ["median_max_inverse_denominator", "median_max_term"], True)
    growth = report.metric("inverse_denominator_growth",
                           float(table["median_max_inverse_denominator"].iloc[-1] /
                                 table["median_max_inverse_denominator"].iloc[0]))
    report.metric("max_term_ratio", float(table["median_max_term"].iloc[-1] / table["median_max_term"].iloc[0]))
    report.notes.append("the median max-term magnitude is informational; its scale shrinks as the grid is refined")
    report.check(f"growth of median max 1/|W| from n = {min(ns)} to n = {n_max}", growth, ">=",
                 config.get_float("Criteria", "growth_min", 10.0))


def _hk_conversion(config, report):
    model = _model(config, config.get("Experiment", "model", "case2_isotropic"))
    d = model.dim
    sde = interpretation_to_ito(model, ITO)
    T = config.get_float("Integrals", "T", 1.0)
    ns = config.get_list("Integrals", "n_values", [2 ** 8, 2 ** 10, 2 ** 12], _as_int)
    seeds = config.get_int("Integrals", "seeds", 40)
    n_max = max(ns)

    def psi(states, times):
        return sigma_field(model, states)

    def dpsi(states, times):
        return grad_sigma_field(model, states)

    def psi_aug(states, times):
        out = np.zeros((states.shape[0], 2 * d, 2 * d))
        out[:, :d, d:] = sigma_field(model, states[:, :d])
        return out

    def cov_aug(states, times):
        return augmented_diffusion(sigma_field(model, states[:, :d]))

    res = np.empty((3, seeds, len(ns)))
    aug_gap = 0.0
    for s, seed in enumerate(_path_seeds(config, _KEY_HK, seeds)):
        W = BrownianPath.generate(Partition.uniform(0.0, T, n_max), seed, dim=d)
        for b, n in enumerate(ns):
            Wn = W.coarsen(n_max // n)
            X = euler_maruyama(sde, np.zeros(d), Wn)
            own = conversion_residual(psi, X, lambda y, t: model.diff_tensor(y), dPsi=dpsi)
            driven = conversion_residual(psi, X, lambda y, t: np.swapaxes(sigma_field(model, y), -1, -2),
                                         driver=Wn, dPsi=dpsi)
            pair = SamplePath(Wn.partition, np.hstack([X.states, Wn.values]), Wn)
            aug = conversion_residual(psi_aug, pair, cov_aug)
            aug_gap = max(aug_gap, float(np.max(np.abs(aug[:d] - driven))))
            res[:, s, b] = [np.linalg.norm(own), np.linalg.norm(driven), np.linalg.norm(aug)]
    medians = np.median(res, axis=1)
    labels = ["self", "driver", "augmented"]
    table = pd.DataFrame({"n": ns, **{f"median_{lab}": medians[i] for i, lab in enumerate(labels)}})
    report.tables["hk_conversion"] = table
    report.plots["hk_conversion_convergence"] = ("hk_conversion", "n", [f"median_{lab}" for lab in labels], True)
    tol = config.get_float("Criteria", "median_max", 0.05)
    slope_max = config.get_float("Criteria", "slope_max", -0.3)
    for i, lab in enumerate(labels):
        report.check(f"{lab} conversion residual at n = {n_max}", report.metric(f"{lab}.median_residual",
                                                                              float(medians[i, -1])), "<", tol)
        report.check(f"{lab} conversion residual slope", report.metric(f"{lab}.slope", loglog_slope(ns, medians[i])),
                     "<=", slope_max)
    report.check("augmented pair reproduces the driven correction", report.metric("augmented_gap", aug_gap), "<=",
                 config.get_float("Criteria", "augmented_tol", 1e-6))


def run_integral_convergence(config):
    """Residual-versus-n tables for one family of Riemann-sum identities."""
    report = _new_report(config)
    runners = {"lambda_family": _lambda_family, "fehlberg": _fehlberg, "ho_divergence": _ho_divergence,
               "hk_conversion": _hk_conversion}
    if config.subtype == "deterministic":
        return run_scaled_bm(config)
    if config.subtype not in runners:
        raise ConfigError(f"unknown integrals subtype '{config.subtype}'; expected one of "
                          f"{', '.join(sorted(runners) + ['deterministic'])}")
    runners[config.subtype](config, report)
    return report


def run_scaled_bm(config):
    """Interpretation independence and integration by parts for F(t) dW on one fine realization."""
    report = _new_report(config)
    families = config.get_list("Integrals", "families", ["sqrt"])
    a = config.get_float("Integrals", "a", 0.0)
    b = config.get_float("Integrals", "b", 1.0)
    n = config.get_int("Integrals", "n", 2 ** 16)
    lams = config.get_list("Integrals", "lambdas", [0.0, 0.25, 0.5, FEHLBERG.lam, 0.75, 1.0], float)
    W = BrownianPath.generate(Partition.uniform(a, b, n), derived_seed(config.master_seed, _KEY_SCALED))
    tol = config.get_float("Criteria", "spread_max", 1e-3)
    bp_tol = config.get_float("Criteria", "by_parts_max", 1e-3)
    rows = []
    for family in families:
        spec = make_scaled_bm(family, a, b, **config.model_overrides(f"scaled_bm_{family}"))
        F = spec.time_amp
        values = {lam: deterministic_lambda_integral(F, W, lam) for lam in lams}
        base = values[lams[0]]
        spread = max(abs(v - base) for v in values.values())
        by_parts = max(abs(by_parts_residual(F, W, lam)) for lam in lams)
        closed = spec.analytic_solution(0.0, W.partition.times, W.at_grid())[-1]
        for lam in lams:
            rows.append({"family": family, "lambda": lam, "integral": values[lam],
                         "by_parts_residual": by_parts_residual(F, W, lam)})
        report.metric(f"{family}.total_variation", spec.params["total_variation"])
        report.metric(f"{family}.solution_gap", abs(closed - base))
        report.check(f"{family} max over lambda of |I_lambda - I_0|", report.metric(f"{family}.spread", spread), "<", tol)
        report.check(f"{family} integration-by-parts residual", report.metric(f"{family}.by_parts", by_parts), "<",
                     bp_tol)
    report.tables["scaled_bm"] = pd.DataFrame(rows)
    return report


####
# Heterogeneous diffusion
####

def _het_sde(alpha, k, form):
    spec = make_het_diffusion(alpha, k, form)
    return spec, interpretation_to_ito(spec, InterpretationTag.from_name(spec.form_lambda))


def _within_se(report, name, fraction, oracle, N, width):
    se = np.sqrt(max(oracle * (1.0 - oracle), 1e-12) / N)
    report.metric(f"{name}.fraction", fraction)
    report.metric(f"{name}.oracle", oracle)
    report.metric(f"{name}.standard_error", float(se))
    return report.check(f"{name} fraction within {width:g} SE of the oracle", abs(fraction - oracle) / se, "<=", width)


def _form_agreement(report, k, tol):
    x = np.linspace(0.1, 4.0, 40)[:, None]
    gap = 0.0
    for alpha in (1.0, 2.0, 0.5, 0.75, 0.25):
        ref = _het_sde(alpha, k, "ito")[1].drift_eff(x)
        for form in ("stratonovich", "fehlberg", "hk"):
            other = _het_sde(alpha, k, form)[1].drift_eff(x)
            gap = max(gap, float(np.max(np.abs(other - ref) / (1.0 + np.abs(ref)))))
    report.check("heterogeneous diffusion forms share one Ito drift", report.metric("het_form_gap", gap), "<=", tol)
    gap = 0.0
    for form in ("ito", "stratonovich", "fehlberg", "hk"):
        spec = make_kinetic_energy(k, form)
        drift = interpretation_to_ito(spec, InterpretationTag.from_name(spec.form_lambda)).drift_eff(x)
        gap = max(gap, float(np.max(np.abs(drift - 0.5 * k ** 2))))
    report.metric("kinetic_energy.fehlberg_drift", make_kinetic_energy(k, "fehlberg").params["fehlberg_drift"])
    report.check("kinetic energy forms give Ito drift k^2/2", report.metric("kinetic_energy_form_gap", gap), "<=", tol)


def run_het_diffusion_suite(config):
    """dX = k X^alpha dW across exponents: strong error, blow-up, absorption and domain checks."""
    report = _new_report(config)
    sec = "HetDiffusion"
    k = config.get_float(sec, "k", 1.0)
    x0 = config.get_float(sec, "x0", 1.0)
    T = config.get_float(sec, "T", 1.0)
    width = config.get_float("Criteria", "se_width", 3.0)
    threads = config.threads
    def seed(i):
        return derived_seed(config.master_seed, _KEY_HET, i)

    _form_agreement(report, k, config.get_float("Criteria", "form_tol", 1e-12))

    # alpha = 1: strong error against x0 exp(k W_T) on the same driver
    dts = config.get_list(sec, "strong_dts", [1e-2, 1e-3, 1e-4], float)
    paths = config.get_int(sec, "strong_paths", 200)
    spec, sde = _het_sde(1.0, k, "ito")
    rows = []
    for dt in dts:
        ens = simulate_ensemble(sde, point_sampler([x0]), paths, seed(0), T, dt, Guards(floor=0.0), threads)
        exact = spec.analytic_solution(x0, None, ens.driver_terminal[:, 0])
        rows.append({"dt": ens.dt, "n": ens.n_steps, "strong_error": float(np.mean(np.abs(ens.terminal[:, 0] - exact)))})
    strong = pd.DataFrame(rows)
    report.tables["strong_error"] = strong
    report.plots["strong_error_convergence"] = ("strong_error", "n", ["strong_error"], True)
    slope = report.metric("alpha_1.strong_slope", loglog_slope(strong["n"], strong["strong_error"]))
    report.check("alpha = 1 strong error slope", slope, "in",
                 [config.get_float("Criteria", "slope_min", -0.65), config.get_float("Criteria", "slope_max", -0.35)])

    hits = []
    # alpha = 2: the solution blows up at the first time W reaches 1/(x0 k). EM only trips
    # the X_MAX guard for crossings well before T, so the event is read off the driver.
    N = config.get_int(sec, "blowup_N", 4000)
    dt = config.get_float(sec, "blowup_dt", 1e-4)
    _, sde = _het_sde(2.0, k, "ito")
    ens = simulate_ensemble(sde, point_sampler([x0]), N, seed(1), T, dt, Guards(), threads)
    level = 1.0 / (x0 * k)
    oracle = 2.0 * (1.0 - norm.cdf(level / np.sqrt(T)))
    crossed = ens.driver_max[:, 0] >= level
    frac = float(np.mean(crossed))
    _within_se(report, "alpha_2.blown_up", frac, oracle, N, width)
    report.metric("alpha_2.em_blown_up.fraction", ens.fraction("blown_up"))
    report.metric("alpha_2.matched_hits", float(np.mean((ens.status == 1) == crossed)))
    hits.append({"alpha": 2.0, "event": "blown_up", "fraction": frac, "oracle": oracle, "paths": N})

    # alpha = 1/2 and 3/4: absorption at zero
    N = config.get_int(sec, "absorb_N", 4000)
    dt = config.get_float(sec, "absorb_dt", 1e-4)
    for alpha, barrier in ((0.5, 2.0 * np.sqrt(x0) / k), (0.75, 4.0 * x0 ** 0.25 / k)):
        _, sde = _het_sde(alpha, k, "ito")
        ens = simulate_ensemble(sde, point_sampler([x0]), N, seed(2), T, dt, Guards(floor=0.0), threads)
        oracle = 2.0 * norm.cdf(-barrier / np.sqrt(T))
        frac = ens.fraction("absorbed")
        label = f"alpha_{alpha:g}.absorbed"
        if alpha == 0.5:
            _within_se(report, label, frac, oracle, N, width)
        else:
            report.metric(f"{label}.fraction", frac)
            report.metric(f"{label}.oracle", oracle)
        hits.append({"alpha": alpha, "event": "absorbed", "fraction": frac, "oracle": oracle, "paths": N})
        reflected = simulate_ensemble(sde, point_sampler([x0]), N, seed(2), T, dt,
                                      Guards(floor=0.0, floor_mode="reflect"), threads)
        report.metric(f"alpha_{alpha:g}.reflected_mean", float(np.mean(reflected.terminal[:, 0])))

    # alpha = 1/4: the Ito form cannot start at zero; positive starts cease to exist at the first zero
    spec = make_het_diffusion(0.25, k, "ito")
    probe = BrownianPath.generate(Partition.uniform(0.0, T, 1000), seed(3))
    try:
        analytic_path(spec, 0.0, probe)
        raised = False
    except DomainViolation as e:
        raised = True
        report.notes.append(f"alpha = 1/4, x0 = 0: {e}")
    report.check("alpha = 1/4 Ito rejects x0 = 0", raised, "==", True)
    stops = config.get_int(sec, "quarter_paths", 1000)
    ended = sum(analytic_path(spec, x0, BrownianPath.generate(Partition.uniform(0.0, T, 1000), seed(10 + i))).status
                == "blown_up" for i in range(stops))
    oracle = 2.0 * norm.cdf(-4.0 * x0 ** 0.75 / (3.0 * k * np.sqrt(T)))
    report.metric("alpha_0.25.ceased.fraction", ended / stops)
    report.metric("alpha_0.25.ceased.oracle", oracle)
    hits.append({"alpha": 0.25, "event": "blown_up", "fraction": ended / stops, "oracle": oracle, "paths": stops})
    report.tables["hitting"] = pd.DataFrame(hits)

    # Fehlberg-form spot check against the Ito oracle on surviving paths
    N = config.get_int(sec, "spot_N", 2000)
    dt = config.get_float(sec, "spot_dt", 1e-3)
    for alpha in (0.5, 0.75):
        spec, sde = _het_sde(alpha, k, "fehlberg")
        ens = simulate_ensemble(sde, point_sampler([x0]), N, seed(4), T, dt, Guards(floor=0.0), threads)
        alive = ens.status == 0
        exact = spec.analytic_solution(x0, None, ens.driver_terminal[alive, 0])
        report.metric(f"alpha_{alpha:g}.fehlberg_mean_abs_error",
                      float(np.mean(np.abs(ens.terminal[alive, 0] - exact))) if alive.any() else float("nan"))
    return report


####
# Command line
####

SUBCOMMANDS = {
    "audit": (run_structural_audit, "structural_audit.cfg", "structural-condition audit of registered models"),
    "density": (run_density_crossval, "density_positive_1d_hk.cfg", "Monte Carlo vs Fokker-Planck densities"),
    "integrals": (run_integral_convergence, "lambda_family.cfg", "Riemann-sum convergence studies"),
    "hetdiff": (run_het_diffusion_suite, "het_diffusion.cfg", "heterogeneous diffusion suite"),
    "scaledbm": (run_scaled_bm, "scaled_bm.cfg", "scaled Brownian motion checks"),
}


def setup_logging(level):
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def build_parser():
    # global options go before the subcommand: --seed 3 scaledbm
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (default: the subcommand's golden config)")
    common.add_argument("--seed", type=int, help="master seed, overrides [Experiment] master_seed")
    common.add_argument("--out", help="output directory, overrides [Output] directory")
    common.add_argument("--threads", type=int, help="worker threads for ensembles (results do not depend on it)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; may be repeated")
    parser = argparse.ArgumentParser(
        description="Verify noise interpretations: structural audits, density cross-validation and "
                    "stochastic-integral convergence studies.",
        formatter_class=argparse.RawDescriptionHelpFormatter, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, text) in SUBCOMMANDS.items():
        sub.add_parser(name, help=text)
    sub.add_parser("list-models", help="list registered model presets")
    return parser


def run_experiment(command, config):
    runner = SUBCOMMANDS[command][0]
    start = datetime.datetime.now()
    report = runner(config)
    end = datetime.datetime.now()
    out_dir = os.path.join(config.output_dir, config.experiment)
    emit_outputs(report, config.formats, out_dir)
    if config.ledger:
        record_run(report, config.ledger)
    if config.run_log:
        log_run_entry(config.run_log, report, start, end)
    return report


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "list-models":
        for name, kind, text in list_models():
            print(f"{name:22s} {kind:7s} {text}")
        return 0
    config_file = args.config or os.path.join(CONFIG_DIR, SUBCOMMANDS[args.command][1])
    try:
        config = load_configuration(config_file, args.set, seed=args.seed, out=args.out, threads=args.threads)
        setup_logging(config.log_level)
        report = run_experiment(args.command, config)
    except (Error, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    verdict = "all criteria pass" if report.all_passed else "some criteria fail"
    print(f"{report.experiment}: {verdict} ({sum(c.passed for c in report.criteria)}/{len(report.criteria)})")
    return 0 if report.all_passed else 2


if __name__ == "__main__":
    sys.exit(main())
