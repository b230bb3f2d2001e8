"""
Test 08: Pipeline and Command Line

Validates the batch pipeline and runner.py:
- Configs are schema-checked and errors carry a JSON path
- simulate is byte-reproducible and the manifest guards its files
- report flags unconverged powers and sets the exit code
"""

import copy
import dataclasses
import json
import shutil

import numpy as np
import pandas as pd
import pytest

import runner
from hbtkit.config import config_from_dict, load_config, parse_duration
from hbtkit.errors import ConfigError, ManifestError
from hbtkit.pipeline import (
    MANIFEST,
    REPORT,
    Report,
    cmd_analyze,
    cmd_simulate,
    fit_name,
    g2_name,
    load_histogram,
    load_manifest,
    load_report,
    ttg_name,
)

from .conftest import load_fixture, make_config, make_saturation_points


def sweep_document(outputs, **scenario) -> dict:
    """Helper: the fixture sweep, bright enough for every power to fit."""
    document = copy.deepcopy(load_fixture("valid_config.json"))
    document["outputs"] = str(outputs)
    document["scenario"].update({"collection_efficiency": 0.2, "duration_ps": "4s"}, **scenario)
    return document


def write_config(directory, document) -> str:
    path = directory / "config.json"
    path.write_text(json.dumps(document, indent=2), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    """One full run of the four-power sweep, shared by the read-only tests."""
    directory = tmp_path_factory.mktemp("sweep")
    config_path = write_config(directory, sweep_document(directory / "out"))
    code = runner.main(["run", "--config", config_path])
    return directory, config_path, code


class TestConfig:
    """
    Tests config loading and validation.
    """

    def test_valid_fixture(self, valid_config):
        """The fixture config parses with durations converted to ps."""
        config = config_from_dict(valid_config)
        assert config.powers_uW == (0.3, 0.6, 1.0, 1.5)
        assert config.tau_max_ps == 10_000_000
        assert config.bin_width_ps == 100_000
        assert config.scenario.duration_ps == 5 * 10**12
        assert config.scenario.detector.dead_time_ps == 50_000
        assert config.budget == (0.42, 0.83)

    @pytest.mark.parametrize(
        "fixture, path",
        [
            ("invalid_config_empty_powers.json", "$.powers_uW"),
            ("invalid_config_negative_power.json", "$.powers_uW[1]"),
            ("invalid_config_bad_duration.json", "$.scenario.duration_ps"),
            ("invalid_config_window.json", "$.correlation.tau_max_ps"),
        ],
    )
    def test_invalid_fixtures(self, fixture: str, path: str):
        """Each invalid fixture is rejected at the offending field."""
        with pytest.raises(ConfigError) as excinfo:
            config_from_dict(load_fixture(fixture))
        assert excinfo.value.path == path

    def test_unknown_key(self, valid_config):
        """Typos are not silently ignored."""
        valid_config["correlaton"] = {}
        with pytest.raises(ConfigError):
            config_from_dict(valid_config)

    def test_scenario_domain_error(self, valid_config):
        """A physically invalid scenario is reported as a config error."""
        valid_config["scenario"]["collection_efficiency"] = 1.5
        with pytest.raises(ConfigError) as excinfo:
            config_from_dict(valid_config)
        assert excinfo.value.path.startswith("$.scenario")

    def test_relative_outputs(self, tmp_path, valid_config):
        """Relative output folders resolve next to the config file."""
        path = write_config(tmp_path, valid_config)
        assert load_config(path).outputs == tmp_path / "out"

    def test_missing_and_malformed_file(self, tmp_path):
        """Unreadable config files are config errors."""
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(bad)

    def test_power_seeds_distinct(self, tmp_path):
        """Every power gets its own sub-seed."""
        config = make_config(tmp_path)
        seeds = {config.scenario_for(i).seed for i in range(len(config.powers_uW))}
        assert len(seeds) == len(config.powers_uW)


class TestDurations:
    """
    Tests duration parsing.
    """

    @pytest.mark.parametrize(
        "value, expected",
        [(1234, 1234), ("10ns", 10_000), ("10us", 10_000_000), ("600s", 600 * 10**12), (" 5 ms ", 5 * 10**9), ("42", 42)],
    )
    def test_units(self, value, expected: int):
        """Suffixes scale to picoseconds; bare numbers are picoseconds."""
        assert parse_duration(value) == expected

    @pytest.mark.parametrize("value", ["5 minutes", "1.5us", "-3ns", True, -1])
    def test_rejected(self, value):
        """Fractions, negatives, booleans and unknown units are rejected."""
        with pytest.raises(ConfigError):
            parse_duration(value, "$.x")


class TestSimulateStage:
    """
    Tests the simulate stage and its manifest.
    """

    def test_files_and_manifest(self, tmp_path):
        """Four powers give eight .ttg files listed with digests and counts."""
        config = make_config(tmp_path / "out", duration_ps="200ms")
        cmd_simulate(config)
        manifest = load_manifest(config)
        assert len(manifest["powers"]) == 4
        assert len(list(config.outputs.glob("*.ttg"))) == 8
        entry = manifest["powers"][2]
        assert entry["files"]["ch1"]["name"] == ttg_name(2, 1)
        assert entry["pump_uW"] == 1.0
        assert entry["background_cps"] > 0

    def test_byte_reproducible(self, tmp_path):
        """Same config, same seed: identical bytes, for any n_jobs."""
        config = make_config(tmp_path / "a", duration_ps="200ms")
        cmd_simulate(config)
        other = dataclasses.replace(config, outputs=tmp_path / "b", n_jobs=2)
        cmd_simulate(other)
        names = sorted(p.name for p in config.outputs.iterdir())
        assert names == sorted(p.name for p in other.outputs.iterdir())
        for name in names:
            assert (config.outputs / name).read_bytes() == (other.outputs / name).read_bytes(), name

    def test_seed_changes_output(self, tmp_path):
        """A different master seed gives different tags."""
        a = make_config(tmp_path / "a", duration_ps="100ms")
        b = make_config(tmp_path / "b", seed=7, duration_ps="100ms")
        cmd_simulate(a)
        cmd_simulate(b)
        name = ttg_name(0, 0)
        assert (a.outputs / name).read_bytes() != (b.outputs / name).read_bytes()

    def test_missing_file_named(self, tmp_path):
        """analyze names a deleted input file."""
        config = make_config(tmp_path / "out", duration_ps="100ms")
        cmd_simulate(config)
        (config.outputs / ttg_name(2, 1)).unlink()
        with pytest.raises(ManifestError, match=ttg_name(2, 1)):
            cmd_analyze(config)

    def test_tampered_file_detected(self, tmp_path):
        """A modified .ttg no longer matches its digest."""
        config = make_config(tmp_path / "out", duration_ps="100ms")
        cmd_simulate(config)
        path = config.outputs / ttg_name(0, 0)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ManifestError, match="digest"):
            cmd_analyze(config)

    def test_manifest_power_count(self, tmp_path):
        """A manifest from a different sweep is rejected."""
        config = make_config(tmp_path / "out", duration_ps="100ms")
        cmd_simulate(config)
        with pytest.raises(ManifestError):
            load_manifest(dataclasses.replace(config, powers_uW=(0.3, 0.6)))

    def test_missing_manifest(self, tmp_path):
        """analyze before simulate reports the missing manifest."""
        with pytest.raises(ManifestError, match=MANIFEST):
            cmd_analyze(make_config(tmp_path / "empty"))


class TestFullRun:
    """
    Tests analyze and report on the shared sweep.
    """

    def test_exit_code_and_artifacts(self, sweep):
        """A clean sweep exits 0 and leaves every artifact."""
        directory, _, code = sweep
        out = directory / "out"
        assert code == 0
        for i in range(4):
            assert (out / g2_name(i)).exists()
            assert (out / fit_name(i)).exists()
        assert (out / REPORT).exists()

    def test_report_contents(self, sweep):
        """The report has one row per power and a lifetime near 1.61 us."""
        directory, _, _ = sweep
        report = load_report(directory / "out" / REPORT)
        assert [p.index for p in report.powers] == [0, 1, 2, 3]
        assert report.flagged == []
        assert report.summary.tau_rad_us == pytest.approx(1.61, rel=0.2)
        assert report.summary.eta == pytest.approx(0.7114, abs=0.005)
        for p in report.powers:
            assert 0.0 < p.rho <= 1.0
            assert p.g2_zero < 0.3

    def test_report_round_trip(self, sweep):
        """report.json reloads to the same document."""
        directory, _, _ = sweep
        document = json.loads((directory / "out" / REPORT).read_text(encoding="utf-8"))
        assert Report.from_dict(document).to_dict() == document

    def test_report_schema_enforced(self):
        """A document without powers is not a report."""
        with pytest.raises(ManifestError):
            Report.from_dict({"summary": {}})

    def test_histogram_reload(self, sweep):
        """The per-power CSV reloads as a normalized histogram."""
        directory, config_path, _ = sweep
        hist = load_histogram(load_config(config_path), 0)
        assert hist.normalized
        assert hist.n_bins == 200
        assert np.mean(hist.values[:20]) == pytest.approx(1.0, abs=0.1)

    def test_unconverged_power_flagged(self, sweep, tmp_path, capsys):
        """A failed fit is flagged in the report and exits nonzero."""
        directory, _, _ = sweep
        shutil.copytree(directory / "out", tmp_path / "out")
        fit_path = tmp_path / "out" / fit_name(1)
        document = json.loads(fit_path.read_text(encoding="utf-8"))
        document["corrected"]["converged"] = False
        document["corrected"]["message"] = "damping overflow"
        fit_path.write_text(json.dumps(document), encoding="utf-8")

        config_path = write_config(tmp_path, sweep_document(tmp_path / "out"))
        assert runner.main(["report", "--config", config_path]) == 1
        report = load_report(tmp_path / "out" / REPORT)
        assert report.flagged == [1]
        assert "FLAGGED: damping overflow" in capsys.readouterr().out

    def test_report_without_fits(self, tmp_path):
        """report before analyze is a missing-artifact error (exit 2)."""
        config_path = write_config(tmp_path, sweep_document(tmp_path / "out"))
        config = load_config(config_path)
        cmd_simulate(dataclasses.replace(config, scenario=dataclasses.replace(config.scenario, duration_ps=10**9)))
        assert runner.main(["report", "--config", config_path]) == 2


class TestDarkPowers:
    """
    Tests that a power with no usable signal is flagged, not fatal.
    """

    POWERS = [0.0, 0.3, 0.6, 1.0]
    IDEAL_DETECTOR = {"jitter_sigma_ps": 0, "dead_time_ps": 0, "dark_cps": 0, "efficiency": 1.0}

    def _run(self, tmp_path, **scenario):
        document = sweep_document(tmp_path / "out", **scenario)
        document["powers_uW"] = self.POWERS
        config_path = write_config(tmp_path, document)
        code = runner.main(["run", "--config", config_path])
        return code, load_report(tmp_path / "out" / REPORT)

    def test_no_light_at_all(self, tmp_path):
        """Zero pump without background cannot be normalized; the rest still fit."""
        code, report = self._run(tmp_path, background_cps=0, detector=self.IDEAL_DETECTOR)
        assert code == 1
        assert report.flagged == [0]
        assert "cannot normalize" in report.powers[0].message
        assert report.powers[0].corrected_cps is None
        assert report.powers[0].rho is None
        assert report.summary.tau_rad_us is not None

        fit = json.loads((tmp_path / "out" / fit_name(0)).read_text(encoding="utf-8"))
        assert fit["raw"]["converged"] is False
        assert fit["corrected"]["converged"] is False
        assert fit["corrected_cps"] is None
        assert (tmp_path / "out" / g2_name(0)).exists()

    def test_background_only(self, tmp_path):
        """Zero pump over background has no dip and is flagged."""
        code, report = self._run(tmp_path)
        assert code == 1
        assert report.flagged == [0]
        assert report.powers[0].corrected_cps is None
        for p in report.powers[1:]:
            assert p.converged, p.message
            assert 0.0 < p.rho <= 1.0

    def test_background_equal_to_detected(self, sweep, tmp_path):
        """rho = 0 is reported on the power instead of dividing by zero."""
        directory, _, _ = sweep
        shutil.copytree(directory / "out", tmp_path / "out")
        manifest_path = tmp_path / "out" / MANIFEST
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entry = manifest["powers"][2]
        tags = entry["files"]["ch0"]["count"] + entry["files"]["ch1"]["count"]
        entry["background_cps"] = tags / (manifest["duration_ps"] / 10**12)
        manifest_path.write_text(json.dumps(manifest), encoding="utf-8")

        config_path = write_config(tmp_path, sweep_document(tmp_path / "out"))
        assert runner.main(["analyze", "--config", config_path]) == 0
        fit = json.loads((tmp_path / "out" / fit_name(2)).read_text(encoding="utf-8"))
        assert fit["rho"] is None
        assert fit["corrected"]["converged"] is False
        assert "signal fraction" in fit["corrected"]["message"]
        assert fit["raw"]["converged"] is True
        assert runner.main(["report", "--config", config_path]) == 1


class TestRunnerCommands:
    """
    Tests the standalone subcommands of runner.py.
    """

    def test_budget(self, capsys):
        """budget prints eta as JSON."""
        assert runner.main(["budget", "-R", "0.42", "-T", "0.83"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["eta"] == pytest.approx(0.7114, abs=0.005)

    def test_budget_invalid(self, capsys):
        """R above T_fc exits 2 with a message."""
        assert runner.main(["budget", "-R", "0.9", "-T", "0.83"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_correct_rate(self, capsys):
        """correct rate applies the g2(0) correction."""
        code = runner.main(["correct", "rate", "--detected", "1500", "--background", "100", "--g2-zero", "0.19"])
        assert code == 0
        assert json.loads(capsys.readouterr().out)["corrected_cps"] == pytest.approx(1260.0)

    def test_correct_rate_missing_args(self):
        """correct rate without g2(0) is an input error."""
        assert runner.main(["correct", "rate", "--detected", "1500", "--background", "100"]) == 2

    def test_correct_g2(self, sweep, tmp_path):
        """correct g2 writes tau, g2 and sigma columns."""
        directory, _, _ = sweep
        output = tmp_path / "corrected.csv"
        code = runner.main([
            "correct", "g2", "--input", str(directory / "out" / g2_name(0)),
            "--output", str(output), "--rho", "0.9",
        ])
        assert code == 0
        frame = pd.read_csv(output)
        assert list(frame.columns) == ["tau_ps", "g2", "sigma"]
        assert len(frame) == 200

    def test_fit_saturation(self, tmp_path):
        """fit saturation reads x, y, sigma columns and writes JSON."""
        source = tmp_path / "sat.csv"
        pd.DataFrame(make_saturation_points(), columns=["P_uW", "rate_cps", "sigma_cps"]).to_csv(source, index=False)
        output = tmp_path / "sat.json"
        assert runner.main(["fit", "saturation", "--input", str(source), "--output", str(output)]) == 0
        doc = json.loads(output.read_text(encoding="utf-8"))
        assert doc["converged"] is True
        assert doc["params"]["P_sat"] == pytest.approx(0.93, rel=1e-3)

    def test_fit_lifetime_derived(self, tmp_path, capsys):
        """fit lifetime reports tau_rad and beta."""
        source = tmp_path / "gamma.csv"
        power = np.array([0.3, 0.7, 1.1, 1.5])
        pd.DataFrame({"P_uW": power, "gamma_per_us": (1 + power) / 1.61}).to_csv(source, index=False)
        assert runner.main(["fit", "lifetime", "--input", str(source), "--unweighted"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["derived"]["tau_rad_us"] == pytest.approx(1.61, rel=1e-6)

    def test_unwritable_output(self, tmp_path):
        """An output path in a missing folder exits 2."""
        target = tmp_path / "missing" / "eta.json"
        assert runner.main(["budget", "-R", "0.42", "-T", "0.83", "-o", str(target)]) == 2

    def test_invalid_config_exit(self, tmp_path, capsys):
        """An invalid config exits 2 and names the field."""
        path = write_config(tmp_path, load_fixture("invalid_config_empty_powers.json"))
        assert runner.main(["simulate", "--config", path]) == 2
        assert "$.powers_uW" in capsys.readouterr().err

    def test_malformed_histogram_exit(self, tmp_path, capsys):
        """A histogram CSV with a broken metadata line exits 2."""
        path = tmp_path / "g2.csv"
        path.write_text("# tau_max_ps\nbin_lo_ps,bin_hi_ps,counts,normalized_value\n", encoding="utf-8")
        assert runner.main(["fit", "g2", "--input", str(path)]) == 2
        assert "bad histogram metadata" in capsys.readouterr().err

    def test_selftest_list(self, capsys):
        """selftest --list names every test module."""
        assert runner.main(["selftest", "--list"]) == 0
        out = capsys.readouterr().out
        for module, _, _ in runner.TEST_MODULES:
            assert module in out
