import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from ckrdduq import dduq
from ckrdduq.cli import main
from ckrdduq.config import ConfigError, load_config, parse_config
from ckrdduq.problems import three_component, two_component

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = str(CONFIGS / "tiny.ini")
STAGE_ORDER = ("prep", "offline", "surrogate", "online", "report")


def _layout(dec):
    subs = [(s.id, s.rect, s.field, s.output) for s in dec.subdomains]
    itfs = [(i.key, i.kind, i.theta, i.modes) for i in dec.interfaces]
    return subs, sorted(itfs), dec.h, dec.source, dec.flux_method


@pytest.mark.parametrize("name, factory", [("two_component.ini", two_component),
                                           ("three_component.ini", three_component)])
def test_shipped_configs_match_problem_builders(name, factory):
    cfg = load_config(CONFIGS / name)
    assert _layout(cfg.decomposition) == _layout(factory())


def test_defaults_and_digest():
    cfg = load_config(CONFIGS / "two_component.ini")
    assert cfg.sampling.n_off == 10000 and cfg.sampling.n_ref == 100000
    assert cfg.flow.stages == {1: 2, 2: 3}
    assert cfg.digest == load_config(CONFIGS / "two_component.ini").digest


@pytest.mark.parametrize("old, new, needle", [
    ("h = 0.0625", "h = -1", "positive mesh size"),
    ("theta = 0.1", "theta = -0.5", "theta >= 0"),
    ("kind = dirichlet", "kind = robin", "dirichlet or neumann"),
    ("gamma = 0.6", "gamma = 1.5", "(0, 1)"),
])
def test_invalid_values_report_line(old, new, needle):
    text = (CONFIGS / "two_component.ini").read_text()
    assert old in text
    bad = text.replace(old, new, 1)
    line = bad.splitlines().index(next(l for l in bad.splitlines() if l.strip() == new)) + 1
    with pytest.raises(ConfigError) as err:
        parse_config(bad, "x.ini")
    assert needle in str(err.value) and f"x.ini:{line}" in str(err.value)


def test_missing_section():
    with pytest.raises(ConfigError, match=r"\[dd\]"):
        parse_config("[problem]\nh = 0.1\n[sampling]\nn_off = 5\n")


def test_report_before_online_fails(tmp_path, capsys):
    assert main(["--config", TINY, "--stage", "report", "--out", str(tmp_path)]) == 2
    assert "run the 'online' stage first" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    for stage in STAGE_ORDER:
        assert main(["--config", TINY, "--stage", stage, "--out", str(out)]) == 0
    return out


def test_prep_artifacts(tiny_run):
    for i in (1, 2):
        table = np.loadtxt(tiny_run / f"kl_{i}.txt", ndmin=2)
        assert table.shape[1] - 2 == 14  # mean and trace lead the eigenvalue row
    prep = json.loads((tiny_run / "prep.json").read_text())
    assert prep["pod_modes"] == {"2_1": 2, "1_2": 6}


def test_report_contents(tiny_run):
    report = json.loads((tiny_run / "report.json").read_text())
    assert set(report["ess"]) == {"1", "2"}
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(STAGE_ORDER)
    cfg = load_config(TINY)
    from ckrdduq.io import SampleTable
    for i in ("1", "2"):
        t = SampleTable.load(tiny_run / f"samples_{i}.txt")
        mean, var = dduq.weighted_moments(t[f"y_{i}"], t[f"w_{i}"])
        assert report["outputs"][i]["mean"] == mean and report["outputs"][i]["var"] == var
        assert set(report["outputs"][i]["exceedance"]) == {str(a) for a in cfg.output.thresholds}
        pdf = np.loadtxt(tiny_run / f"pdf_{i}.csv", delimiter=",", skiprows=1)
        assert pdf.shape == (cfg.output.pdf_points, 3)
        assert np.all(np.diff(pdf[:, 0]) > 0) and np.all(pdf[:, 1:] >= 0)
    assert (tiny_run / "indicator.csv").exists() and (tiny_run / "reference.txt").exists()


def test_stages_are_idempotent(tiny_run, tmp_path):
    again = tmp_path / "again"
    for stage in STAGE_ORDER:
        assert main(["--config", TINY, "--stage", stage, "--out", str(again)]) == 0
    names = [p.name for p in tiny_run.iterdir() if p.name != "manifest.json"]
    assert names
    match, mismatch, errors = filecmp.cmpfiles(tiny_run, again, names, shallow=False)
    assert not mismatch and not errors
