import json

import numpy as np
import pytest

from inkwell.experiment import (PLOT_KINDS, ConfigError, ExperimentConfig, StageError, class_spectra,
                                emit_plot_data, report_bytes, run_experiment)
from inkwell.model import LABELS
from inkwell.simulate import GenerationConfig, generate_dataset

SMALL_COUNTS = {"Healthy": 30, "EC": 6, "FBN": 6, "PBN": 6, "SDN": 6, "IDN": 6, "DDN": 6}
SMALL_TRAIN = {"EC": 8, "FBN": 8, "PBN": 8, "SDN": 8, "IDN": 8, "DDN": 8}


def small_config(**overrides):
    obj = {
        "generation": {"counts": SMALL_COUNTS, "seed": 3},
        "test_seed": 4,
        "train_fault_counts": SMALL_TRAIN,
        "sysid": {"loss": "l2", "n_refine": 2},
        "sysid_signals": 4,
    }
    obj.update(overrides)
    return ExperimentConfig.from_json(obj)


@pytest.fixture(scope="module")
def small_report(tmp_path_factory):
    cfg = small_config(out_dir=str(tmp_path_factory.mktemp("exp")))
    return cfg, run_experiment(cfg)


def test_report_shape(small_report):
    cfg, rep = small_report
    det = rep["detection"]
    assert np.array(det["confusion"]).shape == (2, 2)
    assert sum(map(sum, det["confusion"])) == sum(SMALL_COUNTS.values())
    iso = rep["isolation"]
    assert not iso["skipped"]
    cells = {(c["fraction"], c["stream"], c["method"]) for c in iso["cells"]}
    assert cells == {(f, s, m) for f in (1.0, 0.5, 0.1) for s in ("r", "y") for m in ("LR", "KNN")}
    for c in iso["cells"]:
        n = len(c["class_order"])
        assert np.array(c["confusion"]).shape == (n, n)
        assert set(c["class_order"]) <= set(LABELS[1:])
    assert rep["provenance"]["config_digest"] == cfg.digest()


def test_training_sizes_follow_fractions(small_report):
    _, rep = small_report
    sizes = {c["fraction"]: c["training_size"] for c in rep["isolation"]["cells"]}
    assert sizes == {1.0: 48, 0.5: 24, 0.1: 5}


def test_only_flagged_faulty_signals_are_isolated(small_report):
    _, rep = small_report
    det = rep["detection"]
    assert rep["isolation"]["isolated"] == det["confusion"][1][1]
    for c in rep["isolation"]["cells"]:
        assert np.sum(c["confusion"]) == det["confusion"][1][1]


def test_artifacts_written(small_report):
    cfg, rep = small_report
    from pathlib import Path
    out = Path(cfg.out_dir)
    for name in ("train.csv", "test.csv", "model.json", "filter.json", "residuals_test.csv",
                 "templates.csv", "report.json"):
        assert (out / name).exists(), name
    assert (out / "report.json").read_bytes() == report_bytes(rep)


def test_same_config_same_bytes(small_report):
    cfg, rep = small_report
    again = run_experiment(small_config())
    assert report_bytes(again) == report_bytes(rep)


def test_all_healthy_skips_isolation():
    cfg = small_config(generation={"counts": {"Healthy": 12}, "seed": 3}, train_fault_counts={})
    rep = run_experiment(cfg)
    assert rep["isolation"]["skipped"] is True
    assert rep["detection"]["n_faulty"] == 0


def test_config_errors():
    with pytest.raises(ConfigError):
        small_config(test_seed=3)
    with pytest.raises(ConfigError):
        small_config(bogus=1)
    with pytest.raises(ConfigError):
        small_config(isolation={"fractions": [0.0]})
    with pytest.raises(ConfigError):
        small_config(filter={"d_N": 2})
    with pytest.raises(ConfigError):
        small_config(train_fault_counts={"Healthy": 3})
    with pytest.raises(ConfigError):
        small_config(generation={"counts": {"Dusty": 1}})


def test_config_json_round_trip():
    cfg = small_config()
    back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back.digest() == cfg.digest()


def test_stage_failure_names_the_stage():
    cfg = small_config(generation={"counts": {"EC": 3}, "seed": 3}, train_fault_counts={})
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == "identify"


# --- plot data -------------------------------------------------------------

@pytest.fixture(scope="module")
def every_class():
    counts = {lab: 3 for lab in LABELS}
    return generate_dataset(GenerationConfig(counts=counts, seed=9, noise_rel=0.0)).entries


def test_signals_plot_has_one_group_per_class(every_class, tmp_path):
    path = emit_plot_data("signals", every_class, tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "class,t,value"
    groups = {ln.split(",")[0] for ln in lines[1:]}
    assert groups == set(LABELS)
    assert len(lines) == 1 + 7 * 500


def test_empty_plot_is_header_only(tmp_path):
    for kind in PLOT_KINDS:
        text = emit_plot_data(kind, [], tmp_path / f"{kind}.csv").read_text()
        assert text.count("\n") == 1


def test_unknown_plot_kind(tmp_path):
    with pytest.raises(ValueError):
        emit_plot_data("histogram", [], tmp_path / "x.csv")


def test_empty_channel_rings_faster(every_class):
    spec = class_spectra(every_class)
    peak = {lab: f[np.argmax(m)] for lab, (f, m) in spec.items()}
    assert peak["EC"] > peak["Healthy"]


def test_svg_output(every_class, tmp_path):
    pytest.importorskip("matplotlib")
    emit_plot_data("residuals", every_class[:6], tmp_path / "r.csv", svg=True)
    svgs = sorted(p.name for p in tmp_path.glob("r_*.svg"))
    assert svgs == ["r_EC.svg", "r_Healthy.svg"]
