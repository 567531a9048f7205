import filecmp
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from stratcausal.cli import main
from stratcausal.report import RECORD_FIELDS, read_manifest, read_records

FAST = ["--trees", "40", "--bootstrap", "20"]


@pytest.fixture(scope="module")
def survey(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--seed", "5", "--oracle-draws", "20000"]) == 0
    return out


def _args(survey, cmd, out, *extra):
    return [cmd, "--data", str(survey / "survey.csv"), "--schema", str(survey / "survey.schema"),
            "--out", str(out), *FAST, *extra]


def _same_tree(a: Path, b: Path):
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors, mismatch


def test_simulate_outputs(survey):
    for name in ("survey.csv", "survey.schema", "latent.csv", "dgp.cfg", "oracle.csv",
                 "manifest.txt"):
        assert (survey / name).exists()
    oracle = pd.read_csv(survey / "oracle.csv")
    assert list(oracle.quantity) == ["theta_ab", "delta_ab_binary", "monotonicity_slope",
                                     "always_buyer_share"]
    man = read_manifest(survey / "manifest.txt")
    assert man["seed"] == "5" and man["dgp.n"] == "10000" and "out" not in man


def test_estimate_four_positive_rows(survey, tmp_path):
    assert main(_args(survey, "estimate", tmp_path)) == 0
    recs = read_records(tmp_path / "estimates.csv")
    assert [r.method for r in recs] == ["cf_ape", "dml_ate", "ols", "psm_ate"]
    assert all(r.effect > 0 for r in recs)
    assert recs[1].n + recs[1].n_trimmed == recs[2].n
    assert (tmp_path / "propensity_histogram.csv").exists()


def test_manifest_rerun_identical(survey, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(_args(survey, "estimate", a)) == 0
    assert main(["estimate", "--config", str(a / "manifest.txt"), "--out", str(b),
                 "--threads", "3"]) == 0
    _same_tree(a, b)


def test_config_overrides_flags(survey, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("trees=30\nseed=8\n", encoding="utf-8")
    out = tmp_path / "o"
    assert main(_args(survey, "predict", out, "--config", str(cfg), "--seed", "1")) == 0
    man = read_manifest(out / "manifest.txt")
    assert man["trees"] == "30" and man["seed"] == "8"


def test_diagnose(survey, tmp_path):
    assert main(_args(survey, "diagnose", tmp_path)) == 0
    recs = read_records(tmp_path / "monotonicity.csv")
    assert [r.method for r in recs] == ["cf_average_change", "lr_coefficient", "dml_contrast"]
    text = (tmp_path / "monotonicity.csv").read_text()
    assert "# " in text
    hist = pd.read_csv(tmp_path / "change_histogram.csv")
    shares = pd.read_csv(tmp_path / "change_shares.csv").set_index("quantity")["value"]
    assert hist["count"].sum() == shares["n"]
    ind = pd.read_csv(tmp_path / "independence.csv", comment="#")
    assert list(ind.variable[:3]) == ["w0", "w1", "w2"]


def test_predict(survey, tmp_path):
    assert main(_args(survey, "predict", tmp_path, "--subsample-arms")) == 0
    recs = read_records(tmp_path / "predict.csv")
    assert len(recs) == 9
    assert (tmp_path / "importance_upselling.csv").exists()
    imp = pd.read_csv(tmp_path / "importance_demand_shift.csv")
    assert len(imp) <= 30 and list(imp.columns) == ["rank", "variable", "importance"]


def test_heterogeneity(survey, tmp_path):
    assert main(_args(survey, "heterogeneity", tmp_path, "--blp-vars", "w0,x4")) == 0
    for name in ("cape_histogram.csv", "cape_shares.csv", "cape_importance.csv",
                 "blp_binary.csv", "blp_characteristics.csv"):
        assert (tmp_path / name).exists()
    blp = pd.read_csv(tmp_path / "blp_characteristics.csv")
    assert list(blp.term) == ["const", "w0", "x4"]
    assert main(_args(survey, "heterogeneity", tmp_path / "bad", "--blp-vars", "nope")) == 2


def test_mc_study(tmp_path):
    dgp = tmp_path / "d.cfg"
    dgp.write_text("n=3000\n", encoding="utf-8")
    assert main(["mc-study", "--dgp", str(dgp), "--reps", "3", "--estimator", "dml_oracle",
                 "--oracle-draws", "20000", "--out", str(tmp_path)]) == 0
    study = pd.read_csv(tmp_path / "mc_study.csv")
    assert study.estimator[0] == "dml_oracle" and study.n_failed[0] == 0
    assert len(pd.read_csv(tmp_path / "mc_reps.csv")) == 3


def test_record_field_set(survey, tmp_path):
    main(_args(survey, "estimate", tmp_path / "e"))
    main(_args(survey, "predict", tmp_path / "p"))
    for f in (tmp_path / "e" / "estimates.csv", tmp_path / "p" / "predict.csv"):
        header = f.read_text().splitlines()[0].split(",")
        assert tuple(header) == RECORD_FIELDS


def test_invalid_inputs_exit_2(survey, tmp_path):
    assert main(["estimate", "--out", str(tmp_path)]) == 2
    assert main(["estimate", "--data", "missing.csv", "--schema", "x", "--out", str(tmp_path)]) == 2
    assert main(_args(survey, "estimate", tmp_path, "--trim", "0.7")) == 2
    assert main(_args(survey, "estimate", tmp_path, "--folds", "1")) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key=1\n", encoding="utf-8")
    assert main(_args(survey, "estimate", tmp_path, "--config", str(bad))) == 2
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--split-rule", "other"])
    assert exc.value.code == 2


def test_no_always_buyers_exit_2(survey, tmp_path):
    df = pd.read_csv(survey / "survey.csv")
    df = df[df.s0 == 0]
    df.to_csv(tmp_path / "s.csv", index=False)
    args = ["estimate", "--data", str(tmp_path / "s.csv"), "--schema",
            str(survey / "survey.schema"), "--out", str(tmp_path / "o"), *FAST]
    assert main(args) == 2


def test_tiny_population_exit_2(tmp_path):
    dgp = tmp_path / "d.cfg"
    dgp.write_text("n=120\n", encoding="utf-8")
    assert main(["simulate", "--dgp", str(dgp), "--out", str(tmp_path)]) == 2
