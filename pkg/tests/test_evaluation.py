import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upda.dataset import ContractViolation, DomainConfig
from upda.evaluation import (
    ComparisonTable,
    EvalReport,
    FoldResult,
    ProtocolConfig,
    UndefinedCorrelation,
    compare_methods,
    cross_distortion_configs,
    fit_logistic,
    logistic5,
    plcc_after_fit,
    report_rows_csv,
    run_protocol,
    srcc,
)
from upda.train import TrainConfig


def test_srcc_examples():
    assert srcc([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert srcc([4, 3, 2, 1], [1, 2, 3, 4]) == -1.0
    # 1 - 6 * 2 / (4 * 15)
    assert abs(srcc([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) < 1e-12


def test_srcc_errors():
    with pytest.raises(UndefinedCorrelation):
        srcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ContractViolation):
        srcc([1, 2], [1, 2])


def test_srcc_ties_use_average_ranks():
    # ranks (1.5, 1.5, 3) vs (1, 2, 3)
    assert srcc([1, 1, 2], [1, 2, 3]) == pytest.approx(np.sqrt(3) / 2, abs=1e-15)


@given(st.lists(st.integers(-10000, 10000), min_size=3, max_size=30, unique=True), st.integers(0, 2**16))
def test_srcc_monotone_invariance(pred, seed):
    # integer spacing keeps the transformed values distinct in float64
    pred = np.array(pred, dtype=np.float64) / 100
    mos = np.random.default_rng(seed).normal(size=len(pred))
    a = srcc(pred, mos)
    assert -1 <= a <= 1
    assert srcc(np.exp(pred / 50) * 3 + 1, mos) == a


def test_plcc_identity_and_affine():
    mos = np.random.default_rng(0).uniform(0, 10, 20)
    assert abs(plcc_after_fit(mos, mos)[0] - 1) < 1e-6
    assert abs(plcc_after_fit(2 * mos + 3, mos)[0] - 1) < 1e-6


def test_logistic_refit_oracle():
    rng = np.random.default_rng(1)
    x = np.sort(rng.uniform(-3, 3, 40))
    beta = (6.0, 1.7, 0.4, 0.3, 5.0)
    y = logistic5(x, *beta) + rng.normal(0, 1e-5, len(x))
    fit = fit_logistic(x, y)
    assert fit.converged and np.all(np.isfinite(fit.beta))
    assert np.sqrt(np.mean((fit(x) - logistic5(x, *beta)) ** 2)) < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.1, 50), st.floats(-20, 20))
def test_plcc_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    mos = rng.uniform(0, 10, 16)
    pred = np.tanh(mos / 5 - 1) + rng.normal(0, 0.1, 16)
    a, fa = plcc_after_fit(pred, mos)
    b, fb = plcc_after_fit(scale * pred + shift, mos)
    assert abs(a - b) < 1e-6
    assert -1 <= a <= 1


def test_logistic_needs_six_points():
    with pytest.raises(ContractViolation):
        fit_logistic([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])


def test_constant_prediction_falls_back():
    assert not fit_logistic(np.zeros(8), np.arange(8.0)).converged


def _report(method, values, scenario="cross_distortion"):
    r = EvalReport(scenario, method)
    for i, (s, p) in enumerate(values):
        r.folds.append(FoldResult(i % 2, i // 2, s, p))
    return r


def test_report_means_are_fold_means():
    r = _report("UPDA", [(0.5, 0.6), (0.7, 0.8), (0.9, 0.7), (0.3, 0.2)])
    assert r.mean() == np.mean([0.5, 0.7, 0.9, 0.3])
    assert r.mean("plcc") == np.mean([0.6, 0.8, 0.7, 0.2])
    assert np.allclose(r.seed_means(), [0.6, 0.6])


@pytest.fixture
def reports():
    return [
        _report("NoAdapt", [(0.5, 0.55), (0.6, 0.5)]),
        _report("DirAdapt", [(0.7, 0.65), (0.6, 0.75)]),
        _report("UPDA", [(0.8, 0.6), (0.9, 0.7)]),
        _report("NoAdapt", [(0.1, 0.2), (0.2, 0.3)], "cross_dataset"),
        _report("DirAdapt", [(0.3, 0.2), (0.2, 0.1)], "cross_dataset"),
        _report("UPDA", [(0.25, 0.4), (0.2, 0.2)], "cross_dataset"),
    ]


def test_compare_deltas(reports):
    table = compare_methods(reports)
    row = table.rows[0]
    assert row["delta_UPDA_vs_NoAdapt_srcc"] == reports[2].mean() - reports[0].mean()
    assert row["delta_UPDA_vs_DirAdapt_plcc"] == reports[2].mean("plcc") - reports[1].mean("plcc")


def test_compare_roundtrips(reports):
    table = compare_methods(reports)
    assert ComparisonTable.from_json(table.to_json()) == table
    back = ComparisonTable.from_csv(table.to_csv(), table.methods)
    assert back.rows == table.rows


def test_bold_marks_match_argmax(reports):
    table = compare_methods(reports)
    marks = table.bold_marks()
    assert marks[("cross_distortion", "srcc")] == "UPDA"
    assert marks[("cross_distortion", "plcc")] == "DirAdapt"
    assert marks[("cross_dataset", "srcc")] == "DirAdapt"
    scaled = ComparisonTable(table.methods, [{k: (v * 3.5 if isinstance(v, float) else v) for k, v in r.items()}
                                             for r in table.rows])
    assert scaled.bold_marks() == marks


def test_compare_errors(reports):
    with pytest.raises(ContractViolation):
        compare_methods(reports[:1])
    with pytest.raises(ContractViolation):
        compare_methods(reports[:4])


def test_rows_csv(reports):
    text = report_rows_csv(reports[:3])
    lines = text.strip().splitlines()
    assert lines[0] == "scenario,method,fold,seed,srcc,plcc"
    assert len(lines) == 1 + 6


def test_leave_one_out_cardinality():
    pairs = cross_distortion_configs(("color_noise", "downsample", "quantize"))
    assert len(pairs) == 3
    for (src, tgt), held in zip(pairs, ("color_noise", "downsample", "quantize")):
        assert tgt.distortion_kinds == (held,) and held not in src.distortion_kinds
        assert tgt.content_offset == src.content_offset + 1000


def test_protocol_hygiene():
    src = DomainConfig("source", ("sphere", "torus"), ("color_noise", "quantize"), n_groups=2, n_points=256)
    tgt = DomainConfig("target", ("sphere", "torus"), ("geometry_gaussian_noise",), n_groups=2, n_points=256,
                       content_offset=1000)
    cfg = ProtocolConfig(src, tgt, TrainConfig(stage1_epochs=2, stage2_epochs=2), seeds=(0,), k_folds=2)
    audit = []
    reports = run_protocol(cfg, audit=audit)
    assert [r.method for r in reports] == ["NoAdapt", "DirAdapt", "UPDA"]
    assert all(len(r.folds) == 2 for r in reports)
    assert len(audit) == 6
    for method, _, _, adapt_ids, test_ids in audit:
        assert not set(adapt_ids) & set(test_ids)
        if method == "NoAdapt":
            assert adapt_ids == []
    for r in reports:
        assert np.all(np.abs(r.srcc_values) <= 1) and np.all(np.abs(r.plcc_values) <= 1)
