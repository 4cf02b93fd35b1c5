"""
実行ハーネス (run, corpus, run_corpus) のテスト
"""

import json
from pathlib import Path

import pytest

from fbflow.config import load_run_config
from fbflow.core.dynamics import criticality_residual
from fbflow.core.harness import EXIT_CHECK_FAILED, EXIT_CONFIG_ERROR, EXIT_OK, build_problem, corpus, run, run_corpus
from fbflow.exceptions import InvalidConfigError
from fbflow.models.problem import validate_step
from fbflow.models.run_config import AnalysisToggles, Regime, RunConfig

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def corpus_config(name: str) -> RunConfig:
    return next(c for c in corpus() if c.name == name)


def test_corpus_contents():
    configs = corpus()
    names = [c.name for c in configs]
    assert len(configs) >= 6
    assert len(set(names)) == len(names)
    for config in configs:
        problem = build_problem(config)
        assert validate_step(problem.eta, problem.beta)


def test_bundled_configs_are_copies_of_the_corpus():
    for config in corpus():
        bundled = load_run_config(CONFIG_DIR / f"{config.name}.toml")
        assert bundled.model_dump() == config.model_dump()


def test_step_violation_exits_with_config_error(tmp_path):
    """ステップ条件違反は終了コード 2 で, 不等式を含む診断を返す"""
    data = corpus_config("quadratic").model_dump()
    data["problem"]["eta"] = 1.0
    outcome = run(RunConfig.model_validate(data), output_dir=tmp_path)
    assert outcome.exit_code == EXIT_CONFIG_ERROR
    assert any("eta*beta*(3 + eta*beta) < 1" in d for d in outcome.diagnostics)
    assert not (tmp_path / "trajectory.csv").exists()

    with pytest.raises(InvalidConfigError):
        build_problem(RunConfig.model_validate(data))


def test_corpus_known_minimizers_are_critical():
    """コーパスの既知最小点はすべて臨界点 (残差 1e-8 以下)"""
    for config in corpus():
        problem = build_problem(config)
        if problem.known_minimizer is not None:
            assert criticality_residual(problem, problem.known_minimizer) <= 1e-8, config.name


def test_wrong_known_minimizer_exits_with_config_error(tmp_path):
    data = corpus_config("quadratic").model_dump()
    data["problem"]["known_minimizer"] = [5.0, 5.0]
    outcome = run(RunConfig.model_validate(data), output_dir=tmp_path)
    assert outcome.exit_code == EXIT_CONFIG_ERROR
    assert any("not a critical point" in d for d in outcome.diagnostics)
    assert not (tmp_path / "trajectory.csv").exists()


def test_quadratic_run_writes_artifacts(tmp_path):
    outcome = run(corpus_config("quadratic"), output_dir=tmp_path)
    assert outcome.exit_code == EXIT_OK, outcome.failed
    for name in ("trajectory.csv", "trace.csv", "analysis.json", "summary.txt"):
        assert (tmp_path / name).is_file()
    assert set(outcome.artifacts) == {"trajectory", "trace", "analysis", "summary"}

    analysis = json.loads((tmp_path / "analysis.json").read_text(encoding="utf-8"))
    assert analysis["name"] == "quadratic"
    assert analysis["rate"]["regime"] == "exponential"
    assert {c["name"] for c in analysis["checks"]} >= {
        "energy_dissipation",
        "subgradient_bound",
        "velocity_decay",
        "trajectory_length",
        "criticality",
        "terminal_energy",
        "rate",
        "gradient_lipschitz",
        "field_lipschitz",
    }
    assert all(c["passed"] for c in analysis["checks"])

    summary = (tmp_path / "summary.txt").read_text(encoding="utf-8")
    assert "Run: quadratic" in summary
    assert "all checks passed" in summary

    header = (tmp_path / "trace.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "t,H,xdot_norm,z_norm,sigma,dist_to_limit"


def test_runs_are_deterministic(tmp_path):
    """同じ設定とシードなら CSV はバイト単位で一致する"""
    config = corpus_config("box_quadratic")
    run(config, output_dir=tmp_path / "a")
    run(config, output_dir=tmp_path / "b")
    for name in ("trajectory.csv", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_lasso_run_converges(tmp_path):
    outcome = run(corpus_config("lasso"), output_dir=tmp_path)
    assert outcome.exit_code == EXIT_OK, outcome.failed
    assert outcome.report.limit.residual < 1e-9
    assert outcome.report.trajectory["terminated_by"] == "residual"


def test_compare_discrete_on_lasso(tmp_path):
    """離散反復と連続フローが同じ臨界点に到達する"""
    outcome = run(corpus_config("lasso"), compare_discrete=True, output_dir=tmp_path)
    assert outcome.exit_code == EXIT_OK, outcome.failed
    discrete = outcome.report.discrete
    assert discrete.same_limit
    assert discrete.distance <= 1e-6
    assert discrete.objective_gap <= 1e-8

    lines = (tmp_path / "discrete.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "k,x_1,x_2,x_3,residual"
    assert lines[1].startswith("0,1,1,1,")
    assert "discrete" in outcome.artifacts


def test_failed_check_exits_with_one(tmp_path):
    data = corpus_config("quadratic").model_dump()
    data["analysis"]["expected_regime"] = Regime.POLYNOMIAL.value
    outcome = run(RunConfig.model_validate(data), output_dir=tmp_path)
    assert outcome.exit_code == EXIT_CHECK_FAILED
    assert outcome.failed == ["rate"]
    assert "FAILED (rate)" in (tmp_path / "summary.txt").read_text(encoding="utf-8")


def test_disabled_checks_are_skipped(tmp_path):
    toggles = AnalysisToggles(
        energy=False,
        subgradient=False,
        criticality=False,
        velocity=False,
        tail_length=False,
        rate=False,
        lipschitz=False,
    )
    config = corpus_config("halfline").model_copy(update={"analysis": toggles})
    outcome = run(config, output_dir=tmp_path)
    assert outcome.exit_code == EXIT_OK
    assert outcome.report.checks == []
    assert outcome.report.rate is None


def test_run_corpus_sequential(tmp_path):
    configs = [corpus_config("quadratic"), corpus_config("halfline")]
    outcomes = run_corpus(configs, tmp_path, jobs=1)
    assert [o.name for o in outcomes] == ["quadratic", "halfline"]
    assert all(o.exit_code == EXIT_OK for o in outcomes)
    assert (tmp_path / "halfline" / "analysis.json").is_file()


@pytest.mark.slow
def test_full_corpus_passes(tmp_path):
    """全コーパスが不変条件チェックをすべて通過する"""
    outcomes = run_corpus(corpus(), tmp_path, jobs=2, compare_discrete=True)
    failures = {o.name: o.failed for o in outcomes if o.exit_code != EXIT_OK}
    assert failures == {}

    quartic = next(o for o in outcomes if o.name == "quartic")
    assert quartic.report.rate.regime == Regime.POLYNOMIAL
    assert abs(quartic.report.rate.power_exponent + 0.5) <= 0.1

    for outcome in outcomes:
        if outcome.report.trajectory["terminated_by"] == "residual":
            assert outcome.report.limit.residual <= 1e-9
