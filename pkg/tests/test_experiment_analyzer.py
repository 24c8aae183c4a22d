"""
Tests for sweep aggregation, rate fitting and verdicts
"""
import numpy as np
import pandas as pd
import pytest

from errors import ValidationError
from experiment_analyzer import ExperimentAnalyzer


def _rows(records):
    frame = pd.DataFrame(records, columns=["strategy", "n_p", "replicate", "status", "l2q_error", "param_error",
                                           "assignment_correct"])
    frame["n_q"] = frame["n_p"]
    return frame


@pytest.fixture
def synthetic_rows():
    records = []
    for n in (100, 400, 1600):
        for rep, jitter in enumerate((0.9, 1.0, 1.1)):
            records.append(("shrinking", n, rep, "ok", jitter / np.sqrt(n), np.nan, 1))
    for rep in range(3):
        records.append(("flat", 100, rep, "ok", 0.4, np.nan, np.nan))
    records.append(("flat", 100, 3, "failed", np.nan, np.nan, np.nan))
    return _rows(records)


class TestAggregate:

    def test_medians_and_quartiles(self, synthetic_rows):
        agg = ExperimentAnalyzer.aggregate(synthetic_rows)
        assert list(agg['strategy']) == ["shrinking"] * 3 + ["flat"]
        first = agg.iloc[0]
        assert first['l2q_error_median'] == pytest.approx(0.1)
        assert first['l2q_error_q25'] == pytest.approx(0.095)
        assert first['l2q_error_iqr'] == pytest.approx(0.01)
        assert np.isnan(first['param_error_median'])

    def test_failed_rows_counted(self, synthetic_rows):
        agg = ExperimentAnalyzer.aggregate(synthetic_rows)
        flat = agg[agg['strategy'] == "flat"].iloc[0]
        assert flat['replicates'] == 4 and flat['failed'] == 1
        assert flat['l2q_error_median'] == pytest.approx(0.4)


class TestSlopes:

    def test_exact_inverse_root_rate(self, synthetic_rows):
        agg = ExperimentAnalyzer.aggregate(synthetic_rows)
        fit = ExperimentAnalyzer.fit_slope(agg, "shrinking")
        assert fit.slope == pytest.approx(-0.5, abs=1e-12)
        assert fit.n_points == 3

    def test_single_size_has_no_slope(self, synthetic_rows):
        agg = ExperimentAnalyzer.aggregate(synthetic_rows)
        assert ExperimentAnalyzer.fit_slope(agg, "flat") is None


class TestAnalyze:

    def test_verdicts_and_ranking(self, synthetic_rows):
        analyzer = ExperimentAnalyzer()
        analysis = analyzer.analyze(synthetic_rows)
        assert analysis['failed_rows'] == 1
        assert analysis['ranking'][0]['strategy'] == "shrinking"
        assert analysis['assignment_rate'] == {100: 1.0, 400: 1.0, 1600: 1.0}
        verdicts = analysis['verdicts']
        assert "consistent" in verdicts[0]
        assert verdicts[1] == "flat: single sample size, no rate fitted"
        assert verdicts[-1].startswith("lowest error at n=1600: shrinking")
        assert len(analyzer.history) == 1

    def test_summary_is_plain_data(self, synthetic_rows):
        summary = ExperimentAnalyzer.summary(ExperimentAnalyzer().analyze(synthetic_rows))
        assert summary['slopes']['flat'] is None
        assert summary['slopes']['shrinking']['slope'] == pytest.approx(-0.5)
        assert summary['aggregate'][0]['param_error_median'] is None

    def test_empty_rows(self):
        with pytest.raises(ValidationError):
            ExperimentAnalyzer().analyze(pd.DataFrame())
