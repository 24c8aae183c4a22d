"""
Tests for JSON results, plots and text reports
"""
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from errors import ValidationError
from experiment_analyzer import ExperimentAnalyzer
from utils import emit_plots, format_duration, generate_report, save_results_to_json


@pytest.fixture
def analysis():
    records = [("identification", n, r, "ok", (1.0 + 0.1 * r) / np.sqrt(n), 0.5 / np.sqrt(n))
               for n in (250, 1000, 4000) for r in range(3)]
    records += [("weak_train", n, r, "ok", 0.4 + 0.01 * r, np.nan) for n in (250, 1000, 4000) for r in range(3)]
    rows = pd.DataFrame(records, columns=["strategy", "n_p", "replicate", "status", "l2q_error", "param_error"])
    return ExperimentAnalyzer().analyze(rows)


class TestJson:

    def test_numpy_values_survive(self, tmp_path):
        path = save_results_to_json({'beta': np.arange(3.0), 'sigma': np.float64(0.3), 'k': np.int64(2),
                                     'where': Path("configs")}, filename="r.json", outdir=tmp_path)
        loaded = json.loads(Path(path).read_text(encoding='utf-8'))
        assert loaded == {'beta': [0.0, 1.0, 2.0], 'sigma': 0.3, 'k': 2, 'where': "configs"}


class TestPlots:

    def test_files_written(self, analysis, tmp_path):
        paths = emit_plots(analysis, tmp_path)
        names = sorted(Path(p).name for p in paths)
        assert names == ["final_n_l2q_error.svg", "l2q_error_vs_n.svg", "param_error_vs_n.svg"]
        assert all(Path(p).stat().st_size > 0 for p in paths)

    def test_plots_are_byte_stable(self, analysis, tmp_path):
        first = emit_plots(analysis, tmp_path / "a")
        second = emit_plots(analysis, tmp_path / "b")
        for a, b in zip(first, second):
            assert Path(a).read_bytes() == Path(b).read_bytes()

    def test_empty_report(self, tmp_path):
        with pytest.raises(ValidationError):
            emit_plots({'aggregate': pd.DataFrame()}, tmp_path)


class TestReport:

    def test_report_sections(self, analysis, tmp_path):
        path = generate_report(analysis, tmp_path / "report.txt")
        text = Path(path).read_text(encoding='utf-8')
        assert "CONVERGENCE RATES" in text
        assert "identification: -0.500" in text
        assert "Rank 1: identification" in text
        assert "VERDICTS" in text


class TestFormatDuration:

    @pytest.mark.parametrize("seconds, expected", [(5, "5s"), (61, "1m 1s"), (3725, "1h 2m")])
    def test_formats(self, seconds, expected):
        assert format_duration(seconds) == expected
