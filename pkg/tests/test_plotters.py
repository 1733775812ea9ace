import numpy as np
import pandas as pd
import pytest

from bt_confidence.errors import DimensionError
from bt_confidence.interactive_plotter import InteractiveReportPlotter
from bt_confidence.report_plotter import ReportPlotter

SWEEP = pd.DataFrame({
    "size": [0, 0, 10, 10, 20, 20],
    "variant": ["baseline", "confidence"] * 3,
    "tst1": [10.0, 10.0, 12.0, 13.0, 12.5, 14.0],
    "All": [11.0, 11.0, 12.5, 13.5, 13.0, 14.5],
})


def test_loss_curve_png(tmp_path):
    plotter = ReportPlotter(dpi=40)
    steps = np.arange(1, 31)
    log = pd.DataFrame({"step": steps, "loss": 4.0 / np.sqrt(steps), "lr": steps * 1e-4})
    fig = plotter.plot_loss_curve(log, smooth=3, save_path=str(tmp_path / "loss.png"))
    assert (tmp_path / "loss.png").stat().st_size > 0
    assert len(fig.axes) == 2
    plotter.close()
    assert plotter.fig is None


def test_sweep_and_measure_png(tmp_path):
    plotter = ReportPlotter(dpi=40)
    fig = plotter.plot_size_sweep(SWEEP, save_path=str(tmp_path / "sweep.png"))
    assert len(fig.axes[0].get_lines()) == 2
    plotter.close()

    table = pd.DataFrame({"seed_0": [10.0, 11.0], "seed_1": [10.4, 11.6]}, index=["none", "cev"])
    table["median"] = table[["seed_0", "seed_1"]].median(axis=1)
    plotter.plot_measure_comparison(table, save_path=str(tmp_path / "measures.png"))
    plotter.close()
    assert (tmp_path / "sweep.png").exists() and (tmp_path / "measures.png").exists()


def test_interactive_sweep():
    fig = InteractiveReportPlotter().plot_size_sweep_interactive(SWEEP)
    assert [t.name for t in fig.data] == ["baseline", "confidence"]
    assert list(fig.data[1].y) == [11.0, 13.5, 14.5]


def test_attention_confidence_figure(tmp_path):
    plotter = InteractiveReportPlotter()
    w = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]])
    fig = plotter.plot_attention_confidence(w, [1.0, 0.5, 0.0], ["ba", "de", "fi"])
    assert len(fig.data) == 2
    np.testing.assert_allclose(np.asarray(fig.data[1].z), [[0.7, 0.1, 0.0], [0.1, 0.3, 0.0]])
    plotter.save_html(fig, str(tmp_path / "attention.html"))
    assert "plotly" in (tmp_path / "attention.html").read_text(encoding="utf-8").lower()


def test_attention_shape_mismatch():
    with pytest.raises(DimensionError):
        InteractiveReportPlotter().plot_attention_confidence(np.ones((2, 3)) / 3, [1.0, 1.0], ["a", "b", "c"])
