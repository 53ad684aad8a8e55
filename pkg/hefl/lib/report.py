import os
from typing import List, Optional, Sequence

import plotly.graph_objects as go
from loguru import logger

from hefl.analysis import accuracy_curves, build_report
from hefl.config import ExperimentConfig
from hefl.errors import ReportError
from hefl.lib.artifacts import allocate_dir, load_run_outcomes
from hefl.lib.runner import Runner


def accuracy_chart(curves, path: str):
    figure = go.Figure()
    for (label, repetition), group in curves.groupby(["label", "repetition"], sort=True):
        figure.add_trace(go.Scatter(x=group["round"], y=group["test_accuracy"], mode="lines", name=f"{label} #{repetition}"))
    figure.update_layout(xaxis_title="Round", yaxis_title="Test accuracy [%]", template="simple_white")
    figure.write_html(path, include_plotlyjs=True, full_html=True)


class ReportRunner(Runner):
    """Compares finished runs against the baseline run."""

    def __init__(self, run_dirs: Sequence[str], output_dir: Optional[str] = None, config: Optional[ExperimentConfig] = None):
        super().__init__(config)
        if not run_dirs:
            raise ReportError("no run directories given")
        self.run_dirs: List[str] = list(run_dirs)
        self.output_dir = output_dir

    def run(self) -> str:
        outcomes = [outcome for run_dir in self.run_dirs for outcome in load_run_outcomes(run_dir)]
        if not any(outcome.is_baseline for outcome in outcomes):
            raise ReportError("no run is flagged as baseline (train it with --run.baseline)")
        report = build_report(outcomes)
        out_dir = allocate_dir(self.output_dir or self.config.run.output_dir, "report")

        report.to_frame().to_csv(os.path.join(out_dir, "report.csv"), index=False)
        with open(os.path.join(out_dir, "report.txt"), "w") as f:
            f.write(report.to_text())
        curves = accuracy_curves(outcomes)
        curves.to_csv(os.path.join(out_dir, "curves.csv"), index=False)
        accuracy_chart(curves, os.path.join(out_dir, "curves.html"))

        logger.info("\n" + report.to_text())
        logger.success(f"Report written to {out_dir}")
        return out_dir
