"""
Convergence detection, analytic cost models and the comparison report.

Accuracy series are in percent, so the convergence ``epsilon`` is in
percentage points.
"""

from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
from loguru import logger

from hefl.errors import ReportError

if TYPE_CHECKING:
    from hefl.config import ExperimentConfig
    from hefl.protocol import CostLedger, HistoryRecord

MEGABYTE = 1e6


class ConvergenceRule(pydantic.BaseModel):
    window: int = pydantic.Field(12, ge=1, description="Trailing moving-average window.")
    epsilon: float = pydantic.Field(0.1, gt=0, description="Minimum improvement, in percentage points.")
    patience: int = pydantic.Field(10, ge=1, description="Consecutive non-improving rounds before firing.")

    class Config:
        validate_assignment = True


def smooth(series: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what is available."""
    values = np.asarray(series, dtype=np.float64)
    sums = np.cumsum(values)
    out = np.empty_like(values)
    for t in range(len(values)):
        lo = max(0, t - window + 1)
        out[t] = (sums[t] - (sums[lo - 1] if lo else 0.0)) / (t - lo + 1)
    return out


def detect_convergence(accuracies: Sequence[float], rule: ConvergenceRule) -> Optional[int]:
    """
    First zero-based round ``t`` at which the smoothed accuracy has failed to
    beat its running maximum by ``epsilon`` for ``patience`` consecutive
    rounds ending at ``t``; ``None`` when that never happens.
    """
    smoothed = smooth(accuracies, rule.window)
    streak = 0
    best = -np.inf
    for t, value in enumerate(smoothed):
        if t > 0:
            streak = streak + 1 if value - best < rule.epsilon else 0
            if streak >= rule.patience:
                return t
        best = max(best, value)
    return None


def rounds_to_convergence(accuracies: Sequence[float], rule: ConvergenceRule) -> int:
    """Rounds run until convergence, or the series length when it never converged."""
    index = detect_convergence(accuracies, rule)
    return len(accuracies) if index is None else index + 1


# --- Cost models.


def cost_fedavg_he(n: float, cost_fedavg: float, cost_he: float) -> float:
    """Total cost of ``n`` rounds of encrypted federated averaging."""
    if min(n, cost_fedavg, cost_he) < 0:
        raise ValueError("cost model inputs must be non-negative")
    return n * (cost_fedavg + cost_he)


def cost_heintfl(n_hat: float, rho: float, cost_fedavg: float, cost_he_hat: float) -> float:
    """Total cost of ``n_hat`` interleaved rounds, a fraction ``rho`` of them synthetic."""
    if min(n_hat, cost_fedavg, cost_he_hat) < 0 or not 0.0 <= rho <= 1.0:
        raise ValueError("cost model inputs must be non-negative and rho must lie in [0, 1]")
    return n_hat * (cost_fedavg + (1.0 - rho) * cost_he_hat)


# --- Report.


class RunOutcome(pydantic.BaseModel):
    """One repetition of one configuration, as read back from its run directory."""

    label: str
    rho_syn: int
    rho_tot: int
    eta: float
    num_clients: int
    is_baseline: bool = False
    repetition: int = 0
    rule: ConvergenceRule = ConvergenceRule()
    history: List["HistoryRecord"]
    ledger: "CostLedger"

    class Config:
        arbitrary_types_allowed = True

    @property
    def rho(self) -> float:
        return self.rho_syn / self.rho_tot

    @property
    def key(self) -> Tuple[int, int, float]:
        return self.rho_syn, self.rho_tot, self.eta

    @classmethod
    def from_training(cls, config: "ExperimentConfig", history, ledger, repetition: int = 0) -> "RunOutcome":
        return cls(
            label=config.run.name,
            rho_syn=config.schedule.rho_syn,
            rho_tot=config.schedule.rho_tot,
            eta=config.crypto.eta,
            num_clients=config.federation.num_clients,
            is_baseline=config.run.baseline,
            repetition=repetition,
            rule=ConvergenceRule(**config.stopping.dict(include={"window", "epsilon", "patience"})),
            history=history,
            ledger=ledger,
        )


class RunSummary(pydantic.BaseModel):
    rounds: int
    converged: bool
    accuracy_pct: float
    peak_accuracy_pct: float
    peak_round: int
    ciphertext_mb: float
    total_comm_mb: float
    comp_time_s: float
    he_time_s: float
    he_ops: float
    cost_fedavg_bytes: float
    cost_he_bytes: float
    cost_fedavg_s: float
    cost_he_s: float


def summarize_run(outcome: RunOutcome) -> RunSummary:
    """
    Metrics of one repetition up to its convergence round. Communication and
    computation are per client (ledger totals divided by the client count).
    """
    accuracies = [h.test_accuracy for h in outcome.history]
    if not accuracies:
        raise ReportError(f"{outcome.label}: empty history")
    index = detect_convergence(accuracies, outcome.rule)
    rounds = len(accuracies) if index is None else index + 1
    totals = outcome.ledger.totals(rounds)
    records = outcome.ledger.records[:rounds]
    peak = int(np.argmax(accuracies[:rounds]))

    plain_per_round = [r.uplink_plaintext_bytes + r.broadcast_plaintext_bytes for r in records]
    cipher_per_auth = [r.uplink_ciphertext_bytes + r.broadcast_ciphertext_bytes for r in records if r.is_authentic]
    fedavg_time = [r.train_time + r.agg_time for r in records]
    he_time = [r.enc_time + r.dec_time for r in records if r.is_authentic]
    comm = (
        totals["uplink_plaintext_bytes"]
        + totals["uplink_ciphertext_bytes"]
        + totals["broadcast_plaintext_bytes"]
        + totals["broadcast_ciphertext_bytes"]
    )
    return RunSummary(
        rounds=rounds,
        converged=index is not None,
        accuracy_pct=accuracies[rounds - 1],
        peak_accuracy_pct=accuracies[peak],
        peak_round=outcome.history[peak].round,
        ciphertext_mb=totals["uplink_ciphertext_bytes"] / MEGABYTE,
        total_comm_mb=comm / outcome.num_clients / MEGABYTE,
        comp_time_s=(totals["train_time"] + totals["enc_time"] + totals["dec_time"]) / outcome.num_clients,
        he_time_s=(totals["enc_time"] + totals["dec_time"]) / outcome.num_clients,
        he_ops=(totals["enc_ops"] + totals["dec_ops"]) / outcome.num_clients,
        cost_fedavg_bytes=float(np.mean(plain_per_round)),
        cost_he_bytes=float(np.mean(cipher_per_auth)) if cipher_per_auth else 0.0,
        cost_fedavg_s=float(np.mean(fedavg_time)),
        cost_he_s=float(np.mean(he_time)) if he_time else 0.0,
    )


METRICS = ("rounds", "ciphertext_mb", "total_comm_mb", "comp_time_s", "he_time_s", "he_ops", "accuracy_pct")


class ReportRow(pydantic.BaseModel):
    label: str
    rho: float
    eta: float
    is_baseline: bool
    repetitions: int
    rounds: float
    ciphertext_mb: float
    total_comm_mb: float
    comp_time_s: float
    he_time_s: float
    he_ops: float
    accuracy_pct: float
    peak_accuracy_pct: float
    peak_round: float
    deltas: Dict[str, Optional[float]] = {}
    model_cost_mb: float = 0.0
    model_cost_s: float = 0.0


class ExperimentReport(pydantic.BaseModel):
    rows: List[ReportRow]
    metadata: Dict[str, str] = {}

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = row.dict(exclude={"deltas"})
            for metric in METRICS:
                record[f"delta_{metric}"] = row.deltas.get(metric)
            records.append(record)
        return pd.DataFrame(records)

    def to_text(self) -> str:
        """Fixed-width table; each metric is followed by its percent change against the baseline."""
        lines = []
        for row in self.rows:
            line = {"config": row.label, "rho": f"{row.rho:.2f}", "eta": f"{row.eta:.2f}"}
            for metric in METRICS:
                delta = row.deltas.get(metric)
                suffix = "" if row.is_baseline else (" [n/a]" if delta is None else f" [{delta:+.1f}%]")
                line[metric] = f"{getattr(row, metric):.2f}{suffix}"
            lines.append(line)
        text = pd.DataFrame(lines).to_string(index=False)
        notes = "\n".join(f"# {k}: {v}" for k, v in self.metadata.items())
        return f"{text}\n{notes}\n" if notes else f"{text}\n"


def _delta(value: float, base: float) -> Optional[float]:
    if base == 0:
        return 0.0 if value == 0 else None
    return (value - base) / base * 100.0


def build_report(runs: Sequence[RunOutcome]) -> ExperimentReport:
    """
    Groups repetitions by configuration, drops the best and the worst
    repetition by accuracy, averages the rest and expresses every metric as a
    percent change against the baseline configuration (the one flagged as
    baseline, else rho=0 and eta=0.2).

    Raises:
        ReportError: When a configuration has fewer than three repetitions or
            no baseline can be identified.
    """
    groups: Dict[Tuple[int, int, float], List[RunOutcome]] = {}
    for run in runs:
        groups.setdefault(run.key, []).append(run)
    if not groups:
        raise ReportError("no runs to report")

    rows = []
    for key, members in groups.items():
        if len(members) < 3:
            raise ReportError(f"configuration {members[0].label} has {len(members)} repetitions; at least 3 are required")
        summaries = sorted((summarize_run(m) for m in members), key=lambda s: s.accuracy_pct)
        kept = summaries[1:-1]
        mean = {field: float(np.mean([getattr(s, field) for s in kept])) for field in RunSummary.__fields__ if field != "converged"}
        rho = members[0].rho
        rows.append(
            ReportRow(
                label=members[0].label,
                rho=rho,
                eta=members[0].eta,
                is_baseline=any(m.is_baseline for m in members),
                repetitions=len(members),
                rounds=mean["rounds"],
                ciphertext_mb=mean["ciphertext_mb"],
                total_comm_mb=mean["total_comm_mb"],
                comp_time_s=mean["comp_time_s"],
                he_time_s=mean["he_time_s"],
                he_ops=mean["he_ops"],
                accuracy_pct=mean["accuracy_pct"],
                peak_accuracy_pct=mean["peak_accuracy_pct"],
                peak_round=mean["peak_round"],
                model_cost_mb=cost_heintfl(mean["rounds"], rho, mean["cost_fedavg_bytes"], mean["cost_he_bytes"]) / MEGABYTE,
                model_cost_s=cost_heintfl(mean["rounds"], rho, mean["cost_fedavg_s"], mean["cost_he_s"]),
            )
        )

    baselines = [row for row in rows if row.is_baseline]
    if not baselines:
        baselines = [row for row in rows if row.rho == 0 and abs(row.eta - 0.2) < 1e-12]
    if not baselines:
        raise ReportError("no baseline configuration (flag one, or include rho=0, eta=0.2)")
    if len(baselines) > 1:
        raise ReportError(f"{len(baselines)} configurations are flagged as baseline")
    baseline = baselines[0]
    baseline.is_baseline = True
    for row in rows:
        row.deltas = {metric: _delta(getattr(row, metric), getattr(baseline, metric)) for metric in METRICS}

    rows.sort(key=lambda r: (not r.is_baseline, r.rho, r.eta))
    rule = runs[0].rule
    logger.debug(f"Report over {len(rows)} configurations, baseline {baseline.label}")
    return ExperimentReport(
        rows=rows,
        metadata={
            "baseline": baseline.label,
            "convergence": (
                f"trailing mean over {rule.window} rounds fails to exceed its running maximum by "
                f"{rule.epsilon} points for {rule.patience} consecutive rounds"
            ),
            "repetitions": "best and worst repetition by accuracy dropped before averaging",
            "per_client": "total_comm_mb, comp_time_s, he_time_s and he_ops are ledger totals divided by the client count",
        },
    )


def accuracy_curves(runs: Sequence[RunOutcome]) -> pd.DataFrame:
    """Long-format ``(label, repetition, round, is_authentic, test_accuracy)`` table."""
    rows = [
        {
            "label": run.label,
            "repetition": run.repetition,
            "round": h.round,
            "is_authentic": h.is_authentic,
            "test_accuracy": h.test_accuracy,
        }
        for run in runs
        for h in run.history
    ]
    return pd.DataFrame(rows, columns=["label", "repetition", "round", "is_authentic", "test_accuracy"])
