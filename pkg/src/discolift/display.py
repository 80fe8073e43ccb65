"""CLI output formatting: metric tables and pass/fail verdicts."""

from typing import List, Optional, Sequence, Tuple

from colorama import Fore, Style
from tabulate import tabulate

from .compare import ComparisonReport
from .normbounded import CertificationResult
from .training import EvaluationReport, HistoryRow


def _num(value: float) -> str:
    return f"{value:.6g}"


def verdict(passed: bool, label: Optional[str] = None) -> str:
    """Coloured PASS/FAIL marker."""
    if passed:
        text = f"{Fore.GREEN}PASS{Style.RESET_ALL}"
    else:
        text = f"{Fore.RED}FAIL{Style.RESET_ALL}"
    return f"{text} {label}" if label else text


def format_metrics_table(report: EvaluationReport) -> str:
    rows = [[name, _num(value)] for name, value in report.rows()]
    return tabulate(rows, headers=["Metric", report.mode], tablefmt="grid")


def format_history_tail(history: Sequence[HistoryRow], count: int = 5) -> str:
    """Last few epochs of a training history."""
    rows = [
        [row.epoch, _num(row.train_pred), _num(row.val_pred), _num(row.gamma), _num(row.d_frob)]
        for row in history[-count:]
    ]
    headers = ["Epoch", "Train L_pred", "Val L_pred", "gamma", "||D||_F"]
    return tabulate(rows, headers=headers, tablefmt="grid")


def format_certification_table(result: CertificationResult) -> str:
    dims = result.dims
    rows: List[Tuple[str, str]] = [
        ("draws", str(result.draws)),
        ("dims (n_x, n_u, n_y)", f"{dims.n_x}, {dims.n_u}, {dims.n_y}"),
        ("max hinf / gamma", _num(result.max_ratio)),
        ("max spectral radius", _num(result.max_spectral_radius)),
        ("max stripped excess", _num(result.max_stripped_excess)),
        ("failures", str(result.failures)),
    ]
    return tabulate(rows, headers=["Check", "Value"], tablefmt="grid")


def format_hinf_table(hinf: float, gamma: float, d_op: float, rho: float) -> str:
    rows = [
        ["||Delta_stripped||_inf", _num(hinf)],
        ["gamma", _num(gamma)],
        ["||D||_2", _num(d_op)],
        ["gamma + ||D||_2", _num(gamma + d_op)],
        ["rho(A)", _num(rho)],
    ]
    return tabulate(rows, headers=["Quantity", "Value"], tablefmt="grid")


def format_comparison_table(report: ComparisonReport) -> str:
    """Mean MSE per channel of P and G against the nonlinear plant."""
    rows = [
        [channel, _num(nominal), _num(learned), "✓" if learned <= nominal else "-"]
        for channel, nominal, learned in report.channel_means()
    ]
    headers = ["Channel", "MSE nominal", "MSE learned", "Improved"]
    return tabulate(rows, headers=headers, tablefmt="grid")
