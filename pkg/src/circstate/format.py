from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np
from rich.table import Table
from rich.text import Text

from circstate.anneal import AnnealResult
from circstate.forecast import ForecastSummary
from circstate.gp import ValidationCase
from circstate.mcmc import SampleSet

BLOCK_LABELS: dict[str, str] = {
    "sigma_eps": "σ_ε walk",
    "sigma_f": "σ_f walk",
    "sigma_eta": "σ_η walk",
    "sigma_g": "σ_g walk",
    "x0": "x₀ von Mises",
    "x": "x_t mixture",
    "k": "K_t discrete walk",
}


def format_estimates_table(result: AnnealResult) -> Table:
    table = Table(title="Annealing MLE", expand=True)
    table.add_column("parameter", style="bold")
    table.add_column("estimate", justify="right", no_wrap=True)
    table.add_column("variance", justify="right", no_wrap=True)

    table.add_row("σ_g", f"{result.sigma_g:.4f}", f"{result.sigma2_g:.6f}")
    table.add_row("σ_η", f"{result.sigma_eta:.4f}", f"{result.sigma2_eta:.6f}")
    accepted = sum(step.accepted for step in result.trace[1:])
    table.caption = (
        f"log-likelihood {result.loglik:.4f}, "
        f"{accepted}/{max(len(result.trace) - 1, 0)} proposals accepted"
    )
    return table


def format_acceptance_table(rates: Mapping[str, float]) -> Table:
    table = Table(title="Metropolis Acceptance", expand=True)
    table.add_column("block", style="cyan", no_wrap=True)
    table.add_column("proposal")
    table.add_column("rate", justify="right", no_wrap=True)

    for block in sorted(rates):
        rate = rates[block]
        style = "yellow" if rate < 0.1 or rate > 0.9 else ""
        table.add_row(block, block_label(block), Text(f"{rate:.3f}", style=style))

    if not rates:
        table.add_row("-", "No Metropolis blocks ran", "-")
    return table


def format_forecast_table(summary: ForecastSummary) -> Table:
    pct = round(summary.level * 100)
    table = Table(title=f"One-step Forecast at t = {summary.t_next:g}", expand=True)
    table.add_column("scale", style="bold")
    table.add_column("mean", justify="right", no_wrap=True)
    table.add_column("median", justify="right", no_wrap=True)
    table.add_column(f"{pct}% HPD", justify="center", no_wrap=True)
    table.add_column("held out", justify="right", no_wrap=True)

    rows = [("modelled", summary)]
    original = summary.original_scale()
    if original is not None:
        rows = [("detrended", summary), ("original", original)]
    for label, row in rows:
        table.add_row(
            label,
            f"{row.mean:.4f}",
            f"{row.median:.4f}",
            f"[{row.hpd_lo:.4f}, {row.hpd_hi:.4f}]",
            _format_holdout(row),
        )
    table.caption = f"{summary.n_draws} predictive draws"
    return table


def format_validation_table(cases: Sequence[ValidationCase]) -> Table:
    table = Table(title="GP Covariance Check", expand=True)
    table.add_column("ψ", justify="right", no_wrap=True)
    table.add_column("Δt", justify="right", no_wrap=True)
    table.add_column("Δθ", justify="right", no_wrap=True)
    table.add_column("closed form", justify="right", no_wrap=True)
    table.add_column("quadrature", justify="right", no_wrap=True)
    table.add_column("error", justify="right", no_wrap=True)
    table.add_column("result", justify="center", no_wrap=True)

    for case in cases:
        result = Text("pass", style="green") if case.passed else Text("FAIL", style="bold red")
        table.add_row(
            f"{case.psi:g}",
            f"{case.dt:g}",
            f"{case.dtheta:.4f}",
            f"{case.closed_form:.8f}",
            f"{case.oracle:.8f}",
            f"{case.error:.2e}",
            result,
        )

    if not cases:
        table.add_row("-", "-", "-", "-", "-", "-", "no cases")
    return table


def format_posterior_table(samples: SampleSet) -> Table:
    table = Table(title=f"Posterior Summary ({samples.n_kept} draws)", expand=True)
    table.add_column("parameter", style="bold")
    table.add_column("mean", justify="right", no_wrap=True)
    table.add_column("sd", justify="right", no_wrap=True)
    table.add_column("2.5%", justify="right", no_wrap=True)
    table.add_column("97.5%", justify="right", no_wrap=True)

    for name, values in posterior_columns(samples):
        if values.size == 0:
            continue
        lo, hi = np.quantile(values, [0.025, 0.975])
        table.add_row(
            name,
            f"{np.mean(values):.4f}",
            f"{np.std(values):.4f}",
            f"{lo:.4f}",
            f"{hi:.4f}",
        )

    if samples.n_kept == 0:
        table.add_row("-", "No kept draws", "-", "-", "-")
    return table


def posterior_columns(samples: SampleSet) -> list[tuple[str, np.ndarray]]:
    columns = [(f"β_f[{i + 1}]", samples.beta_f[:, i]) for i in range(samples.beta_f.shape[1])]
    columns += [(f"β_g[{i + 1}]", samples.beta_g[:, i]) for i in samples.free_indices]
    columns += [("σ²_ε", samples.sigma2_eps), ("σ²_f", samples.sigma2_f)]
    if samples.evolution_sampled:
        columns += [("σ²_η", samples.sigma2_eta), ("σ²_g", samples.sigma2_g)]
    return columns


def format_trace_line(logp_trace: np.ndarray, burn_in: int) -> Text:
    trace = np.asarray(logp_trace, dtype=float)
    if trace.size == 0:
        return Text("Trace: no iterations recorded", style="dim")
    kept = trace[burn_in:] if burn_in < trace.size else trace
    return Text(
        f"Trace: {trace.size} iterations, log-density {trace[0]:.2f} → {trace[-1]:.2f}, "
        f"post burn-in mean {np.mean(kept):.2f} (sd {np.std(kept):.2f})"
    )


def block_label(block: str) -> str:
    return BLOCK_LABELS.get(block, block)


def _format_holdout(summary: ForecastSummary) -> str:
    if summary.holdout is None:
        return "-"
    mark = "inside" if summary.covers_holdout else "outside"
    return f"{summary.holdout:.4f} ({mark})"
