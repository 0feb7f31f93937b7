from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn

from circstate.anneal import IntegratedLikelihoodError, anneal, sample_prior_draw
from circstate.circular import CircularDomainError, circular_mean, circular_variance
from circstate.config import (
    RunConfig,
    config_hash,
    config_path,
    load_config,
    save_config,
)
from circstate.data import (
    ARTIFACT_VERSION,
    Dataset,
    DatasetError,
    detrend_linear,
    read_dataset,
    read_key_values,
    read_samples,
    read_table,
    retrend,
    write_dataset,
    write_key_values,
    write_samples,
    write_table,
)
from circstate.forecast import (
    ForecastSummary,
    HpdError,
    latent_density_grid,
    posterior_predictive,
    summarize_forecast,
)
from circstate.format import (
    format_acceptance_table,
    format_estimates_table,
    format_forecast_table,
    format_posterior_table,
    format_trace_line,
    format_validation_table,
)
from circstate.gp import QuadratureError, SingularMatrixError, validate_closed_form
from circstate.mcmc import ChainError, SampleSet, run_chains
from circstate.model import (
    DegenerateTransitionError,
    GridConstructionError,
    LookupGrid,
    build_grid,
    time_range,
)
from circstate.simulate import (
    NonlinearSimConfig,
    SimulationError,
    nonlinear_dataset,
    simulate_from_model,
)

app = typer.Typer(
    help="Forecast a series driven by a latent circular process.", no_args_is_help=True
)
console = Console()

DOMAIN_ERRORS = (
    ChainError,
    CircularDomainError,
    DegenerateTransitionError,
    GridConstructionError,
    HpdError,
    IntegratedLikelihoodError,
    QuadratureError,
    SimulationError,
    SingularMatrixError,
)

ConfigOption = typer.Option(None, "--config", "-c", help="Path to a TOML config file.")
SeedOption = typer.Option(None, "--seed", "-s", min=0, help="Master seed; overrides the config.")
OutOption = typer.Option(Path("out"), "--out", "-o", help="Directory for output files.")
DataOption = typer.Option(
    None, "--data", "-d", help="Dataset CSV. Defaults to dataset.csv in the output directory."
)


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug output to stderr."),
) -> None:
    """Simulate, estimate, sample and forecast the circular state-space model."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.command()
def simulate(
    config: Path | None = ConfigOption,
    seed: int | None = SeedOption,
    out: Path = OutOption,
) -> None:
    """Write a synthetic dataset.csv (benchmark recursion or the model itself)."""
    run = _load_config_safe(config, seed)
    sim = run.simulate
    with _domain_errors():
        if sim.generator == "nonlinear":
            dataset = nonlinear_dataset(
                NonlinearSimConfig(
                    T=sim.T,
                    alpha=sim.alpha,
                    beta=sim.beta,
                    gamma=sim.gamma,
                    sigma_u=sim.sigma_u,
                    sigma_v=sim.sigma_v,
                    theta0=sim.theta0,
                    seed=run.seed,
                )
            )
        else:
            dataset = _simulate_model_dataset(run)
    path = write_dataset(
        out / "dataset.csv", dataset, {**_provenance(run), "generator": sim.generator}
    )
    console.print(f"[green]Wrote[/green] {path} ({dataset.T} observations)")


@app.command()
def mle(
    config: Path | None = ConfigOption,
    seed: int | None = SeedOption,
    out: Path = OutOption,
    data: Path | None = DataOption,
) -> None:
    """Estimate σ_g and σ_η by simulated annealing; writes estimates.txt."""
    run = _load_config_safe(config, seed)
    train = _load_training(run, data or out / "dataset.csv")
    prior = run.prior.to_spec()
    with _domain_errors():
        grid = _build_grid(run, train, run.anneal.init_sigma_g)
        result = anneal(
            train.y,
            grid,
            prior,
            run.anneal,
            run.seed,
            times=train.times,
            fixed_mask=run.model.beta_g_fixed,
        )

    trace = pd.DataFrame([asdict(step) for step in result.trace])
    write_table(out / "anneal_trace.csv", trace, _provenance(run))
    write_key_values(
        out / "estimates.txt",
        {
            **_provenance(run),
            "sigma_g": result.sigma_g,
            "sigma_eta": result.sigma_eta,
            "sigma2_g": result.sigma2_g,
            "sigma2_eta": result.sigma2_eta,
            "loglik": result.loglik,
            "iterations": run.anneal.iterations,
            "mc_samples": run.anneal.mc_samples,
        },
    )
    console.print(format_estimates_table(result))


@app.command()
def fit(
    config: Path | None = ConfigOption,
    seed: int | None = SeedOption,
    out: Path = OutOption,
    data: Path | None = DataOption,
    estimates: Path | None = typer.Option(
        None,
        "--estimates",
        "-e",
        help="estimates.txt from `mle`. Defaults to the output directory, then the config.",
    ),
    chains: int | None = typer.Option(
        None, "--chains", "-n", min=1, help="Number of independent chains."
    ),
) -> None:
    """Run the Metropolis-within-Gibbs sampler; writes samples.csv and trace.csv."""
    run = _load_config_safe(config, seed)
    if chains is not None:
        run = replace(run, mcmc=replace(run.mcmc, chains=chains))
    train = _load_training(run, data or out / "dataset.csv")
    sigma2_g, sigma2_eta = _evolution_variances(run, estimates or out / "estimates.txt")
    prior = run.prior.to_spec()
    n_chains = run.mcmc.chains

    with _domain_errors():
        grid = _build_grid(run, train, math.sqrt(sigma2_g))
        if n_chains == 1:
            with _progress() as progress:
                task = progress.add_task("Sampling", total=run.mcmc.n_iter)
                samples = run_chains(
                    train.y,
                    grid,
                    prior,
                    (sigma2_g, sigma2_eta),
                    run.mcmc,
                    run.seed,
                    times=train.times,
                    t_next=train.next_time(),
                    fixed_mask=run.model.beta_g_fixed,
                    k_max=run.model.k_max,
                    progress=lambda i: progress.update(task, completed=i),
                )
        else:
            console.print(f"Sampling {n_chains} chains in parallel...")
            samples = run_chains(
                train.y,
                grid,
                prior,
                (sigma2_g, sigma2_eta),
                run.mcmc,
                run.seed,
                n_chains=n_chains,
                times=train.times,
                t_next=train.next_time(),
                fixed_mask=run.model.beta_g_fixed,
                k_max=run.model.k_max,
            )

    metadata = _provenance(run)
    write_samples(out / "samples.csv", samples, metadata)
    write_table(out / "trace.csv", _trace_frame(samples, run.mcmc.n_iter), metadata)
    console.print(format_posterior_table(samples))
    console.print(format_acceptance_table(samples.acceptance))


@app.command()
def forecast(
    config: Path | None = ConfigOption,
    seed: int | None = SeedOption,
    out: Path = OutOption,
    data: Path | None = DataOption,
    samples_path: Path | None = typer.Option(
        None, "--samples", help="samples.csv from `fit`. Defaults to the output directory."
    ),
) -> None:
    """Draw y_{T+1} from the posterior predictive; writes predictive.csv and forecast.txt."""
    run = _load_config_safe(config, seed)
    train = _load_training(run, data or out / "dataset.csv")
    samples = _load_samples(samples_path or out / "samples.csv")
    if samples.T != train.T:
        console.print(
            f"[red]Data error:[/red] samples describe T={samples.T}, the dataset has T={train.T}"
        )
        raise typer.Exit(code=2)
    level = run.output.hpd_level
    t_next = train.next_time()
    rng = np.random.default_rng(run.seed)

    with _domain_errors():
        draws = posterior_predictive(samples, train.y, rng, times=train.times, t_next=t_next)
        summary = summarize_forecast(
            draws.y_next, level, t_next=t_next, holdout=train.y_holdout, trend=train.trend
        )

    columns: dict[str, np.ndarray] = {
        "iter": draws.iterations,
        "y_next": draws.y_next,
        "mean": draws.means,
        "variance": draws.variances,
    }
    metadata = _provenance(run)
    values: dict[str, object] = {**metadata, **_summary_values("", summary)}
    original = summary.original_scale()
    if original is not None and train.trend is not None:
        columns["y_next_original"] = retrend(draws.y_next, t_next, train.trend)
        values.update(_summary_values("original_", original))
    write_table(out / "predictive.csv", pd.DataFrame(columns), metadata)
    write_key_values(out / "forecast.txt", values)
    console.print(format_forecast_table(summary))


@app.command()
def diagnose(
    config: Path | None = ConfigOption,
    seed: int | None = SeedOption,
    out: Path = OutOption,
    data: Path | None = typer.Option(
        None, "--data", "-d", help="Dataset with theta_true, for latent coverage."
    ),
    samples_path: Path | None = typer.Option(
        None, "--samples", help="samples.csv from `fit`. Defaults to the output directory."
    ),
    mass: float = typer.Option(
        0.5, "--mass", "-m", help="Probability mass of the high-density cells."
    ),
) -> None:
    """Write latent density grids, per-time summaries and acceptance rates."""
    if not 0.0 < mass <= 1.0:
        raise typer.BadParameter("--mass must lie in (0, 1].")
    run = _load_config_safe(config, seed)
    samples = _load_samples(samples_path or out / "samples.csv")
    truth = None
    times = None
    if data is not None:
        train = _load_training(run, data)
        truth = train.true_theta
        if train.T == samples.T:
            times = train.times
        if truth is not None and truth.size != samples.T:
            console.print(
                f"[red]Error:[/red] dataset has {truth.size} angles, samples have T={samples.T}"
            )
            raise typer.Exit(code=1)

    with _domain_errors():
        angles = samples.latent_angles()
        density = latent_density_grid(angles, run.output.n_bins, times=times)
        mask = density.high_density_mask(mass)

    metadata = _provenance(run)
    edges = density.edges
    cells = pd.DataFrame(
        {
            "t": np.repeat(density.times, density.n_bins),
            "bin": np.tile(np.arange(density.n_bins), density.times.size),
            "angle_lo": np.tile(edges[:-1], density.times.size),
            "angle_hi": np.tile(edges[1:], density.times.size),
            "freq": density.freq.T.ravel(),
        }
    )
    write_table(out / "density_grid.csv", cells, {**metadata, "n_bins": density.n_bins})

    summary: dict[str, object] = {
        "t": density.times,
        "median": density.medians,
        "mean": np.array([circular_mean(angles[:, j]) for j in range(samples.T)]),
        "variance": np.array([circular_variance(angles[:, j]) for j in range(samples.T)]),
    }
    if truth is not None:
        hits = np.array([mask[density.bin_of(float(a)), j] for j, a in enumerate(truth)])
        summary["theta_true"] = truth
        summary["covered"] = np.where(hits, "true", "false")
        console.print(f"Latent coverage at mass {mass:g}: {np.mean(hits):.3f}")
    write_table(out / "latent_summary.csv", pd.DataFrame(summary), {**metadata, "mass": mass})

    rates = pd.DataFrame(
        {
            "block": sorted(samples.acceptance),
            "rate": [float(samples.acceptance[b]) for b in sorted(samples.acceptance)],
        }
    )
    write_table(out / "acceptance.csv", rates, metadata)

    trace_path = (samples_path or out / "samples.csv").with_name("trace.csv")
    logp = samples.logp_trace
    if trace_path.exists():
        frame, _, _ = read_table(trace_path)
        logp = frame["logp"].astype(float).to_numpy()
    if logp.size:
        console.print(format_trace_line(logp, run.mcmc.burn_in))
    console.print(format_posterior_table(samples))
    console.print(format_acceptance_table(samples.acceptance))


@app.command("validate-gp")
def validate_gp(
    out: Path = OutOption,
    n_quad: int = typer.Option(2000, "--n-quad", min=1000, help="Quadrature nodes per axis."),
    tolerance: float = typer.Option(
        1e-6, "--tolerance", "-t", min=0.0, help="Largest accepted absolute error."
    ),
    config: Path | None = ConfigOption,
    seed: int | None = SeedOption,
) -> None:
    """Check the closed-form covariance against kernel-convolution quadrature."""
    run = _load_config_safe(config, seed)
    with _domain_errors():
        cases = validate_closed_form(tolerance=tolerance, n_quad=n_quad)
    frame = pd.DataFrame([asdict(case) for case in cases])
    frame["passed"] = np.where(frame["passed"], "true", "false")
    write_table(out / "gp_validation.csv", frame, {**_provenance(run), "tolerance": tolerance})
    console.print(format_validation_table(cases))
    failed = sum(not case.passed for case in cases)
    if failed:
        console.print(f"[red]Error:[/red] {failed} of {len(cases)} cases exceed {tolerance:g}")
        raise typer.Exit(code=1)


@app.command("init-config")
def init_config(
    path: Path | None = typer.Option(
        None, "--path", "-p", help="Where to write the file. Defaults to your user config dir."
    ),
    force: bool = typer.Option(False, "--force/--no-force", help="Overwrite an existing file."),
) -> None:
    """Write a config file holding every default."""
    target = path or config_path()
    if target.exists() and not force:
        console.print(f"[red]Error:[/red] {target} exists; use --force to overwrite it")
        raise typer.Exit(code=1)
    save_config(RunConfig(), target)
    console.print(f"[green]Saved defaults to[/green] {target}")


def _simulate_model_dataset(run: RunConfig) -> Dataset:
    sim = run.simulate
    prior = run.prior.to_spec()
    rng = np.random.default_rng(run.seed)
    grid = build_grid(
        run.grid.n, (1.0, float(sim.T)), run.grid.mode, math.sqrt(run.model.sigma2_g), rng
    )
    params, _ = sample_prior_draw(
        sim.T,
        grid,
        prior,
        math.sqrt(run.model.sigma2_g),
        math.sqrt(run.model.sigma2_eta),
        rng,
        fixed_mask=run.model.beta_g_fixed,
    )
    return simulate_from_model(sim.T, grid, params, prior, run.seed)


def _build_grid(run: RunConfig, train: Dataset, sigma_g: float) -> LookupGrid:
    rng = np.random.default_rng(run.seed)
    return build_grid(run.grid.n, time_range(train.times), run.grid.mode, sigma_g, rng)


def _load_training(run: RunConfig, path: Path) -> Dataset:
    try:
        dataset = read_dataset(path, theta_in_degrees=run.data.theta_in_degrees)
        if run.data.holdout and dataset.y_holdout is None:
            dataset = dataset.split_holdout()
        if run.data.detrend:
            dataset, _ = detrend_linear(dataset)
    except DatasetError as exc:
        console.print(f"[red]Data error:[/red] {exc}")
        raise typer.Exit(code=2) from exc
    return dataset


def _load_samples(path: Path) -> SampleSet:
    try:
        samples, _ = read_samples(path)
    except DatasetError as exc:
        console.print(f"[red]Data error:[/red] {exc}")
        raise typer.Exit(code=2) from exc
    if samples.n_kept == 0:
        console.print(f"[red]Data error:[/red] {path} holds no posterior draws")
        raise typer.Exit(code=2)
    return samples


def _evolution_variances(run: RunConfig, path: Path) -> tuple[float, float]:
    """(σ²_g, σ²_η) from an estimates file when present, else from the config."""
    if not path.exists():
        return run.model.sigma2_g, run.model.sigma2_eta
    try:
        values = read_key_values(path)
        return float(values["sigma2_g"]), float(values["sigma2_eta"])
    except (DatasetError, KeyError, ValueError) as exc:
        console.print(f"[red]Data error:[/red] {path} is not a usable estimates file: {exc}")
        raise typer.Exit(code=2) from exc


def _trace_frame(samples: SampleSet, n_iter: int) -> pd.DataFrame:
    n_chains = max(samples.logp_trace.size // n_iter, 1)
    return pd.DataFrame(
        {
            "iter": np.tile(np.arange(1, n_iter + 1), n_chains)[: samples.logp_trace.size],
            "chain": np.repeat(np.arange(n_chains), n_iter)[: samples.logp_trace.size],
            "logp": samples.logp_trace,
        }
    )


def _summary_values(prefix: str, summary: ForecastSummary) -> dict[str, object]:
    values: dict[str, object] = {
        f"{prefix}level": summary.level,
        f"{prefix}mean": summary.mean,
        f"{prefix}median": summary.median,
        f"{prefix}hpd_lo": summary.hpd_lo,
        f"{prefix}hpd_hi": summary.hpd_hi,
        f"{prefix}n_draws": summary.n_draws,
        f"{prefix}t_next": summary.t_next,
    }
    if summary.holdout is not None:
        values[f"{prefix}holdout"] = summary.holdout
        values[f"{prefix}covers_holdout"] = str(summary.covers_holdout).lower()
    return values


def _provenance(run: RunConfig) -> dict[str, object]:
    return {
        "config_hash": config_hash(run),
        "seed": run.seed,
        "artifact_version": ARTIFACT_VERSION,
    }


def _progress() -> Progress:
    return Progress(
        TextColumn("{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        console=console,
        transient=True,
    )


@contextmanager
def _domain_errors() -> Iterator[None]:
    try:
        yield
    except DOMAIN_ERRORS as exc:
        console.print(f"[red]Error:[/red] {exc}")
        raise typer.Exit(code=1) from exc


def _load_config_safe(path: Path | None, seed: int | None) -> RunConfig:
    try:
        run = load_config(path)
    except ValueError as exc:
        console.print(f"[red]Config error:[/red] {exc}")
        raise typer.Exit(code=2) from exc
    if seed is not None:
        run = replace(run, seed=seed)
    return run


if __name__ == "__main__":
    app()
