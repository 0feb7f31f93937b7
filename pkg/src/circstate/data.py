"""Datasets, detrending and the CSV/key-value files the CLI reads and writes.

Every file starts with ``# key=value`` metadata lines followed by a plain CSV table.
Floats are written in shortest round-trip form, so read → write → read is exact.
"""

from __future__ import annotations

import io
import math
from collections.abc import Mapping
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from circstate import __version__
from circstate.circular import degrees_to_radians, mod_2pi
from circstate.mcmc import SampleSet
from circstate.model import next_time

ARTIFACT_VERSION = f"circstate-{__version__}"
METADATA_PREFIX = "# "
DATASET_COLUMNS = ("t", "y")
THETA_COLUMN = "theta_true"


class DatasetError(ValueError):
    """Raised for malformed data files; ``line`` is 1-based when known."""

    def __init__(self, msg: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True, eq=False)
class Dataset:
    times: np.ndarray
    y: np.ndarray
    y_holdout: float | None = None
    true_theta: np.ndarray | None = None
    trend: tuple[float, float] | None = None
    t_holdout: float | None = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        if times.ndim != 1 or times.shape != y.shape:
            msg = "times and y must be one-dimensional with equal lengths"
            raise DatasetError(msg)
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(y))):
            msg = "times and y must be finite"
            raise DatasetError(msg)
        if np.any(np.diff(times) <= 0.0):
            msg = "times must be strictly increasing"
            raise DatasetError(msg)
        if self.true_theta is not None:
            theta = mod_2pi(np.asarray(self.true_theta, dtype=float))
            if theta.shape != y.shape:
                msg = "theta_true must have one angle per observation"
                raise DatasetError(msg)
            object.__setattr__(self, "true_theta", theta)
        if self.t_holdout is not None and not (times.size and self.t_holdout > times[-1]):
            msg = "t_holdout must come after the last observation time"
            raise DatasetError(msg)

    @property
    def T(self) -> int:
        return int(self.y.size)

    def next_time(self) -> float:
        """Time of the held-out observation, else the next evenly spaced time."""
        if self.t_holdout is not None:
            return self.t_holdout
        return next_time(self.times)

    def split_holdout(self) -> Dataset:
        """Set the last observation aside as ``y_holdout``."""
        if self.T < 2:
            msg = "need at least two observations to hold one out"
            raise DatasetError(msg)
        theta = None if self.true_theta is None else self.true_theta[:-1]
        return replace(
            self,
            times=self.times[:-1],
            y=self.y[:-1],
            y_holdout=float(self.y[-1]),
            true_theta=theta,
            t_holdout=float(self.times[-1]),
        )


def detrend_linear(d: Dataset) -> tuple[Dataset, tuple[float, float]]:
    """OLS fit of y on (1, t); returns the residual series and (intercept, slope)."""
    if d.T < 3:
        msg = f"detrending needs at least 3 observations, got {d.T}"
        raise DatasetError(msg)
    if np.ptp(d.times) == 0.0:
        msg = "detrending needs non-constant times"
        raise DatasetError(msg)
    design = np.column_stack([np.ones(d.T), d.times])
    coef, *_ = np.linalg.lstsq(design, d.y, rcond=None)
    trend = (float(coef[0]), float(coef[1]))
    residual = d.y - design @ coef
    holdout = None
    if d.y_holdout is not None:
        holdout = d.y_holdout - (trend[0] + trend[1] * d.next_time())
    return replace(d, y=residual, y_holdout=holdout, trend=trend), trend


def retrend(
    values: np.ndarray | float, t: np.ndarray | float, trend: tuple[float, float]
) -> np.ndarray | float:
    return values + trend[0] + trend[1] * np.asarray(t, dtype=float)


def format_float(value: float) -> str:
    return repr(float(value))


def _metadata_lines(metadata: Mapping[str, object]) -> list[str]:
    lines = []
    for key, value in metadata.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            msg = f"metadata key/value cannot hold '=' in the key or newlines: {key!r}"
            raise ValueError(msg)
        text = format_float(value) if isinstance(value, float) else str(value)
        lines.append(f"{METADATA_PREFIX}{key}={text}")
    return lines


def _split_preamble(text: str) -> tuple[dict[str, str], int]:
    metadata: dict[str, str] = {}
    count = 0
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        count += 1
        body = line[1:].strip()
        key, sep, value = body.partition("=")
        if sep:
            metadata[key.strip()] = value.strip()
    return metadata, count


def read_metadata(path: Path) -> dict[str, str]:
    return _split_preamble(path.read_text(encoding="utf-8"))[0]


def write_table(path: Path, frame: pd.DataFrame, metadata: Mapping[str, object]) -> Path:
    frame = frame.copy()
    for name in frame.columns:
        if frame[name].dtype.kind == "f":
            frame[name] = frame[name].map(format_float)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    lines = _metadata_lines(metadata)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([*lines, buffer.getvalue()]), encoding="utf-8")
    return path


def read_table(path: Path) -> tuple[pd.DataFrame, dict[str, str], int]:
    """Raw string cells, the metadata and the 1-based line number of the header."""
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        msg = f"{path} does not exist"
        raise DatasetError(msg) from exc
    metadata, skip = _split_preamble(text)
    try:
        frame = pd.read_csv(
            io.StringIO(text),
            skiprows=skip,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        msg = f"{path} is not a readable CSV table: {exc}"
        raise DatasetError(msg) from exc
    return frame, metadata, skip + 1


def _float_column(frame: pd.DataFrame, column: str, header_line: int) -> np.ndarray:
    values = np.empty(len(frame))
    for i, raw in enumerate(frame[column].tolist()):
        line = header_line + 1 + i
        try:
            value = float(raw)
        except ValueError as exc:
            msg = f"column {column!r} holds {raw!r}, not a number"
            raise DatasetError(msg, line) from exc
        if not math.isfinite(value):
            msg = f"column {column!r} holds a non-finite value"
            raise DatasetError(msg, line)
        values[i] = value
    return values


def _int_column(frame: pd.DataFrame, column: str, header_line: int) -> np.ndarray:
    values = _float_column(frame, column, header_line)
    if np.any(values != np.round(values)):
        msg = f"column {column!r} must hold integers"
        raise DatasetError(msg)
    return values.astype(int)


def read_dataset(path: Path, *, theta_in_degrees: bool = False) -> Dataset:
    """Parse ``t,y[,theta_true]``; a ``y_holdout`` metadata entry is carried over."""
    frame, metadata, header = read_table(path)
    missing = [c for c in DATASET_COLUMNS if c not in frame.columns]
    if missing:
        msg = f"{path} lacks column(s) {', '.join(missing)}"
        raise DatasetError(msg, header)
    if frame.empty:
        msg = f"{path} holds no observations"
        raise DatasetError(msg)
    times = _float_column(frame, "t", header)
    for i in range(1, times.size):
        if times[i] <= times[i - 1]:
            msg = "t must be strictly increasing"
            raise DatasetError(msg, header + 1 + i)
    y = _float_column(frame, "y", header)
    theta = None
    if THETA_COLUMN in frame.columns:
        theta = _float_column(frame, THETA_COLUMN, header)
        theta = degrees_to_radians(theta) if theta_in_degrees else mod_2pi(theta)
    holdout = float(metadata["y_holdout"]) if "y_holdout" in metadata else None
    trend = None
    if "trend_intercept" in metadata and "trend_slope" in metadata:
        trend = (float(metadata["trend_intercept"]), float(metadata["trend_slope"]))
    t_holdout = float(metadata["t_holdout"]) if "t_holdout" in metadata else None
    return Dataset(times, y, holdout, theta, trend, t_holdout)


def write_dataset(path: Path, d: Dataset, metadata: Mapping[str, object]) -> Path:
    columns: dict[str, np.ndarray] = {"t": d.times, "y": d.y}
    if d.true_theta is not None:
        columns[THETA_COLUMN] = d.true_theta
    extra: dict[str, object] = dict(metadata)
    if d.y_holdout is not None:
        extra["y_holdout"] = d.y_holdout
    if d.t_holdout is not None:
        extra["t_holdout"] = d.t_holdout
    if d.trend is not None:
        extra["trend_intercept"], extra["trend_slope"] = d.trend
    return write_table(path, pd.DataFrame(columns), extra)


def sample_columns(samples: SampleSet) -> list[str]:
    T = samples.T
    columns = ["iter", "logp"]
    columns += [f"beta_f_{i + 1}" for i in range(4)]
    columns += [f"beta_g_{i + 1}" for i in samples.free_indices]
    columns += ["sigma2_eps", "sigma2_f"]
    if samples.evolution_sampled:
        columns += ["sigma2_eta", "sigma2_g"]
    columns += [f"x_{t}" for t in range(T + 2)]
    columns += [f"K_{t}" for t in range(1, T + 2)]
    columns.append("chain")
    return columns


def _mask_text(mask: tuple[bool, ...]) -> str:
    return ",".join("1" if fixed else "0" for fixed in mask)


def write_samples(path: Path, samples: SampleSet, metadata: Mapping[str, object]) -> Path:
    T = samples.T
    data: dict[str, np.ndarray] = {"iter": samples.iterations, "logp": samples.logp}
    for i in range(4):
        data[f"beta_f_{i + 1}"] = samples.beta_f[:, i]
    for i in samples.free_indices:
        data[f"beta_g_{i + 1}"] = samples.beta_g[:, i]
    data["sigma2_eps"] = samples.sigma2_eps
    data["sigma2_f"] = samples.sigma2_f
    if samples.evolution_sampled:
        data["sigma2_eta"] = samples.sigma2_eta
        data["sigma2_g"] = samples.sigma2_g
    data["x_0"] = samples.x0
    for t in range(1, T + 2):
        data[f"x_{t}"] = samples.x[:, t - 1]
    for t in range(1, T + 2):
        data[f"K_{t}"] = samples.k[:, t - 1]
    data["chain"] = samples.chain

    extra: dict[str, object] = dict(metadata)
    extra["T"] = T
    extra["beta_g_fixed_mask"] = _mask_text(samples.beta_g_fixed_mask)
    fixed = [i for i, flag in enumerate(samples.beta_g_fixed_mask) if flag]
    if samples.n_kept:
        extra["beta_g_fixed_values"] = ",".join(
            format_float(samples.beta_g[0, i]) for i in fixed
        )
        if not samples.evolution_sampled:
            extra["sigma2_eta"] = float(samples.sigma2_eta[0])
            extra["sigma2_g"] = float(samples.sigma2_g[0])
    extra["evolution_sampled"] = str(samples.evolution_sampled).lower()
    for block, rate in sorted(samples.acceptance.items()):
        extra[f"acceptance.{block}"] = float(rate)
    # every iteration, burn-in included, chains concatenated
    extra["logp_trace"] = ",".join(format_float(v) for v in samples.logp_trace)
    return write_table(path, pd.DataFrame(data, columns=sample_columns(samples)), extra)


def read_samples(path: Path) -> tuple[SampleSet, dict[str, str]]:
    frame, metadata, header = read_table(path)
    try:
        T = int(metadata["T"])
        mask = tuple(flag == "1" for flag in metadata["beta_g_fixed_mask"].split(","))
    except (KeyError, ValueError) as exc:
        msg = f"{path} lacks the T / beta_g_fixed_mask metadata of a sample file"
        raise DatasetError(msg) from exc
    evolution_sampled = metadata.get("evolution_sampled", "false") == "true"
    n = len(frame)

    def column(name: str) -> np.ndarray:
        if name not in frame.columns:
            msg = f"{path} lacks column {name!r}"
            raise DatasetError(msg, header)
        return _float_column(frame, name, header)

    beta_g = np.empty((n, len(mask)))
    fixed_values = [
        float(v) for v in metadata.get("beta_g_fixed_values", "").split(",") if v.strip()
    ]
    fixed_iter = iter(fixed_values)
    for i, fixed in enumerate(mask):
        beta_g[:, i] = next(fixed_iter, math.nan) if fixed else column(f"beta_g_{i + 1}")
    if evolution_sampled:
        sigma2_eta, sigma2_g = column("sigma2_eta"), column("sigma2_g")
    else:
        sigma2_eta = np.full(n, float(metadata.get("sigma2_eta", "nan")))
        sigma2_g = np.full(n, float(metadata.get("sigma2_g", "nan")))
    acceptance = {
        key.removeprefix("acceptance."): float(value)
        for key, value in metadata.items()
        if key.startswith("acceptance.")
    }
    try:
        logp_trace = np.array(
            [float(v) for v in metadata.get("logp_trace", "").split(",") if v.strip()]
        )
    except ValueError as exc:
        msg = f"{path} has an unreadable logp_trace entry"
        raise DatasetError(msg) from exc
    samples = SampleSet(
        iterations=_int_column(frame, "iter", header),
        chain=_int_column(frame, "chain", header) if "chain" in frame.columns else np.zeros(n, int),
        logp=column("logp"),
        beta_f=np.column_stack([column(f"beta_f_{i + 1}") for i in range(4)]).reshape(n, 4),
        beta_g=beta_g,
        sigma2_eps=column("sigma2_eps"),
        sigma2_f=column("sigma2_f"),
        sigma2_eta=sigma2_eta,
        sigma2_g=sigma2_g,
        x0=column("x_0"),
        x=np.column_stack([column(f"x_{t}") for t in range(1, T + 2)]).reshape(n, T + 1),
        k=np.column_stack(
            [_int_column(frame, f"K_{t}", header) for t in range(1, T + 2)]
        ).reshape(n, T + 1),
        beta_g_fixed_mask=mask,
        evolution_sampled=evolution_sampled,
        acceptance=acceptance,
        logp_trace=logp_trace,
    )
    return samples, metadata


def write_key_values(path: Path, values: Mapping[str, object]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{key}={format_float(value) if isinstance(value, float) else value}"
        for key, value in values.items()
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_key_values(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            msg = f"expected key=value, got {line!r}"
            raise DatasetError(msg, number)
        values[key.strip()] = value.strip()
    return values
