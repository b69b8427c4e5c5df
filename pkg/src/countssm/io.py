"""Panel-data ingestion, categorical coding, splitting, synthesis, persistence.

CSV schema (fixed column names): ``id, period, count, exposure,
<covariate columns...>``.  ``period`` is an integer label, an empty
``count`` cell means the count is missing, and the ``exposure`` column
may be omitted entirely (defaulting to 1).  A covariate column whose
values all parse as floats is numeric; anything else is categorical and
is dummy-coded against a declared (or alphabetically first) reference
level.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .dist import DomainError, rng_stream
from .regimes import RegimeSpec
from .simulate import simulate_path

__all__ = [
    "ParseError",
    "PanelRecord",
    "PanelSeries",
    "Panel",
    "PanelSchema",
    "Coding",
    "EncodedPanel",
    "HoldoutRecord",
    "PanelSplit",
    "SynthSpec",
    "SynthTruth",
    "ModelFile",
    "RunConfig",
    "load_panel",
    "save_panel",
    "build_coding",
    "encode_panel",
    "split_panel",
    "synth_panel",
    "save_model",
    "load_model",
    "parse_config",
]

MODEL_SCHEMA_VERSION = 1
RESERVED_COLUMNS = ("id", "period", "count", "exposure")


class ParseError(ValueError):
    """Malformed input file or config."""


@dataclass(frozen=True)
class PanelRecord:
    """One (period, count, exposure) row; covariates kept as raw values."""

    period: int
    count: Optional[int]
    exposure: float
    covariates: tuple[float | str, ...] = ()


@dataclass(frozen=True)
class PanelSeries:
    """One policyholder's time-ordered records."""

    id: str
    records: tuple[PanelRecord, ...]

    def __post_init__(self):
        periods = [r.period for r in self.records]
        if any(b <= a for a, b in zip(periods, periods[1:])):
            raise ParseError(f"series {self.id!r}: period labels must be strictly increasing")

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class Panel:
    """A collection of series plus the covariate column names they share."""

    series: tuple[PanelSeries, ...]
    columns: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.series)

    @property
    def n_records(self) -> int:
        return sum(len(s) for s in self.series)

    @property
    def n_observed(self) -> int:
        return sum(1 for s in self.series for r in s.records if r.count is not None)

    def ids(self) -> list[str]:
        return [s.id for s in self.series]


@dataclass(frozen=True)
class PanelSchema:
    """Loader options: reference levels, declared level sets, exposure bound."""

    references: Mapping[str, str] = field(default_factory=dict)
    levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    allow_exposure_above_one: bool = False


def _parse_count(cell: str, where: str) -> Optional[int]:
    if cell == "":
        return None
    try:
        value = int(cell)
    except ValueError as exc:
        raise ParseError(f"{where}: count {cell!r} is not an integer") from exc
    if value < 0:
        raise ParseError(f"{where}: count must be nonnegative, got {value}")
    return value


def _covariate_value(cell: str) -> float | str:
    try:
        return float(cell)
    except ValueError:
        return cell


def load_panel(path: str | Path, schema: PanelSchema | None = None) -> Panel:
    """Read a panel CSV; see the module docstring for the schema."""
    schema = schema or PanelSchema()
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        for required in ("id", "period", "count"):
            if required not in header:
                raise ParseError(f"{path}: missing required column {required!r}")
        col_idx = {name: i for i, name in enumerate(header)}
        if len(col_idx) != len(header):
            raise ParseError(f"{path}: duplicate column names in header")
        covariate_cols = [c for c in header if c not in RESERVED_COLUMNS]
        has_exposure = "exposure" in col_idx

        rows_by_id: dict[str, list[PanelRecord]] = {}
        seen: set[tuple[str, int]] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(cell == "" for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            where = f"{path}:{lineno}"
            sid = row[col_idx["id"]]
            try:
                period = int(row[col_idx["period"]])
            except ValueError as exc:
                raise ParseError(f"{where}: period must be an integer") from exc
            if (sid, period) in seen:
                raise ParseError(f"{where}: duplicate (id, period) = ({sid!r}, {period})")
            seen.add((sid, period))
            count = _parse_count(row[col_idx["count"]], where)
            if has_exposure:
                try:
                    exposure = float(row[col_idx["exposure"]])
                except ValueError as exc:
                    raise ParseError(f"{where}: exposure must be a number") from exc
            else:
                exposure = 1.0
            if not exposure > 0.0:
                raise ParseError(f"{where}: exposure must be > 0, got {exposure}")
            if exposure > 1.0 and not schema.allow_exposure_above_one:
                raise ParseError(
                    f"{where}: exposure {exposure} > 1; pass allow_exposure_above_one to permit"
                )
            covs = []
            for col in covariate_cols:
                value = _covariate_value(row[col_idx[col]])
                declared = schema.levels.get(col)
                if declared is not None and str(value) not in declared:
                    raise ParseError(
                        f"{where}: unknown category {value!r} for {col!r}; valid levels: {sorted(declared)}"
                    )
                covs.append(value)
            rows_by_id.setdefault(sid, []).append(
                PanelRecord(period=period, count=count, exposure=exposure, covariates=tuple(covs))
            )

    series = tuple(
        PanelSeries(id=sid, records=tuple(sorted(recs, key=lambda r: r.period)))
        for sid, recs in rows_by_id.items()
    )
    return Panel(series=series, columns=tuple(covariate_cols))


def _format_value(value: float | str) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def save_panel(panel: Panel, path: str | Path) -> None:
    """Write a panel back to CSV; load(save(panel)) is the identity."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "period", "count", "exposure", *panel.columns])
        for s in panel.series:
            for r in s.records:
                writer.writerow(
                    [
                        s.id,
                        r.period,
                        "" if r.count is None else r.count,
                        repr(r.exposure),
                        *[_format_value(v) for v in r.covariates],
                    ]
                )


@dataclass(frozen=True)
class Coding:
    """Design-matrix recipe: per-column kind and the expanded column names."""

    columns: tuple[str, ...]
    kinds: tuple[str, ...]  # "numeric" | "categorical"
    levels: tuple[tuple[str, ...], ...]  # dummy levels per column (empty for numeric)
    references: tuple[str, ...]  # reference level per column ("" for numeric)
    names: tuple[str, ...]  # intercept + expanded design column names

    @property
    def dimension(self) -> int:
        return len(self.names)


def build_coding(panel: Panel, schema: PanelSchema | None = None) -> Coding:
    """Decide numeric vs categorical per column and fix the dummy layout."""
    schema = schema or PanelSchema()
    kinds: list[str] = []
    level_sets: list[tuple[str, ...]] = []
    references: list[str] = []
    names: list[str] = ["intercept"]
    for j, col in enumerate(panel.columns):
        values = [s.records[i].covariates[j] for s in panel.series for i in range(len(s))]
        declared = schema.levels.get(col)
        is_categorical = (
            declared is not None
            or col in schema.references
            or any(isinstance(v, str) for v in values)
        )
        if not is_categorical:
            kinds.append("numeric")
            level_sets.append(())
            references.append("")
            names.append(col)
            continue
        observed_levels = sorted({str(v) for v in values})
        all_levels = tuple(declared) if declared is not None else tuple(observed_levels)
        reference = schema.references.get(col, all_levels[0])
        if reference not in all_levels:
            raise ParseError(
                f"reference level {reference!r} for {col!r} not among levels {sorted(all_levels)}"
            )
        dummies = tuple(lv for lv in all_levels if lv != reference)
        kinds.append("categorical")
        level_sets.append(dummies)
        references.append(reference)
        names.extend(f"{col}={lv}" for lv in dummies)
    return Coding(
        columns=panel.columns,
        kinds=tuple(kinds),
        levels=tuple(level_sets),
        references=tuple(references),
        names=tuple(names),
    )


@dataclass(frozen=True)
class EncodedPanel:
    """Numeric design rows for every record, with a (series, record) index."""

    coding: Coding
    x: np.ndarray  # (n_records, d) including the intercept column
    exposure: np.ndarray
    counts: tuple[Optional[int], ...]
    index: tuple[tuple[int, int], ...]


def encode_panel(panel: Panel, coding: Coding) -> EncodedPanel:
    """Apply a coding to a panel (the panel may differ from the one that built it)."""
    if panel.columns != coding.columns:
        raise ParseError(
            f"panel columns {panel.columns} do not match coding columns {coding.columns}"
        )
    rows: list[list[float]] = []
    exposure: list[float] = []
    counts: list[Optional[int]] = []
    index: list[tuple[int, int]] = []
    for si, s in enumerate(panel.series):
        for ri, r in enumerate(s.records):
            row = [1.0]
            for j, col in enumerate(coding.columns):
                value = r.covariates[j]
                if coding.kinds[j] == "numeric":
                    if isinstance(value, str):
                        raise ParseError(
                            f"series {s.id!r} period {r.period}: non-numeric value {value!r} in numeric column {col!r}"
                        )
                    row.append(float(value))
                else:
                    label = str(value)
                    known = set(coding.levels[j]) | {coding.references[j]}
                    if label not in known:
                        raise ParseError(
                            f"series {s.id!r} period {r.period}: unknown category {label!r} for {col!r}; "
                            f"valid levels: {sorted(known)}"
                        )
                    row.extend(1.0 if label == lv else 0.0 for lv in coding.levels[j])
            rows.append(row)
            exposure.append(r.exposure)
            counts.append(r.count)
            index.append((si, ri))
    return EncodedPanel(
        coding=coding,
        x=np.asarray(rows, dtype=float),
        exposure=np.asarray(exposure, dtype=float),
        counts=tuple(counts),
        index=tuple(index),
    )


@dataclass(frozen=True)
class HoldoutRecord:
    series_id: str
    record: PanelRecord


@dataclass(frozen=True)
class PanelSplit:
    train: Panel
    holdout: tuple[HoldoutRecord, ...]
    notes: tuple[str, ...] = ()


def split_panel(panel: Panel, rule: str | int = "last") -> PanelSplit:
    """Split into a training panel and per-series holdout records.

    rule = "last" holds out each series' final record; an integer label
    holds out that period (series without it are skipped, records after
    it are dropped with a note).  Series left with no training records
    are excluded with a note.
    """
    train_series: list[PanelSeries] = []
    holdout: list[HoldoutRecord] = []
    notes: list[str] = []
    for s in panel.series:
        if rule == "last":
            train_recs = s.records[:-1]
            hold = s.records[-1]
        else:
            label = int(rule)
            train_recs = tuple(r for r in s.records if r.period < label)
            matching = [r for r in s.records if r.period == label]
            beyond = [r for r in s.records if r.period > label]
            if beyond:
                notes.append(
                    f"series {s.id!r}: dropped {len(beyond)} record(s) after period {label}"
                )
            hold = matching[0] if matching else None
        if not train_recs:
            notes.append(f"series {s.id!r}: no training records under rule {rule!r}; excluded")
            continue
        train_series.append(PanelSeries(id=s.id, records=tuple(train_recs)))
        if hold is not None:
            holdout.append(HoldoutRecord(series_id=s.id, record=hold))
    return PanelSplit(
        train=Panel(series=tuple(train_series), columns=panel.columns),
        holdout=tuple(holdout),
        notes=tuple(notes),
    )


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings for a synthetic panel with known ground truth.

    eta[0] is the intercept; each remaining coefficient gets one
    standard-normal covariate (time-invariant unless time_varying).
    """

    n_series: int
    horizon: int
    regime: RegimeSpec
    eta: tuple[float, ...] = (0.0,)
    exposure: float = 1.0
    missing_rate: float = 0.0
    time_varying: bool = False
    first_period: int = 1

    def __post_init__(self):
        if self.n_series < 1 or self.horizon < 1:
            raise DomainError("need n_series >= 1 and horizon >= 1")
        if not 0.0 <= self.missing_rate < 1.0:
            raise DomainError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if not self.exposure > 0.0:
            raise DomainError(f"exposure must be > 0, got {self.exposure}")


@dataclass(frozen=True)
class SynthTruth:
    spec: SynthSpec
    seed: int
    theta: np.ndarray  # (n_series, horizon)


def synth_panel(spec: SynthSpec, seed: int) -> tuple[Panel, SynthTruth]:
    """Simulate a covariate panel through the latent-count model.

    Each series draws from an independent stream keyed by (seed, index),
    so any subset reproduces identically.
    """
    k = len(spec.eta) - 1
    columns = tuple(f"x{j + 1}" for j in range(k))
    eta0 = spec.eta[0]
    slopes = np.asarray(spec.eta[1:], dtype=float)
    series: list[PanelSeries] = []
    thetas = np.empty((spec.n_series, spec.horizon))
    for i in range(spec.n_series):
        rng = rng_stream(seed, i)
        if spec.time_varying:
            covs = rng.standard_normal((spec.horizon, k))
        else:
            covs = np.tile(rng.standard_normal(k), (spec.horizon, 1))
        lams = spec.exposure * np.exp(eta0 + covs @ slopes)
        path = simulate_path(spec.regime, lams.tolist(), rng)
        thetas[i] = path.theta
        if spec.missing_rate > 0.0:
            missing = rng.random(spec.horizon) < spec.missing_rate
        else:
            missing = np.zeros(spec.horizon, dtype=bool)
        records = tuple(
            PanelRecord(
                period=spec.first_period + t,
                count=None if missing[t] else int(path.counts[t]),
                exposure=spec.exposure,
                covariates=tuple(float(v) for v in covs[t]),
            )
            for t in range(spec.horizon)
        )
        series.append(PanelSeries(id=f"s{i:05d}", records=records))
    panel = Panel(series=tuple(series), columns=columns)
    return panel, SynthTruth(spec=spec, seed=seed, theta=thetas)


@dataclass(frozen=True)
class ModelFile:
    """Serialized fit: regime, regression coefficients, bookkeeping."""

    kind: str
    beta0: float
    p: Optional[float]
    q: Optional[float]
    eta: tuple[float, ...]
    eta_names: tuple[str, ...]
    dispersion: Optional[float]
    loglik: float
    k: int
    n_obs: int
    seed: Optional[int]
    boundary_flags: tuple[str, ...] = ()
    pooled_constant: bool = False
    schema_version: int = MODEL_SCHEMA_VERSION

    def regime_spec(self) -> RegimeSpec:
        return RegimeSpec(kind=self.kind, beta0=self.beta0, p=self.p, q=self.q)


def _fmt_opt(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else repr(value)


def save_model(model: ModelFile, path: str | Path) -> None:
    lines = [
        f"schema_version={model.schema_version}",
        f"kind={model.kind}",
        f"beta0={float(model.beta0)!r}",
        f"p={_fmt_opt(model.p)}",
        f"q={_fmt_opt(model.q)}",
        "eta=" + ",".join(repr(float(v)) for v in model.eta),
        "eta_names=" + ",".join(model.eta_names),
        f"dispersion={_fmt_opt(model.dispersion)}",
        f"loglik={float(model.loglik)!r}",
        f"k={model.k}",
        f"n_obs={model.n_obs}",
        f"seed={_fmt_opt(model.seed)}",
        "boundary_flags=" + ",".join(model.boundary_flags),
        f"pooled_constant={str(model.pooled_constant).lower()}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _kv_lines(text: str, where: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{where}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_model(path: str | Path) -> ModelFile:
    path = Path(path)
    pairs = _kv_lines(path.read_text(), str(path))
    try:
        version = int(pairs["schema_version"])
        if version != MODEL_SCHEMA_VERSION:
            raise ParseError(f"{path}: unsupported schema_version {version}")
        eta = tuple(float(v) for v in pairs["eta"].split(",")) if pairs.get("eta") else ()
        eta_names = tuple(v for v in pairs.get("eta_names", "").split(",") if v)
        flags = tuple(v for v in pairs.get("boundary_flags", "").split(",") if v)
        return ModelFile(
            kind=pairs["kind"],
            beta0=float(pairs["beta0"]),
            p=float(pairs["p"]) if pairs.get("p") else None,
            q=float(pairs["q"]) if pairs.get("q") else None,
            eta=eta,
            eta_names=eta_names,
            dispersion=float(pairs["dispersion"]) if pairs.get("dispersion") else None,
            loglik=float(pairs["loglik"]),
            k=int(pairs["k"]),
            n_obs=int(pairs["n_obs"]),
            seed=int(pairs["seed"]) if pairs.get("seed") else None,
            boundary_flags=flags,
            pooled_constant=pairs.get("pooled_constant", "false") == "true",
        )
    except KeyError as exc:
        raise ParseError(f"{path}: missing model field {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{path}: malformed model file: {exc}") from exc


DEFAULT_REGIMES = ("independent", "shared", "increasing", "decreasing", "constant_variance")


@dataclass(frozen=True)
class RunConfig:
    """Resolved run settings shared by the CLI commands."""

    regimes: tuple[str, ...] = DEFAULT_REGIMES
    seed: Optional[int] = None
    split: str = "last"  # "last" or "period:<label>"
    bic_n: str = "observations"  # or "series"
    pooled_constant: bool = False
    references: Mapping[str, str] = field(default_factory=dict)
    levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    beta0_grid: tuple[float, ...] = (0.25, 1.0, 4.0)
    p_grid: tuple[float, ...] = (0.3, 0.7, 0.95)
    q_grid: tuple[float, ...] = (0.3, 0.7, 0.95)
    tol: float = 1e-8
    max_iter: int = 100
    allow_exposure_above_one: bool = False
    threads: Optional[int] = None

    def schema(self) -> PanelSchema:
        return PanelSchema(
            references=dict(self.references),
            levels=dict(self.levels),
            allow_exposure_above_one=self.allow_exposure_above_one,
        )

    def split_rule(self) -> str | int:
        if self.split == "last":
            return "last"
        if self.split.startswith("period:"):
            try:
                return int(self.split.split(":", 1)[1])
            except ValueError:
                raise ParseError(f"bad split rule {self.split!r}") from None
        raise ParseError(f"bad split rule {self.split!r}; use 'last' or 'period:<label>'")


def _parse_bool(value: str, key: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ParseError(f"config key {key!r}: expected a boolean, got {value!r}")


def parse_config(path: str | Path) -> RunConfig:
    """Flat key=value config file; dotted keys declare categorical coding.

    Recognized keys: regimes, seed, split, bic_n, pooled_constant, tol,
    max_iter, beta0_grid, p_grid, q_grid, threads,
    allow_exposure_above_one, reference.<column>, levels.<column>.
    """
    pairs = _kv_lines(Path(path).read_text(), str(path))
    config = RunConfig()
    references: dict[str, str] = {}
    levels: dict[str, tuple[str, ...]] = {}
    updates: dict = {}
    for key, value in pairs.items():
        if key.startswith("reference."):
            references[key.split(".", 1)[1]] = value
        elif key.startswith("levels."):
            levels[key.split(".", 1)[1]] = tuple(v.strip() for v in value.split(","))
        elif key == "regimes":
            updates["regimes"] = tuple(v.strip() for v in value.split(","))
        elif key == "seed":
            updates["seed"] = int(value)
        elif key == "threads":
            updates["threads"] = int(value)
        elif key in ("split", "bic_n"):
            updates[key] = value
        elif key in ("pooled_constant", "allow_exposure_above_one"):
            updates[key] = _parse_bool(value, key)
        elif key == "tol":
            updates["tol"] = float(value)
        elif key == "max_iter":
            updates["max_iter"] = int(value)
        elif key in ("beta0_grid", "p_grid", "q_grid"):
            updates[key] = tuple(float(v) for v in value.split(","))
        else:
            raise ParseError(f"unknown config key {key!r}")
    if references:
        updates["references"] = references
    if levels:
        updates["levels"] = levels
    try:
        return replace(config, **updates)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad config: {exc}") from exc
