"""Hourly panels, lag and calendar features, standardisation and windowing.

A :class:`Panel` is a dense ``[S, F, N]`` array on a gap-free hourly UTC
grid.  Cleaning and imputation are deliberately absent: dirty input is
rejected with an error that names the first offending key.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import (
    CoverageError,
    DataError,
    DuplicateError,
    EmptyInputError,
    GapError,
    ParseError,
)

TARGET = "target"
EXOGENOUS = "exogenous"
CALENDAR = "calendar"
LAG = "lag"
ROLES = (TARGET, EXOGENOUS, CALENDAR, LAG)

HOUR = np.timedelta64(1, "h")
MAX_LAG_HOURS = 8760
DEFAULT_LAGS = (96, 168)


@dataclass(frozen=True)
class Panel:
    stations: tuple[str, ...]
    features: tuple[str, ...]
    roles: tuple[str, ...]
    timestamps: np.ndarray  # datetime64[h], strictly increasing by one hour
    values: np.ndarray  # [S, F, N]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype="datetime64[h]")
        if values.shape != (len(self.stations), len(self.features), len(ts)):
            raise DataError(f"values shape {values.shape} does not match the panel axes")
        if len(self.roles) != len(self.features):
            raise DataError("one role per feature is required")
        if any(r not in ROLES for r in self.roles):
            raise DataError(f"roles must be drawn from {ROLES}")
        if self.roles.count(TARGET) != 1:
            raise DataError("a panel needs exactly one target feature")
        if len(ts) > 1 and np.any(np.diff(ts) != HOUR):
            raise GapError("timestamps are not a gap-free increasing hourly grid")
        if not np.all(np.isfinite(values)):
            raise DataError("panel values must be finite")
        values.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", ts)

    @property
    def n_hours(self) -> int:
        return len(self.timestamps)

    @property
    def target(self) -> str:
        return self.features[self.roles.index(TARGET)]

    @property
    def target_index(self) -> int:
        return self.roles.index(TARGET)

    def feature_index(self, name: str) -> int:
        try:
            return self.features.index(name)
        except ValueError:
            raise DataError(f"unknown feature {name!r}") from None

    def series(self, feature: str, station: int | str = 0) -> np.ndarray:
        s = self.stations.index(station) if isinstance(station, str) else station
        return self.values[s, self.feature_index(feature)]

    def slice_hours(self, start: int, stop: int | None = None) -> "Panel":
        return Panel(self.stations, self.features, self.roles,
                     self.timestamps[start:stop], self.values[:, :, start:stop])

    def with_features(self, names: Sequence[str], roles: Sequence[str], values: np.ndarray) -> "Panel":
        """A new panel with ``values[S, len(names), N]`` appended as extra features."""
        return Panel(self.stations, self.features + tuple(names), self.roles + tuple(roles),
                     self.timestamps, np.concatenate([self.values, values], axis=1))

    @property
    def n_values(self) -> int:
        return int(self.values.size)


# -- CSV --------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Column names and feature registry for long-format input files."""

    station: str = "station"
    feature: str = "feature"
    timestamp: str = "timestamp"
    value: str = "value"
    target: str | None = None
    roles: Mapping[str, str] = field(default_factory=dict)


def parse_hour(text: str) -> np.datetime64:
    """Parse an ISO-8601 UTC timestamp that falls on a whole hour."""
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(raw)
    except ValueError:
        raise ValueError(f"not an ISO-8601 timestamp: {text!r}") from None
    if dt.tzinfo is not None:
        if dt.utcoffset().total_seconds() != 0:
            raise ValueError(f"timestamp is not UTC: {text!r}")
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    if dt.minute or dt.second or dt.microsecond:
        raise ValueError(f"timestamp is not on a whole hour: {text!r}")
    return np.datetime64(dt, "h")


def format_hour(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "h")) + ":00:00Z"


def load_csv(path, schema: CsvSchema | None = None) -> Panel:
    """Read a long-format ``station,feature,timestamp,value`` file into a Panel."""
    schema = schema or CsvSchema()
    path = Path(path)
    cells: dict[tuple[str, str, np.datetime64], float] = {}
    stations: dict[str, None] = {}
    features: dict[str, None] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyInputError(f"{path}: empty file")
        cols = (schema.station, schema.feature, schema.timestamp, schema.value)
        missing = [c for c in cols if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            line = reader.line_num
            station, feature = row[schema.station].strip(), row[schema.feature].strip()
            try:
                ts = parse_hour(row[schema.timestamp])
            except (ValueError, AttributeError) as exc:
                raise ParseError(f"{path}:{line}: {exc}") from None
            try:
                value = float(row[schema.value])
            except (TypeError, ValueError):
                raise ParseError(f"{path}:{line}: non-numeric value {row[schema.value]!r}") from None
            if not math.isfinite(value):
                raise ParseError(f"{path}:{line}: non-finite value {row[schema.value]!r}")
            key = (station, feature, ts)
            if key in cells:
                raise DuplicateError(f"{path}:{line}: duplicate row for station={station!r}, "
                                     f"feature={feature!r}, timestamp={format_hour(ts)}")
            cells[key] = value
            stations.setdefault(station)
            features.setdefault(feature)
    if not cells:
        raise EmptyInputError(f"{path}: no data rows")

    st, ft = list(stations), list(features)
    target = schema.target if schema.target is not None else ft[0]
    if target not in features:
        raise DataError(f"{path}: target feature {target!r} not present")
    ft.remove(target)
    ft.insert(0, target)
    roles = [TARGET] + [schema.roles.get(f, EXOGENOUS) for f in ft[1:]]

    hours = [k[2] for k in cells]
    t0, t1 = min(hours), max(hours)
    n = int((t1 - t0) / HOUR) + 1
    arr = np.full((len(st), len(ft), n), np.nan)
    si = {s: i for i, s in enumerate(st)}
    fi = {f: i for i, f in enumerate(ft)}
    for (s, f, ts), v in cells.items():
        arr[si[s], fi[f], int((ts - t0) / HOUR)] = v
    holes = np.argwhere(np.isnan(arr))
    if len(holes):
        # report the earliest missing hour, then station/feature order
        s, f, t = holes[np.lexsort((holes[:, 1], holes[:, 0], holes[:, 2]))[0]]
        raise GapError(f"{path}: first gap at {format_hour(t0 + int(t) * HOUR)} "
                       f"for station={st[s]!r}, feature={ft[f]!r} ({len(holes)} missing values)")
    return Panel(tuple(st), tuple(ft), tuple(roles), t0 + np.arange(n) * HOUR, arr)


def write_csv(panel: Panel, path) -> None:
    """Write ``panel`` in the long format accepted by :func:`load_csv`."""
    stamps = [format_hour(t) for t in panel.timestamps]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station", "feature", "timestamp", "value"])
        for s, station in enumerate(panel.stations):
            for f, feature in enumerate(panel.features):
                for t, stamp in enumerate(stamps):
                    w.writerow([station, feature, stamp, repr(float(panel.values[s, f, t]))])


# -- derived features -------------------------------------------------------

@dataclass(frozen=True)
class LagSpec:
    """``(source feature, lag in hours)`` pairs, one derived feature each."""

    entries: tuple[tuple[str, int], ...] = ()

    @classmethod
    def default(cls, target: str) -> "LagSpec":
        return cls(tuple((target, lag) for lag in DEFAULT_LAGS))

    def validate(self, t_out: int | None = None) -> None:
        for src, lag in self.entries:
            if not 1 <= lag <= MAX_LAG_HOURS:
                raise DataError(f"lag {lag} for {src!r} outside [1, {MAX_LAG_HOURS}]")
            if t_out is not None and lag < t_out:
                raise DataError(f"lag {lag} for {src!r} is shorter than the output horizon {t_out}")


def lag_name(source: str, lag: int) -> str:
    return f"{source}_lag{lag}"


def build_lag_features(panel: Panel, spec: LagSpec, t_out: int | None = None) -> Panel:
    """Append ``source(t - lag)`` for every spec entry and trim the start.

    The first ``max(lag)`` hours are dropped so every feature is defined on
    the whole remaining grid.
    """
    spec.validate(t_out)
    if not spec.entries:
        return panel
    max_lag = max(lag for _, lag in spec.entries)
    if max_lag >= panel.n_hours:
        raise CoverageError(f"lag {max_lag} h needs more than the {panel.n_hours} h of history available")
    n = panel.n_hours - max_lag
    derived = np.stack([panel.values[:, panel.feature_index(src), max_lag - lag:max_lag - lag + n]
                        for src, lag in spec.entries], axis=1)
    trimmed = panel.slice_hours(max_lag)
    return trimmed.with_features([lag_name(s, l) for s, l in spec.entries], [LAG] * len(spec.entries), derived)


CALENDAR_FEATURES = ("hour_sin", "hour_cos", "dow_sin", "dow_cos", "weekend")


def calendar_values(timestamps: np.ndarray) -> np.ndarray:
    """``[5, N]`` hour-of-day and day-of-week sinusoid pairs plus a weekend flag."""
    hours = timestamps.astype("datetime64[h]").astype(np.int64)
    hod = hours % 24
    dow = (hours // 24 + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0
    return np.stack([
        np.sin(2 * np.pi * hod / 24), np.cos(2 * np.pi * hod / 24),
        np.sin(2 * np.pi * dow / 7), np.cos(2 * np.pi * dow / 7),
        (dow >= 5).astype(np.float64),
    ])


def add_calendar_features(panel: Panel, names: Iterable[str] = CALENDAR_FEATURES) -> Panel:
    names = tuple(names)
    cal = calendar_values(panel.timestamps)
    rows = [cal[CALENDAR_FEATURES.index(n)] for n in names]
    values = np.broadcast_to(np.stack(rows)[None], (len(panel.stations), len(names), panel.n_hours))
    return panel.with_features(names, [CALENDAR] * len(names), values)


# -- standardisation --------------------------------------------------------

STD_FLOOR = 1e-12


@dataclass
class Standardizer:
    """Per (station, feature) z-scores fitted on training hours only."""

    stations: tuple[str, ...]
    features: tuple[str, ...]
    target_index: int
    mean: np.ndarray  # [S, F]
    scale: np.ndarray  # [S, F]
    centered_only: np.ndarray  # [S, F] bool, std below STD_FLOOR

    @classmethod
    def fit(cls, panel: Panel, stop: int | None = None) -> "Standardizer":
        """Fit on hours ``[0, stop)``; nothing after ``stop`` is read."""
        vals = panel.values[:, :, :stop]
        if vals.shape[-1] == 0:
            raise DataError("no hours to fit the standardizer on")
        mean = vals.mean(axis=-1)
        std = vals.std(axis=-1)
        flat = std < STD_FLOOR
        return cls(panel.stations, panel.features, panel.target_index, mean,
                   np.where(flat, 1.0, std), flat)

    def transform(self, panel: Panel) -> Panel:
        self._check(panel)
        z = (panel.values - self.mean[..., None]) / self.scale[..., None]
        return Panel(panel.stations, panel.features, panel.roles, panel.timestamps, z)

    def inverse(self, panel: Panel) -> Panel:
        self._check(panel)
        x = panel.values * self.scale[..., None] + self.mean[..., None]
        return Panel(panel.stations, panel.features, panel.roles, panel.timestamps, x)

    def inverse_target(self, y: np.ndarray) -> np.ndarray:
        """Undo scaling on target arrays shaped ``[..., S, t_out]``."""
        f = self.target_index
        return y * self.scale[:, f, None] + self.mean[:, f, None]

    def _check(self, panel: Panel) -> None:
        if panel.stations != self.stations or panel.features != self.features:
            raise DataError("panel axes differ from the fitted standardizer")

    def to_dict(self) -> dict:
        return {
            "stations": list(self.stations), "features": list(self.features),
            "target_index": self.target_index,
            "mean": self.mean.tolist(), "scale": self.scale.tolist(),
            "centered_only": self.centered_only.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(tuple(d["stations"]), tuple(d["features"]), int(d["target_index"]),
                   np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64),
                   np.asarray(d["centered_only"], dtype=bool))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Standardizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- windows ----------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    input: np.ndarray  # [S, F, t_in]
    target: np.ndarray  # [S, t_out]
    start: np.datetime64
    offset: int  # hour index of the window start within its panel

    @property
    def t_in(self) -> int:
        return self.input.shape[-1]

    @property
    def end(self) -> int:
        """One past the last hour touched by input or target."""
        return self.offset + self.t_in + self.target.shape[-1]


def n_windows(n_hours: int, t_in: int, t_out: int, stride: int) -> int:
    span = t_in + t_out
    return 0 if n_hours < span else (n_hours - span) // stride + 1


def build_windows(panel: Panel, t_in: int, t_out: int, stride: int = 24) -> list[Sample]:
    """Sliding windows ordered by start; the target follows the input directly."""
    if stride < 1 or t_in < 1 or t_out < 1:
        raise DataError("t_in, t_out and stride must be positive")
    count = n_windows(panel.n_hours, t_in, t_out, stride)
    if count == 0:
        raise DataError(f"panel has {panel.n_hours} h, a window needs {t_in + t_out} h")
    tf = panel.target_index
    out = []
    for i in range(count):
        o = i * stride
        out.append(Sample(panel.values[:, :, o:o + t_in],
                          panel.values[:, tf, o + t_in:o + t_in + t_out],
                          panel.timestamps[o], o))
    return out


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """``([N, S, F, t_in], [N, S, t_out])`` arrays for a list of samples."""
    if not samples:
        raise DataError("no samples to stack")
    return (np.stack([s.input for s in samples]), np.stack([s.target for s in samples]))


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Planted-structure generator settings.

    The target is a daily plus weekly sinusoid, AR(1) noise and spike events
    shared by all stations.  The ``spike_forecast`` feature carries the same
    spike train shifted ``spike_advance`` hours earlier, so the future of the
    target is visible inside the input window.
    """

    stations: int = 2
    hours: int = 24 * 120
    n_exog: int = 2
    start: str = "2020-01-01T00:00:00Z"
    level: float = 20.0
    daily_amplitude: float = 6.0
    weekly_amplitude: float = 3.0
    ar_coef: float = 0.9
    ar_std: float = 1.5
    spike_rate: float = 1.0 / 36.0
    spike_amplitude: float = 15.0
    spike_decay: float = 4.0
    spike_advance: int = 24
    forecast_noise: float = 0.5
    exog_coef: float = 0.9

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        return cls(**dict(d))


def synth_components(config: SynthConfig, seed: int) -> dict[str, np.ndarray]:
    """The individual signals summed by :func:`synth_generate`.

    Keys: ``seasonal``, ``ar`` and ``spikes`` (each ``[S, N]``), ``spike_train``
    (``[N + advance]``, station-free), ``forecast`` (``[N]``) and ``exog``
    (``[n_exog, N]``).
    """
    c = config
    s, n, k = c.stations, c.hours, c.spike_advance
    rng_season, rng_ar, rng_spike, rng_exog, rng_fc = (tc.make_rng(seed, 100, i) for i in range(5))
    t0 = int(parse_hour(c.start).astype(np.int64))
    t = np.arange(n) + t0
    phase = rng_season.uniform(0, 2 * np.pi, size=(s, 1))
    gain = rng_season.uniform(0.7, 1.3, size=(s, 1))
    seasonal = (c.level
                + c.daily_amplitude * gain * np.sin(2 * np.pi * t / 24 + phase)
                + c.weekly_amplitude * np.sin(2 * np.pi * t / 168 + phase / 3))

    shocks = rng_ar.normal(0.0, c.ar_std, size=(s, n))
    ar = np.empty((s, n))
    ar[:, 0] = shocks[:, 0] / math.sqrt(1 - c.ar_coef ** 2)
    for i in range(1, n):
        ar[:, i] = c.ar_coef * ar[:, i - 1] + shocks[:, i]

    # spike events are drawn on an extended grid so the forecast channel is
    # defined up to the last hour
    m = n + k
    onsets = rng_spike.random(m) < c.spike_rate
    amps = np.where(onsets, rng_spike.uniform(0.5, 1.5, size=m) * c.spike_amplitude, 0.0)
    shape = np.exp(-np.arange(int(6 * c.spike_decay) + 1) / c.spike_decay) if c.spike_decay > 0 else np.ones(1)
    train = np.convolve(amps, shape)[:m]
    station_gain = rng_spike.uniform(0.8, 1.2, size=(s, 1))
    spikes = station_gain * train[None, :n]
    forecast = train[k:k + n] + rng_fc.normal(0.0, c.forecast_noise, size=n)

    exog = np.empty((c.n_exog, n))
    ex_shock = rng_exog.normal(0.0, 1.0, size=(c.n_exog, n))
    exog[:, 0] = ex_shock[:, 0]
    for i in range(1, n):
        exog[:, i] = c.exog_coef * exog[:, i - 1] + ex_shock[:, i]
    return {"seasonal": seasonal, "ar": ar, "spikes": spikes, "spike_train": train,
            "forecast": forecast, "exog": exog}


def synth_generate(config: SynthConfig, seed: int) -> Panel:
    """A reproducible panel with features ``target, spike_forecast, exog_1..``."""
    comp = synth_components(config, seed)
    s, n = config.stations, config.hours
    target = comp["seasonal"] + comp["ar"] + comp["spikes"]
    rows = [target[:, None, :], np.broadcast_to(comp["forecast"], (s, 1, n))]
    rows.append(np.broadcast_to(comp["exog"][None], (s, config.n_exog, n)))
    names = ("target", "spike_forecast") + tuple(f"exog_{i + 1}" for i in range(config.n_exog))
    roles = (TARGET,) + (EXOGENOUS,) * (1 + config.n_exog)
    t0 = parse_hour(config.start)
    return Panel(tuple(f"st{i + 1}" for i in range(s)), names, roles,
                 t0 + np.arange(n) * HOUR, np.concatenate(rows, axis=1))


# -- dataset assembly -------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """How to turn a panel into model-ready windows."""

    t_in: int = 72
    t_out: int = 72
    stride: int = 24
    train_fraction: float = 0.9
    lags: tuple[tuple[str, int], ...] | None = None  # None means the default lags of the target
    calendar: tuple[str, ...] = CALENDAR_FEATURES

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lags"] = None if self.lags is None else [list(x) for x in self.lags]
        d["calendar"] = list(self.calendar)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSpec":
        d = dict(d)
        if d.get("lags") is not None:
            d["lags"] = tuple((str(a), int(b)) for a, b in d["lags"])
        if "calendar" in d:
            d["calendar"] = tuple(d["calendar"])
        return cls(**d)


@dataclass
class PreparedData:
    panel: Panel  # standardised panel the windows were cut from
    standardizer: Standardizer
    train: list[Sample]
    validation: list[Sample]

    def arrays(self):
        xt, yt = stack_samples(self.train)
        xv, yv = stack_samples(self.validation)
        return xt, yt, xv, yv

    @property
    def shape(self) -> tuple[int, int, int]:
        s = self.train[0].input.shape
        return s[0], s[1], s[2]


def prepare(panel: Panel, spec: DatasetSpec) -> PreparedData:
    """Features, windows, chronological split and train-only standardisation.

    Training windows that overlap the first validation window in time are
    dropped so no hour is shared across the split.
    """
    from .training import split_chronological  # local: training imports model, not data

    lags = LagSpec.default(panel.target) if spec.lags is None else LagSpec(tuple(spec.lags))
    p = build_lag_features(panel, lags, t_out=spec.t_out)
    if spec.calendar:
        p = add_calendar_features(p, spec.calendar)
    windows = build_windows(p, spec.t_in, spec.t_out, spec.stride)
    span = spec.t_in + spec.t_out
    embargo = max(0, -(-span // spec.stride) - 1)
    train, val = split_chronological(windows, spec.train_fraction, gap=embargo)
    stop = train[-1].end
    st = Standardizer.fit(p, stop)
    z = st.transform(p)
    zw = build_windows(z, spec.t_in, spec.t_out, spec.stride)
    n_train, n_val = len(train), len(val)
    return PreparedData(z, st, zw[:n_train], zw[len(zw) - n_val:])
