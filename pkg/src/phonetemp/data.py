"""Feature schema, corpus I/O, splitting, normalization, and the synthetic
phone-thermal generator that stands in for device telemetry at desk scale.

The nine per-sample features follow the fixed on-disk order f1..f9:
screen state, battery voltage, battery temperature, current/last screen-on
streak, current/last screen-off streak, off time before the last activation,
on time before the last turn-off, and the battery temperature snapshots at
the last activation / last turn-off. The label is the ambient temperature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FEATURE_COUNT = 9
CSV_COLUMNS = ("phone_id", "f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8", "f9", "label")

TEMP_RANGE = (-20.0, 60.0)
VOLT_RANGE = (3.0, 5.0)


class ParseError(ValueError):
    """Malformed corpus file; message names the offending row."""


@dataclass(frozen=True)
class Sample:
    """One phone observation: nine state features plus the ambient label."""

    screen_on: float          # f1, {0, 1}
    battery_voltage: float    # f2, volts
    battery_temp: float       # f3, degC
    on_streak: float          # f4, s (current streak while on, else last completed)
    off_streak: float         # f5, s (current streak while off, else last completed)
    off_before_on: float      # f6, s
    on_before_off: float      # f7, s
    temp_at_last_on: float    # f8, degC
    temp_at_last_off: float   # f9, degC
    label: float              # ambient temperature, degC

    def features(self) -> np.ndarray:
        return np.array(
            [
                self.screen_on,
                self.battery_voltage,
                self.battery_temp,
                self.on_streak,
                self.off_streak,
                self.off_before_on,
                self.on_before_off,
                self.temp_at_last_on,
                self.temp_at_last_off,
            ]
        )


def validate_sample(sample: Sample) -> None:
    """Raise ValueError if any field breaks the schema invariants."""
    if sample.screen_on not in (0.0, 1.0):
        raise ValueError(f"screen state must be 0 or 1, got {sample.screen_on}")
    for name in ("on_streak", "off_streak", "off_before_on", "on_before_off"):
        if getattr(sample, name) < 0.0:
            raise ValueError(f"duration {name} must be nonnegative")
    for name in ("battery_temp", "temp_at_last_on", "temp_at_last_off", "label"):
        value = getattr(sample, name)
        if not TEMP_RANGE[0] <= value <= TEMP_RANGE[1]:
            raise ValueError(f"temperature {name}={value} outside {TEMP_RANGE}")
    if not VOLT_RANGE[0] <= sample.battery_voltage <= VOLT_RANGE[1]:
        raise ValueError(f"voltage {sample.battery_voltage} outside {VOLT_RANGE}")


@dataclass
class PhoneDataset:
    """All samples recorded by one phone, in collection order."""

    phone_id: str
    samples: list[Sample]
    role: str = "contributor"  # or "participant"

    def __post_init__(self):
        if not self.samples:
            raise ValueError(f"dataset {self.phone_id!r} is empty")

    def __len__(self) -> int:
        return len(self.samples)


def feature_matrix(samples) -> np.ndarray:
    return np.array([s.features() for s in samples])


def label_vector(samples) -> np.ndarray:
    return np.array([s.label for s in samples])


def _parse_row(row: dict, row_number: int) -> tuple[str, Sample]:
    values = []
    for col in CSV_COLUMNS[1:]:
        raw = row.get(col)
        if raw is None:
            raise ParseError(f"row {row_number}: missing column {col!r}")
        try:
            values.append(float(raw))
        except ValueError:
            raise ParseError(f"row {row_number}: non-numeric {col}={raw!r}") from None
    sample = Sample(*values)
    if sample.screen_on not in (0.0, 1.0):
        raise ParseError(f"row {row_number}: f1 must be 0 or 1, got {sample.screen_on}")
    return row["phone_id"], sample


def load_csv(path) -> list[PhoneDataset]:
    """Load a corpus file into one PhoneDataset per distinct phone_id."""
    path = Path(path)
    per_phone: dict[str, list[Sample]] = {}
    order: list[str] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{path}: missing columns {sorted(missing)}")
        for row_number, row in enumerate(reader, start=2):
            phone_id, sample = _parse_row(row, row_number)
            if phone_id not in per_phone:
                per_phone[phone_id] = []
                order.append(phone_id)
            per_phone[phone_id].append(sample)
    if not order:
        raise ParseError(f"{path}: no data rows")
    return [PhoneDataset(pid, per_phone[pid]) for pid in order]


def save_csv(path, datasets) -> None:
    """Write one or more PhoneDatasets to a corpus CSV (exact float round-trip)."""
    if isinstance(datasets, PhoneDataset):
        datasets = [datasets]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for ds in datasets:
            for s in ds.samples:
                writer.writerow(
                    [ds.phone_id] + [repr(float(v)) for v in (*s.features(), s.label)]
                )


def split(dataset: PhoneDataset, train_fraction: float, seed: int):
    """Seeded disjoint train/validation split; train size rounds half-up."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must be in (0, 1)")
    n = len(dataset)
    if n < 2:
        raise ValueError(f"dataset {dataset.phone_id!r} too small to split")
    n_train = int(np.floor(train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    train = replace(dataset, samples=[dataset.samples[i] for i in train_idx])
    val = replace(dataset, samples=[dataset.samples[i] for i in val_idx])
    return train, val


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean and standard deviation (std floored at 1e-6)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), 1e-6)
        if mean.shape != (FEATURE_COUNT,) or std.shape != (FEATURE_COUNT,):
            raise ValueError("stats must have one entry per feature")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def fit_normalizer(datasets) -> NormStats:
    """Feature means/stds over all samples of the given datasets."""
    if isinstance(datasets, PhoneDataset):
        datasets = [datasets]
    rows = [feature_matrix(ds.samples) for ds in datasets]
    x = np.concatenate(rows, axis=0)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a normalizer")
    return NormStats(x.mean(axis=0), x.std(axis=0))


def normalize(sample: Sample, stats: NormStats) -> np.ndarray:
    return (sample.features() - stats.mean) / stats.std


def normalize_matrix(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


@dataclass(frozen=True)
class SynthPhoneParams:
    """Per-phone thermal and sensor characteristics for the generator."""

    thermal_time_constant: float  # s; battery relaxes toward ambient + heating
    screen_heat: float            # degC of steady-state heating while the screen is on
    voltage_heat_coeff: float     # degC per volt above the 3.7 V reference
    sensor_bias: float            # degC added to every battery-temperature reading
    sensor_noise_std: float       # degC, iid gaussian on each reading

    def __post_init__(self):
        if self.thermal_time_constant <= 0.0:
            raise ValueError("thermal time constant must be positive")
        if self.sensor_noise_std < 0.0:
            raise ValueError("noise std must be nonnegative")


VOLT_REFERENCE = 3.7


def _heating(params: SynthPhoneParams, screen_on: bool, voltage: float) -> float:
    return params.screen_heat * screen_on + params.voltage_heat_coeff * (
        voltage - VOLT_REFERENCE
    )


def ambient_grid(ambient_range, grid_step: float) -> np.ndarray:
    """Shared label grid: evenly spaced setpoints covering the ambient range."""
    lo, hi = ambient_range
    if not (hi > lo and grid_step > 0.0):
        raise ValueError("invalid ambient range or grid step")
    n = int(np.floor((hi - lo) / grid_step + 1e-9)) + 1
    return lo + grid_step * np.arange(n)


def synth_generate(
    params: SynthPhoneParams,
    n_sessions: int,
    session_length: float,
    tick: float,
    ambient_range,
    seed: int,
    *,
    grid_step: float = 0.1,
    start_offset_range: tuple[float, float] = (0.0, 4.0),
    screen_mean_on: float = 90.0,
    screen_mean_off: float = 150.0,
    phone_id: str = "synth",
    role: str = "contributor",
) -> PhoneDataset:
    """Simulate `n_sessions` logging sessions and return them as one dataset.

    Each session sits at one ambient setpoint drawn from the shared grid
    (a seeded permutation of the grid, cycled, so phones generated over the
    same grid share labels). Battery temperature relaxes toward ambient plus
    screen/voltage heating with time constant tau; the emitted f3 reading
    adds the sensor bias and iid gaussian noise. Screen state is a seeded
    two-state process, and the streak/snapshot features f4..f9 are maintained
    per their definitions.
    """
    if tick <= 0.0:
        raise ValueError("tick must be positive")
    if session_length < 10.0 * tick:
        raise ValueError("session length must cover at least 10 ticks")
    if n_sessions < 1:
        raise ValueError("need at least one session")

    rng = np.random.default_rng(seed)
    grid = ambient_grid(ambient_range, grid_step)
    order = np.concatenate(
        [rng.permutation(len(grid)) for _ in range(int(np.ceil(n_sessions / len(grid))))]
    )[:n_sessions]

    steps = int(np.floor(session_length / tick))
    p_on = min(tick / screen_mean_off, 1.0)   # off -> on per tick
    p_off = min(tick / screen_mean_on, 1.0)   # on -> off per tick

    samples: list[Sample] = []
    for idx in order:
        ambient = float(grid[idx])
        screen = bool(rng.random() < 0.5)
        voltage = float(rng.uniform(3.8, 4.25))
        t_batt = ambient + _heating(params, screen, voltage) + float(
            rng.uniform(*start_offset_range)
        )
        cur_streak = 0.0
        last_on_streak = 0.0
        last_off_streak = 0.0
        first_reading = t_batt + params.sensor_bias
        temp_at_on = first_reading
        temp_at_off = first_reading

        for _ in range(steps):
            t_batt += (tick / params.thermal_time_constant) * (
                ambient + _heating(params, screen, voltage) - t_batt
            )
            flip = rng.random() < (p_off if screen else p_on)
            reading = t_batt + params.sensor_bias
            if params.sensor_noise_std > 0.0:
                reading += float(rng.normal(0.0, params.sensor_noise_std))
            if flip:
                if screen:
                    last_on_streak = cur_streak
                    temp_at_off = reading
                else:
                    last_off_streak = cur_streak
                    temp_at_on = reading
                screen = not screen
                cur_streak = 0.0
            else:
                cur_streak += tick
            samples.append(
                Sample(
                    screen_on=float(screen),
                    battery_voltage=voltage,
                    battery_temp=reading,
                    on_streak=cur_streak if screen else last_on_streak,
                    off_streak=last_off_streak if screen else cur_streak,
                    off_before_on=last_off_streak,
                    on_before_off=last_on_streak,
                    temp_at_last_on=temp_at_on,
                    temp_at_last_off=temp_at_off,
                    label=ambient,
                )
            )
            # slow discharge; screen-on drains faster
            voltage = max(voltage - tick * (2e-6 + 8e-6 * screen), 3.2)

    ds = PhoneDataset(phone_id, samples, role=role)
    for s in ds.samples:
        validate_sample(s)
    return ds
