"""Highway stretch topology, sensor placement, and discretization checks.

Units are fixed across the whole package: lengths in km, time in hours,
speeds in km/h, densities in veh/km, flows in veh/h. Ingestion code converts
at the boundary (meters, m/s, seconds); nothing downstream converts again.

Segments are numbered 1..N. A flow sensor "at segment j" measures the total
flow crossing the downstream boundary of segment j; the entry flow of the
stretch is treated as a model input, not a sensor entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "RampType",
    "Segment",
    "NetworkConfig",
    "Violation",
    "ValidationReport",
    "CflReport",
    "NetworkFormatError",
    "validate_network",
    "check_cfl",
    "load_network",
    "save_network",
]


class NetworkFormatError(ValueError):
    """Raised when a network file cannot be parsed into a NetworkConfig."""


class RampType(str, Enum):
    NONE = "none"
    ON = "on_ramp"
    OFF = "off_ramp"


@dataclass(frozen=True)
class Segment:
    """One highway segment; at most one ramp (on or off) may attach to it.

    ``ramp_measured`` is meaningful only when ``ramp`` is not NONE: it marks
    whether the ramp flow is directly sensed or must be estimated.
    """

    length_km: float
    ramp: RampType = RampType.NONE
    ramp_measured: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.ramp, RampType):
            object.__setattr__(self, "ramp", RampType(self.ramp))


@dataclass(frozen=True)
class NetworkConfig:
    """A single linear stretch: ordered segments plus sensor placement.

    Segment indices are 1-based everywhere (a segment's identity is its
    position in ``segments``). ``flow_sensor_segments`` holds the segments
    whose exit flow is measured; the stretch entry flow is a separate input
    and is flagged by ``entry_flow_measured``.
    """

    segments: tuple[Segment, ...]
    flow_sensor_segments: frozenset[int]
    time_step_h: float
    entry_flow_measured: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(
            self, "flow_sensor_segments", frozenset(int(j) for j in self.flow_sensor_segments)
        )
        if not self.segments:
            raise ValueError("NetworkConfig requires at least one segment")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def lengths_km(self) -> np.ndarray:
        return np.array([s.length_km for s in self.segments], dtype=float)

    @property
    def total_length_km(self) -> float:
        return float(sum(s.length_km for s in self.segments))

    def boundaries_km(self) -> np.ndarray:
        """Positions of the N+1 segment boundaries from the stretch origin."""
        return np.concatenate([[0.0], np.cumsum(self.lengths_km)])

    def ramp_segments(self, *, measured: bool | None = None) -> tuple[int, ...]:
        """1-based indices of segments with a ramp, optionally filtered."""
        out = []
        for i, seg in enumerate(self.segments, start=1):
            if seg.ramp is RampType.NONE:
                continue
            if measured is None or seg.ramp_measured == measured:
                out.append(i)
        return tuple(out)

    def segment_of_position(self, x_km: float) -> int | None:
        """1-based segment containing position ``x_km``, or None if outside.

        Boundaries belong to the downstream segment, except the stretch end
        which belongs to segment N.
        """
        if x_km < 0.0 or x_km > self.total_length_km:
            return None
        edges = self.boundaries_km()
        if x_km >= edges[-1]:
            return self.n_segments
        return int(np.searchsorted(edges, x_km, side="right"))


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[Violation, ...]

    def __str__(self) -> str:
        if self.ok:
            return "network ok"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  [{v.rule}] {v.message}" for v in self.violations]
        return "\n".join(lines)


@dataclass(frozen=True)
class CflReport:
    """Result of the discretization accuracy check T*v/delta < 1."""

    max_ratio: float
    violations: tuple[tuple[int, int, float], ...]  # (step k, segment i, ratio)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_network(cfg: NetworkConfig) -> ValidationReport:
    """Check every structural invariant of a network configuration.

    All problems are reported, never raised. ``ok`` is true iff the
    placement rule makes the augmented system observable by construction:
    entry and exit flows measured, and at least one mainstream sensor
    between every two consecutive unmeasured ramps.
    """
    violations: list[Violation] = []
    n = cfg.n_segments

    bad_len = tuple(i for i, s in enumerate(cfg.segments, start=1) if s.length_km <= 0)
    if bad_len:
        violations.append(
            Violation("segment-length", f"non-positive segment length at {list(bad_len)}", bad_len)
        )
    if cfg.time_step_h <= 0:
        violations.append(Violation("time-step", f"time_step_h must be positive, got {cfg.time_step_h}"))
    if not cfg.entry_flow_measured:
        violations.append(Violation("entry-flow", "entry flow must be measured"))

    out_of_range = tuple(sorted(j for j in cfg.flow_sensor_segments if j < 1 or j > n))
    if out_of_range:
        violations.append(
            Violation("sensor-range", f"sensor segments outside 1..{n}: {list(out_of_range)}", out_of_range)
        )
    if n not in cfg.flow_sensor_segments:
        violations.append(
            Violation("exit-flow", f"exit flow sensor missing: segment {n} must carry a sensor", (n,))
        )

    unmeasured = cfg.ramp_segments(measured=False)
    for a, b in zip(unmeasured, unmeasured[1:]):
        if not any(a <= j <= b - 1 for j in cfg.flow_sensor_segments):
            violations.append(
                Violation(
                    "ramp-placement",
                    f"no mainstream sensor between consecutive unmeasured ramps {a},{b}"
                    f" (need one at some segment in {a}..{b - 1})",
                    (a, b),
                )
            )

    return ValidationReport(ok=not violations, violations=tuple(violations))


def check_cfl(cfg: NetworkConfig, speeds_kmh) -> CflReport:
    """Evaluate T*v_i(k)/delta_i for a per-step, per-segment speed series.

    ``speeds_kmh`` is (K, N) array-like; NaN entries (missing reports) are
    skipped. A pair (k, i) is flagged iff its ratio is >= 1.
    """
    v = np.asarray(speeds_kmh, dtype=float)
    if v.ndim == 1:
        v = v[np.newaxis, :]
    if v.size == 0:
        return CflReport(max_ratio=0.0, violations=())
    if v.shape[1] != cfg.n_segments:
        raise ValueError(f"speed series has {v.shape[1]} columns, expected {cfg.n_segments}")

    ratios = cfg.time_step_h * v / cfg.lengths_km[np.newaxis, :]
    finite = np.isfinite(ratios)
    max_ratio = float(np.max(ratios[finite])) if finite.any() else 0.0
    bad = np.argwhere(finite & (ratios >= 1.0))
    violations = tuple((int(k), int(i) + 1, float(ratios[k, i])) for k, i in bad)
    return CflReport(max_ratio=max_ratio, violations=violations)


def _segment_from_dict(d: dict, pos: int) -> Segment:
    try:
        length = float(d["length_km"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"segment {pos}: bad or missing length_km") from exc
    ramp_raw = d.get("ramp", "none")
    try:
        ramp = RampType(ramp_raw)
    except ValueError as exc:
        raise NetworkFormatError(f"segment {pos}: unknown ramp type {ramp_raw!r}") from exc
    return Segment(length_km=length, ramp=ramp, ramp_measured=bool(d.get("ramp_measured", False)))


def load_network(path: str | Path) -> NetworkConfig:
    """Read a network config from its JSON file format.

    Schema: ``{"time_step_h": float, "segments": [{"length_km": float,
    "ramp": "none"|"on_ramp"|"off_ramp", "ramp_measured": bool}, ...],
    "flow_sensors": [int, ...], "entry_flow_measured": bool}``.
    """
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise NetworkFormatError(f"{path}: expected a JSON object at top level")
    try:
        time_step = float(raw["time_step_h"])
        seg_list = raw["segments"]
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"{path}: missing or malformed time_step_h/segments") from exc
    if not isinstance(seg_list, list) or not seg_list:
        raise NetworkFormatError(f"{path}: segments must be a non-empty array")
    segments = tuple(_segment_from_dict(d, i) for i, d in enumerate(seg_list, start=1))
    sensors = raw.get("flow_sensors", [])
    if not isinstance(sensors, list):
        raise NetworkFormatError(f"{path}: flow_sensors must be an array of segment indices")
    try:
        sensor_set = frozenset(int(j) for j in sensors)
    except (TypeError, ValueError) as exc:
        raise NetworkFormatError(f"{path}: flow_sensors entries must be integers") from exc
    return NetworkConfig(
        segments=segments,
        flow_sensor_segments=sensor_set,
        time_step_h=time_step,
        entry_flow_measured=bool(raw.get("entry_flow_measured", True)),
    )


def save_network(cfg: NetworkConfig, path: str | Path) -> None:
    payload = {
        "time_step_h": cfg.time_step_h,
        "segments": [
            {"length_km": s.length_km, "ramp": s.ramp.value, "ramp_measured": s.ramp_measured}
            for s in cfg.segments
        ],
        "flow_sensors": sorted(cfg.flow_sensor_segments),
        "entry_flow_measured": cfg.entry_flow_measured,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
