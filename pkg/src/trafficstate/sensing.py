"""Measurement extraction: probe speeds, flow detectors, ground truth.

Two ingestion paths produce the same MeasurementFrame sequence:

* vehicle trajectories (microscopic data): a random subset of vehicles is
  marked as connected, segment speeds are averaged over the connected
  vehicles present at each sampling instant, and flows are obtained from
  virtual detectors that count trajectory crossings at segment boundaries;
* stationary detector files (macroscopic data): each detector snaps to the
  nearest segment boundary, boundary i feeding segment i and boundary 0
  feeding the entry flow.

External units (meters, seconds, m/s) are converted here, once.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from trafficstate.network import NetworkConfig, RampType

logger = logging.getLogger(__name__)

__all__ = [
    "MeasurementFrame",
    "VehicleTrack",
    "TrajectoryData",
    "RampLaneRule",
    "TrajectoryFormatError",
    "DetectorFormatError",
    "load_trajectories",
    "load_detectors",
    "assign_connected",
    "positions_at",
    "segment_speed_series",
    "moving_average_speed",
    "crossing_times",
    "virtual_detector_flow",
    "lane_transition_flow",
    "ground_truth_densities",
    "frames_from_trajectories",
    "frames_from_detectors",
    "add_measurement_noise",
]

MPS_TO_KMH = 3.6


class TrajectoryFormatError(ValueError):
    """Raised when a trajectory CSV cannot be parsed."""


class DetectorFormatError(ValueError):
    """Raised when a detector CSV cannot be parsed."""


@dataclass(frozen=True)
class MeasurementFrame:
    """Everything the estimator consumes for one time step.

    ``speeds_kmh`` has one entry per segment, NaN where no connected
    vehicle reported. Flow maps are keyed by 1-based segment; ramp flows
    are non-negative magnitudes regardless of ramp direction. A missing
    entry flow is None (the filter holds the previous value).
    """

    speeds_kmh: np.ndarray
    entry_flow_vph: float | None
    sensor_flows_vph: Mapping[int, float] = field(default_factory=dict)
    measured_ramp_flows_vph: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "speeds_kmh", np.asarray(self.speeds_kmh, dtype=float))
        object.__setattr__(self, "sensor_flows_vph", dict(self.sensor_flows_vph))
        object.__setattr__(self, "measured_ramp_flows_vph", dict(self.measured_ramp_flows_vph))


@dataclass(frozen=True)
class VehicleTrack:
    """One vehicle's samples, sorted by time."""

    vehicle_id: int
    times_s: np.ndarray
    positions_m: np.ndarray
    speeds_mps: np.ndarray
    lanes: np.ndarray


class TrajectoryData:
    """Per-vehicle trajectory samples for one recording period."""

    def __init__(self, tracks: Iterable[VehicleTrack]):
        self.tracks: dict[int, VehicleTrack] = {t.vehicle_id: t for t in tracks}
        if not self.tracks:
            raise TrajectoryFormatError("no trajectory samples")
        self.vehicle_ids: tuple[int, ...] = tuple(sorted(self.tracks))
        self.t_min_s = min(float(t.times_s[0]) for t in self.tracks.values())
        self.t_max_s = max(float(t.times_s[-1]) for t in self.tracks.values())

    def __len__(self) -> int:
        return len(self.tracks)


@dataclass(frozen=True)
class RampLaneRule:
    """How to count a ramp's flow from lane numbers in trajectory data.

    On-ramps count vehicles whose lane changes away from ``lane`` (the
    merge); off-ramps count changes onto ``lane`` (the diverge).
    """

    segment: int
    lane: int
    kind: RampType


def load_trajectories(path: str | Path) -> TrajectoryData:
    """Read a trajectory CSV: vehicle_id,t_s,x_m,lane,speed_mps."""
    required = {"vehicle_id", "t_s", "x_m", "lane", "speed_mps"}
    rows: dict[int, list[tuple[float, float, float, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise TrajectoryFormatError(
                f"{path}: header must contain {sorted(required)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                vid = int(row["vehicle_id"])
                rows.setdefault(vid, []).append(
                    (float(row["t_s"]), float(row["x_m"]), float(row["speed_mps"]), int(row["lane"]))
                )
            except (TypeError, ValueError) as exc:
                raise TrajectoryFormatError(f"{path}:{lineno}: bad row {row!r}") from exc
    tracks = []
    for vid, samples in rows.items():
        samples.sort(key=lambda s: s[0])
        arr = np.array(samples, dtype=float)
        tracks.append(
            VehicleTrack(
                vehicle_id=vid,
                times_s=arr[:, 0],
                positions_m=arr[:, 1],
                speeds_mps=arr[:, 2],
                lanes=arr[:, 3].astype(int),
            )
        )
    return TrajectoryData(tracks)


def assign_connected(vehicle_ids: Sequence[int], penetration: float, rng: np.random.Generator) -> frozenset[int]:
    """Mark each vehicle as connected independently with probability p.

    Iterates ids in sorted order so the marking depends only on the seed,
    not on container ordering.
    """
    if not 0.0 <= penetration <= 1.0:
        raise ValueError(f"penetration must be in [0, 1], got {penetration}")
    return frozenset(vid for vid in sorted(vehicle_ids) if rng.random() < penetration)


def positions_at(
    traj: TrajectoryData, t_s: float, *, max_gap_s: float = 1.0
) -> dict[int, tuple[float, float, int]]:
    """Vehicles present at time t: {id: (x_m, speed_mps, lane)}.

    Uses each vehicle's latest sample at or before t, ignored when older
    than ``max_gap_s`` (the vehicle has left the recording).
    """
    out: dict[int, tuple[float, float, int]] = {}
    for vid, track in traj.tracks.items():
        i = int(np.searchsorted(track.times_s, t_s, side="right")) - 1
        if i < 0:
            continue
        if t_s - track.times_s[i] > max_gap_s:
            continue
        out[vid] = (float(track.positions_m[i]), float(track.speeds_mps[i]), int(track.lanes[i]))
    return out


def segment_speed_series(
    traj: TrajectoryData,
    cfg: NetworkConfig,
    n_steps: int,
    connected: frozenset[int],
    *,
    t0_s: float = 0.0,
    exclude_lanes: frozenset[int] = frozenset(),
    max_gap_s: float = 1.0,
) -> np.ndarray:
    """(K, N) connected-vehicle mean speed per segment in km/h, NaN if none.

    The speed of segment i at step k averages the instantaneous speeds of
    the connected vehicles located in segment i at time t0 + k*T.
    """
    T_s = cfg.time_step_h * 3600.0
    n = cfg.n_segments
    out = np.full((n_steps, n), np.nan)
    for k in range(n_steps):
        snap = positions_at(traj, t0_s + k * T_s, max_gap_s=max_gap_s)
        sums = np.zeros(n)
        counts = np.zeros(n, dtype=int)
        for vid, (x_m, v_mps, lane) in snap.items():
            if vid not in connected or lane in exclude_lanes:
                continue
            seg = cfg.segment_of_position(x_m / 1000.0)
            if seg is None:
                continue
            sums[seg - 1] += v_mps
            counts[seg - 1] += 1
        present = counts > 0
        out[k, present] = sums[present] / counts[present] * MPS_TO_KMH
    return out


def moving_average_speed(series_kmh: np.ndarray, window: int = 3) -> np.ndarray:
    """Trailing moving average that skips missing entries.

    Each output cell averages the finite values among the ``window`` most
    recent steps of that segment; it stays NaN only when all of them are
    missing.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    s = np.asarray(series_kmh, dtype=float)
    out = np.full_like(s, np.nan)
    for k in range(s.shape[0]):
        chunk = s[max(0, k - window + 1) : k + 1]
        finite = np.isfinite(chunk)
        counts = finite.sum(axis=0)
        sums = np.where(finite, chunk, 0.0).sum(axis=0)
        good = counts > 0
        out[k, good] = sums[good] / counts[good]
    return out


def crossing_times(traj: TrajectoryData, x_m: float) -> dict[int, float]:
    """First time each vehicle crosses position x, by linear interpolation.

    Vehicles already past x at their first sample never cross and are
    omitted, as are vehicles that never reach x.
    """
    out: dict[int, float] = {}
    for vid, track in traj.tracks.items():
        pos = track.positions_m
        if pos[0] >= x_m:
            continue
        above = np.nonzero(pos >= x_m)[0]
        if above.size == 0:
            continue
        i = int(above[0])
        x0, x1 = pos[i - 1], pos[i]
        t0, t1 = track.times_s[i - 1], track.times_s[i]
        if x1 == x0:
            out[vid] = float(t1)
        else:
            out[vid] = float(t0 + (x_m - x0) / (x1 - x0) * (t1 - t0))
    return out


def _bin_crossings(times_s: Iterable[float], n_steps: int, T_s: float, t0_s: float) -> np.ndarray:
    counts = np.zeros(n_steps, dtype=int)
    for t in times_s:
        k = math.ceil((t - t0_s) / T_s) - 1
        if 0 <= k < n_steps:
            counts[k] += 1
    return counts


def virtual_detector_flow(
    traj: TrajectoryData,
    x_m: float,
    n_steps: int,
    time_step_h: float,
    *,
    t0_s: float = 0.0,
    lanes: frozenset[int] | None = None,
) -> np.ndarray:
    """(K,) flow in veh/h past position x, counting crossings per interval.

    Step k covers the interval (t0 + k*T, t0 + (k+1)*T]. ``lanes``
    restricts the count to vehicles in those lanes at the crossing.
    """
    times = crossing_times(traj, x_m)
    if lanes is not None:
        kept = {}
        for vid, t in times.items():
            track = traj.tracks[vid]
            i = min(int(np.searchsorted(track.times_s, t, side="right")), len(track.lanes) - 1)
            if int(track.lanes[i]) in lanes:
                kept[vid] = t
        times = kept
    T_s = time_step_h * 3600.0
    counts = _bin_crossings(times.values(), n_steps, T_s, t0_s)
    return counts / time_step_h


def lane_transition_flow(
    traj: TrajectoryData,
    rule: RampLaneRule,
    n_steps: int,
    time_step_h: float,
    *,
    t0_s: float = 0.0,
) -> np.ndarray:
    """(K,) ramp flow in veh/h counted from lane transitions.

    Each vehicle contributes at most once, at its first transition off the
    ramp lane (on-ramp) or onto it (off-ramp).
    """
    events: list[float] = []
    for track in traj.tracks.values():
        lanes = track.lanes
        if len(lanes) < 2:
            continue
        on_ramp_lane = lanes == rule.lane
        if rule.kind is RampType.ON:
            hits = np.nonzero(on_ramp_lane[:-1] & ~on_ramp_lane[1:])[0]
        else:
            hits = np.nonzero(~on_ramp_lane[:-1] & on_ramp_lane[1:])[0]
        if hits.size:
            events.append(float(track.times_s[int(hits[0]) + 1]))
    T_s = time_step_h * 3600.0
    counts = _bin_crossings(events, n_steps, T_s, t0_s)
    return counts / time_step_h


def ground_truth_densities(
    traj: TrajectoryData,
    cfg: NetworkConfig,
    n_steps: int,
    *,
    t0_s: float = 0.0,
    exclude_lanes: frozenset[int] = frozenset(),
    max_gap_s: float = 1.0,
) -> np.ndarray:
    """(K, N) reference density: vehicles in segment at kT over its length."""
    n = cfg.n_segments
    lengths = cfg.lengths_km
    T_s = cfg.time_step_h * 3600.0
    out = np.zeros((n_steps, n))
    for k in range(n_steps):
        snap = positions_at(traj, t0_s + k * T_s, max_gap_s=max_gap_s)
        counts = np.zeros(n)
        for vid, (x_m, _v, lane) in snap.items():
            if lane in exclude_lanes:
                continue
            seg = cfg.segment_of_position(x_m / 1000.0)
            if seg is not None:
                counts[seg - 1] += 1
        out[k] = counts / lengths
    return out


def frames_from_trajectories(
    traj: TrajectoryData,
    cfg: NetworkConfig,
    penetration: float,
    rng: np.random.Generator,
    *,
    n_steps: int | None = None,
    t0_s: float = 0.0,
    window: int = 3,
    exclude_lanes: frozenset[int] = frozenset(),
    ramp_rules: Sequence[RampLaneRule] = (),
    max_gap_s: float = 1.0,
) -> list[MeasurementFrame]:
    """Build the estimator input sequence from microscopic data.

    Connected vehicles are drawn once for the whole recording. Flows come
    from virtual detectors at the entry boundary and at the downstream
    boundary of every segment carrying a flow sensor; measured ramps need
    a RampLaneRule. Speeds are smoothed with the trailing window average.
    """
    T_s = cfg.time_step_h * 3600.0
    if n_steps is None:
        n_steps = int(math.floor((traj.t_max_s - t0_s) / T_s))
    if n_steps <= 0:
        raise ValueError(f"recording too short: {n_steps} steps")

    connected = assign_connected(traj.vehicle_ids, penetration, rng)
    raw = segment_speed_series(
        traj, cfg, n_steps, connected, t0_s=t0_s, exclude_lanes=exclude_lanes, max_gap_s=max_gap_s
    )
    speeds = moving_average_speed(raw, window=window)

    boundaries_m = cfg.boundaries_km() * 1000.0
    lanes_kept = None
    if exclude_lanes:
        all_lanes = {int(l) for tr in traj.tracks.values() for l in np.unique(tr.lanes)}
        lanes_kept = frozenset(all_lanes - set(exclude_lanes))
    entry = virtual_detector_flow(
        traj, boundaries_m[0], n_steps, cfg.time_step_h, t0_s=t0_s, lanes=lanes_kept
    )
    sensor_flows = {
        j: virtual_detector_flow(
            traj, boundaries_m[j], n_steps, cfg.time_step_h, t0_s=t0_s, lanes=lanes_kept
        )
        for j in sorted(cfg.flow_sensor_segments)
    }

    measured_segments = set(cfg.ramp_segments(measured=True))
    rules_by_segment = {r.segment: r for r in ramp_rules}
    missing = measured_segments - rules_by_segment.keys()
    if missing:
        raise ValueError(f"measured ramps without a lane rule: {sorted(missing)}")
    ramp_flows = {
        seg: lane_transition_flow(traj, rules_by_segment[seg], n_steps, cfg.time_step_h, t0_s=t0_s)
        for seg in sorted(measured_segments)
    }

    frames = []
    for k in range(n_steps):
        frames.append(
            MeasurementFrame(
                speeds_kmh=speeds[k],
                entry_flow_vph=float(entry[k]),
                sensor_flows_vph={j: float(q[k]) for j, q in sensor_flows.items()},
                measured_ramp_flows_vph={s: float(q[k]) for s, q in ramp_flows.items()},
            )
        )
    return frames


@dataclass(frozen=True)
class DetectorSeries:
    """One stationary detector's time series, sorted by time."""

    position_m: float
    times_s: np.ndarray
    flows_vph: np.ndarray
    speeds_kmh: np.ndarray


def load_detectors(path: str | Path) -> list[DetectorSeries]:
    """Read a detector CSV: detector_pos_m,t_s,flow_vph,speed_kmh."""
    required = {"detector_pos_m", "t_s", "flow_vph", "speed_kmh"}
    rows: dict[float, list[tuple[float, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DetectorFormatError(
                f"{path}: header must contain {sorted(required)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                pos = float(row["detector_pos_m"])
                rows.setdefault(pos, []).append(
                    (float(row["t_s"]), float(row["flow_vph"]), float(row["speed_kmh"]))
                )
            except (TypeError, ValueError) as exc:
                raise DetectorFormatError(f"{path}:{lineno}: bad row {row!r}") from exc
    if not rows:
        raise DetectorFormatError(f"{path}: no detector rows")
    series = []
    for pos in sorted(rows):
        samples = sorted(rows[pos], key=lambda s: s[0])
        arr = np.array(samples, dtype=float)
        series.append(
            DetectorSeries(
                position_m=pos, times_s=arr[:, 0], flows_vph=arr[:, 1], speeds_kmh=arr[:, 2]
            )
        )
    return series


def snap_detectors_to_boundaries(
    detectors: Sequence[DetectorSeries], cfg: NetworkConfig, *, tolerance_m: float = 100.0
) -> dict[int, DetectorSeries]:
    """Assign each detector to its nearest segment boundary (0..N).

    Boundary 0 is the stretch entry; boundary i the downstream end of
    segment i. Detectors farther than ``tolerance_m`` from every boundary
    are dropped with a warning; a boundary claimed twice keeps the nearer
    detector.
    """
    boundaries_m = cfg.boundaries_km() * 1000.0
    assigned: dict[int, tuple[float, DetectorSeries]] = {}
    for det in detectors:
        dists = np.abs(boundaries_m - det.position_m)
        b = int(np.argmin(dists))
        d = float(dists[b])
        if d > tolerance_m:
            logger.warning(
                "detector at %.1f m is %.1f m from the nearest boundary, dropped",
                det.position_m,
                d,
            )
            continue
        if b not in assigned or d < assigned[b][0]:
            assigned[b] = (d, det)
    return {b: det for b, (_d, det) in assigned.items()}


def frames_from_detectors(
    detectors: Sequence[DetectorSeries],
    cfg: NetworkConfig,
    *,
    n_steps: int | None = None,
    t0_s: float | None = None,
    tolerance_m: float = 100.0,
) -> list[MeasurementFrame]:
    """Build the estimator input sequence from stationary detector files.

    The detector snapped to boundary i supplies segment i's speed, and its
    flow when segment i carries a sensor in the network config; boundary 0
    supplies the entry flow. Each detector sample is mapped to the nearest
    step of the grid t0 + k*T; steps without a sample stay missing.
    """
    by_boundary = snap_detectors_to_boundaries(detectors, cfg, tolerance_m=tolerance_m)
    if not by_boundary:
        raise DetectorFormatError("no detector lies near any segment boundary")
    T_s = cfg.time_step_h * 3600.0
    if t0_s is None:
        t0_s = min(float(d.times_s[0]) for d in by_boundary.values())
    if n_steps is None:
        t_end = max(float(d.times_s[-1]) for d in by_boundary.values())
        n_steps = int(math.floor((t_end - t0_s) / T_s)) + 1

    n = cfg.n_segments
    speeds = np.full((n_steps, n), np.nan)
    entry = np.full(n_steps, np.nan)
    sensor_flows = {j: np.full(n_steps, np.nan) for j in sorted(cfg.flow_sensor_segments)}

    for b, det in sorted(by_boundary.items()):
        ks = np.rint((det.times_s - t0_s) / T_s).astype(int)
        keep = (ks >= 0) & (ks < n_steps)
        if b == 0:
            entry[ks[keep]] = det.flows_vph[keep]
            continue
        speeds[ks[keep], b - 1] = det.speeds_kmh[keep]
        if b in sensor_flows:
            sensor_flows[b][ks[keep]] = det.flows_vph[keep]

    frames = []
    for k in range(n_steps):
        frames.append(
            MeasurementFrame(
                speeds_kmh=speeds[k],
                entry_flow_vph=None if not np.isfinite(entry[k]) else float(entry[k]),
                sensor_flows_vph={
                    j: float(q[k]) for j, q in sensor_flows.items() if np.isfinite(q[k])
                },
                measured_ramp_flows_vph={},
            )
        )
    return frames


def add_measurement_noise(
    frames: Sequence[MeasurementFrame],
    rng: np.random.Generator,
    *,
    flow_std_vph: float = 0.0,
    speed_std_kmh: float = 0.0,
    clamp_nonnegative: bool = False,
) -> list[MeasurementFrame]:
    """Corrupt frames with independent zero-mean Gaussian noise.

    Flow noise hits the entry flow, every sensor flow and every measured
    ramp flow; speed noise hits every reported segment speed. Values are
    not clipped unless ``clamp_nonnegative`` floors them at zero, except
    measured ramp magnitudes, which are always floored (a negative
    magnitude has no direction to encode).
    """
    if flow_std_vph < 0 or speed_std_kmh < 0:
        raise ValueError("noise standard deviations must be non-negative")

    def flow(x: float, floor: bool) -> float:
        y = x + rng.normal(0.0, flow_std_vph) if flow_std_vph > 0 else x
        return max(y, 0.0) if floor or clamp_nonnegative else y

    out = []
    for frame in frames:
        speeds = frame.speeds_kmh.copy()
        if speed_std_kmh > 0:
            noise = rng.normal(0.0, speed_std_kmh, speeds.shape[0])
            speeds = speeds + noise
            if clamp_nonnegative:
                speeds = np.maximum(speeds, 0.0)
        entry = frame.entry_flow_vph
        out.append(
            MeasurementFrame(
                speeds_kmh=speeds,
                entry_flow_vph=None if entry is None else flow(entry, False),
                sensor_flows_vph={
                    j: flow(q, False) for j, q in sorted(frame.sensor_flows_vph.items())
                },
                measured_ramp_flows_vph={
                    s: flow(q, True) for s, q in sorted(frame.measured_ramp_flows_vph.items())
                },
            )
        )
    return out
