"""Synthetic ground truth from the conservation dynamics.

A Scenario prescribes exogenous segment speeds and demands; simulate_truth
iterates the density conservation recursion exactly, which makes the result
a brute-force oracle for the estimator (truth and filter share the model
class). Probe reports are emulated afterwards by sampling per-segment
vehicle subsets, so penetration-rate experiments run without any
microscopic data.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from trafficstate.network import NetworkConfig, RampType, Segment, check_cfl
from trafficstate.sensing import MeasurementFrame, moving_average_speed

logger = logging.getLogger(__name__)

__all__ = [
    "Scenario",
    "SimulationResult",
    "RawMeasurements",
    "CflViolationError",
    "simulate_truth",
    "emulate_probe_speeds",
    "synthetic_measurements",
    "frames_from_raw",
    "frames_from_simulation",
    "make_congestion_scenario",
    "preset_filter_defaults",
    "save_scenario",
    "load_scenario",
    "PRESET_NAMES",
]

PRESET_NAMES = ("ngsim_like", "a20_like")


class CflViolationError(RuntimeError):
    """Raised in strict mode when a scenario breaks the accuracy bound."""


@dataclass(frozen=True)
class Scenario:
    """Exogenous inputs for one synthetic run.

    ``speeds_kmh`` is the true mean speed table (K, N); ``entry_flow_vph``
    the demand entering segment 1; ``ramp_flows_vph`` maps 1-based ramp
    segments to non-negative magnitude series (off-ramp direction is taken
    from the network). Ramp segments absent from the map flow zero.
    """

    cfg: NetworkConfig
    n_steps: int
    initial_density_veh_km: np.ndarray
    speeds_kmh: np.ndarray
    entry_flow_vph: np.ndarray
    ramp_flows_vph: Mapping[int, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self) -> None:
        n = self.cfg.n_segments
        K = self.n_steps
        rho0 = np.asarray(self.initial_density_veh_km, dtype=float)
        v = np.asarray(self.speeds_kmh, dtype=float)
        q0 = np.asarray(self.entry_flow_vph, dtype=float)
        if rho0.shape != (n,):
            raise ValueError(f"initial density must have shape ({n},), got {rho0.shape}")
        if v.shape != (K, n):
            raise ValueError(f"speed table must have shape ({K}, {n}), got {v.shape}")
        if q0.shape != (K,):
            raise ValueError(f"entry flow must have shape ({K},), got {q0.shape}")
        if (rho0 < 0).any() or (q0 < 0).any() or (v < 0).any():
            raise ValueError("initial densities, speeds and demands must be non-negative")
        ramps = {}
        ramp_segments = set(self.cfg.ramp_segments())
        for seg, series in dict(self.ramp_flows_vph).items():
            if seg not in ramp_segments:
                raise ValueError(f"segment {seg} carries no ramp in the network")
            arr = np.asarray(series, dtype=float)
            if arr.shape != (K,):
                raise ValueError(f"ramp flow at segment {seg} must have shape ({K},), got {arr.shape}")
            if (arr < 0).any():
                raise ValueError(f"ramp flow at segment {seg} must be non-negative")
            ramps[int(seg)] = arr
        object.__setattr__(self, "initial_density_veh_km", rho0)
        object.__setattr__(self, "speeds_kmh", v)
        object.__setattr__(self, "entry_flow_vph", q0)
        object.__setattr__(self, "ramp_flows_vph", ramps)


@dataclass(frozen=True)
class SimulationResult:
    """Truth produced by the conservation recursion.

    ``densities`` has K+1 rows (row 0 is the initial condition);
    ``segment_flows`` has K rows of q_i(k) = rho_i(k) * v_i(k).
    """

    scenario: Scenario
    densities: np.ndarray
    segment_flows: np.ndarray

    @property
    def exit_flow_vph(self) -> np.ndarray:
        return self.segment_flows[:, -1]

    @property
    def speeds_kmh(self) -> np.ndarray:
        return self.scenario.speeds_kmh


def _signed_ramp_table(sc: Scenario) -> np.ndarray:
    """(K, N) net ramp flow, on-ramps positive, off-ramps negative."""
    net = np.zeros((sc.n_steps, sc.cfg.n_segments))
    for seg, series in sc.ramp_flows_vph.items():
        sign = 1.0 if sc.cfg.segments[seg - 1].ramp is RampType.ON else -1.0
        net[:, seg - 1] = sign * series
    return net


def simulate_truth(sc: Scenario, *, strict_cfl: bool = False) -> SimulationResult:
    """Iterate the density conservation recursion exactly.

    Each step applies rho_i += (T/delta_i) * (q_{i-1} - q_i + r_i - s_i)
    with q_i = rho_i * v_i and q_0 the entry demand. The accuracy bound on
    T*v/delta is checked first: violations warn, or raise in strict mode.
    """
    cfl = check_cfl(sc.cfg, sc.speeds_kmh)
    if not cfl.ok:
        msg = (
            f"scenario {sc.name or '<unnamed>'}: accuracy bound exceeded at"
            f" {len(cfl.violations)} (step, segment) pairs, max ratio {cfl.max_ratio:.3f}"
        )
        if strict_cfl:
            raise CflViolationError(msg)
        logger.warning(msg)

    n = sc.cfg.n_segments
    K = sc.n_steps
    ratio = sc.cfg.time_step_h / sc.cfg.lengths_km
    net_ramp = _signed_ramp_table(sc)

    densities = np.zeros((K + 1, n))
    flows = np.zeros((K, n))
    densities[0] = sc.initial_density_veh_km
    for k in range(K):
        rho = densities[k]
        q = rho * sc.speeds_kmh[k]
        flows[k] = q
        upstream = np.concatenate([[sc.entry_flow_vph[k]], q[:-1]])
        densities[k + 1] = rho + ratio * (upstream - q + net_ramp[k])
    return SimulationResult(scenario=sc, densities=densities, segment_flows=flows)


def emulate_probe_speeds(
    result: SimulationResult,
    penetration: float,
    rng: np.random.Generator,
    *,
    speed_spread_kmh: float = 3.0,
) -> np.ndarray:
    """Per-step reported segment speeds under partial penetration.

    Each cell holds rho*delta vehicles (rounded); a binomial draw decides
    how many are connected. No connected vehicle means no report (NaN).
    Otherwise the reported mean speed deviates from the true mean with the
    finite-population standard error spread*sqrt(1/m - 1/n), which
    vanishes when every vehicle reports.
    """
    if not 0.0 <= penetration <= 1.0:
        raise ValueError(f"penetration must be in [0, 1], got {penetration}")
    sc = result.scenario
    K, n = sc.n_steps, sc.cfg.n_segments
    lengths = sc.cfg.lengths_km
    out = np.full((K, n), np.nan)
    for k in range(K):
        counts = np.rint(np.maximum(result.densities[k] * lengths, 0.0)).astype(int)
        for i in range(n):
            total = int(counts[i])
            if total == 0:
                continue
            m = int(rng.binomial(total, penetration))
            if m == 0:
                continue
            v = result.speeds_kmh[k, i]
            if 0 < m < total and speed_spread_kmh > 0:
                v = v + rng.normal(0.0, speed_spread_kmh * math.sqrt(1.0 / m - 1.0 / total))
            out[k, i] = v
    return out


@dataclass(frozen=True)
class RawMeasurements:
    """Unsmoothed per-step measurements, shared by smoothing variants.

    Splitting raw generation from windowing lets paired experiments feed
    the same sampled speeds through several smoothing windows.
    """

    speeds_kmh: np.ndarray
    entry_flow_vph: np.ndarray
    sensor_flows_vph: dict[int, np.ndarray]
    measured_ramp_flows_vph: dict[int, np.ndarray]


def synthetic_measurements(
    result: SimulationResult,
    rng: np.random.Generator | None = None,
    *,
    penetration: float = 1.0,
    speed_spread_kmh: float = 3.0,
    flow_noise_std_vph: float = 0.0,
    speed_noise_std_kmh: float = 0.0,
    clamp_nonnegative: bool = False,
) -> RawMeasurements:
    """Extract raw measurements from a simulated truth.

    Full penetration with zero spread and zero noise is the exact path:
    speeds and flows are the truth tables and the generator is untouched.
    Draw order is fixed (probe emulation, then speed noise, then flow
    noise on entry, sensors, measured ramps) so results depend only on the
    generator state. Measured ramp magnitudes are floored at zero.
    """
    sc = result.scenario
    needs_rng = penetration < 1.0 or flow_noise_std_vph > 0 or speed_noise_std_kmh > 0
    exact_speeds = penetration >= 1.0
    if rng is None:
        if needs_rng:
            raise ValueError("an rng is required when sampling or noise is requested")
        rng = np.random.default_rng(0)

    if exact_speeds:
        speeds = result.speeds_kmh.copy()
    else:
        speeds = emulate_probe_speeds(result, penetration, rng, speed_spread_kmh=speed_spread_kmh)
    if speed_noise_std_kmh > 0:
        speeds = speeds + rng.normal(0.0, speed_noise_std_kmh, speeds.shape)
    if clamp_nonnegative:
        speeds = np.maximum(speeds, 0.0)

    entry = sc.entry_flow_vph.copy()
    sensors = {
        j: result.segment_flows[:, j - 1].copy() for j in sorted(sc.cfg.flow_sensor_segments)
    }
    measured = {
        seg: np.asarray(sc.ramp_flows_vph.get(seg, np.zeros(sc.n_steps)), dtype=float).copy()
        for seg in sc.cfg.ramp_segments(measured=True)
    }
    if flow_noise_std_vph > 0:
        entry = entry + rng.normal(0.0, flow_noise_std_vph, entry.shape)
        for j in sorted(sensors):
            sensors[j] = sensors[j] + rng.normal(0.0, flow_noise_std_vph, sc.n_steps)
        for seg in sorted(measured):
            noisy = measured[seg] + rng.normal(0.0, flow_noise_std_vph, sc.n_steps)
            measured[seg] = np.maximum(noisy, 0.0)
        if clamp_nonnegative:
            entry = np.maximum(entry, 0.0)
            sensors = {j: np.maximum(q, 0.0) for j, q in sensors.items()}
    return RawMeasurements(
        speeds_kmh=speeds,
        entry_flow_vph=entry,
        sensor_flows_vph=sensors,
        measured_ramp_flows_vph=measured,
    )


def frames_from_raw(raw: RawMeasurements, *, window: int = 1) -> list[MeasurementFrame]:
    """Assemble estimator frames, smoothing speeds with a trailing window."""
    speeds = raw.speeds_kmh if window <= 1 else moving_average_speed(raw.speeds_kmh, window)
    K = speeds.shape[0]
    frames = []
    for k in range(K):
        frames.append(
            MeasurementFrame(
                speeds_kmh=speeds[k],
                entry_flow_vph=float(raw.entry_flow_vph[k]),
                sensor_flows_vph={j: float(q[k]) for j, q in raw.sensor_flows_vph.items()},
                measured_ramp_flows_vph={
                    s: float(q[k]) for s, q in raw.measured_ramp_flows_vph.items()
                },
            )
        )
    return frames


def frames_from_simulation(
    result: SimulationResult,
    rng: np.random.Generator | None = None,
    *,
    penetration: float = 1.0,
    speed_spread_kmh: float = 3.0,
    window: int = 1,
    flow_noise_std_vph: float = 0.0,
    speed_noise_std_kmh: float = 0.0,
    clamp_nonnegative: bool = False,
) -> list[MeasurementFrame]:
    raw = synthetic_measurements(
        result,
        rng,
        penetration=penetration,
        speed_spread_kmh=speed_spread_kmh,
        flow_noise_std_vph=flow_noise_std_vph,
        speed_noise_std_kmh=speed_noise_std_kmh,
        clamp_nonnegative=clamp_nonnegative,
    )
    return frames_from_raw(raw, window=window)


def _raised_cosine(k: np.ndarray, start: int, end: int) -> np.ndarray:
    """Smooth 0 -> 1 -> 0 hump supported on [start, end]."""
    inside = (k >= start) & (k <= end)
    phase = 2.0 * np.pi * (k - start) / max(end - start, 1)
    return np.where(inside, 0.5 * (1.0 - np.cos(phase)), 0.0)


def _ngsim_like(seed: int) -> Scenario:
    rng = np.random.default_rng(seed)
    n, K = 8, 360
    delta = 0.05
    T = 5.0 / 3600.0
    cfg = NetworkConfig(
        segments=tuple(
            Segment(length_km=delta, ramp=RampType.ON if i == 4 else RampType.NONE)
            for i in range(1, n + 1)
        ),
        flow_sensor_segments=frozenset({n}),
        time_step_h=T,
    )
    phase_wave, phase_demand, phase_ramp = rng.uniform(0.0, 2.0 * np.pi, 3)

    k = np.arange(K)
    t_h = k * T
    centers = (np.arange(1, n + 1) - 0.5) * delta
    # Stop-and-go bands sweeping upstream at 18 km/h; 34 km/h peak keeps
    # T*v/delta at 0.944, inside the accuracy bound.
    phases = 2.0 * np.pi * (centers[np.newaxis, :] + 18.0 * t_h[:, np.newaxis]) / 1.6
    speeds = 24.0 + 10.0 * np.sin(phases + phase_wave)

    entry = 6500.0 + 600.0 * np.sin(2.0 * np.pi * t_h / 0.10 + phase_demand)
    ramp = 600.0 + 100.0 * np.sin(2.0 * np.pi * t_h / 0.30 + phase_ramp)
    upstream_flow = np.full(n, entry[0])
    upstream_flow[3:] += ramp[0]
    rho0 = upstream_flow / speeds[0]
    return Scenario(
        cfg=cfg,
        n_steps=K,
        initial_density_veh_km=rho0,
        speeds_kmh=speeds,
        entry_flow_vph=entry,
        ramp_flows_vph={4: ramp},
        name="ngsim_like",
    )


def _a20_like(seed: int) -> Scenario:
    rng = np.random.default_rng(seed)
    n, K = 31, 1200
    T = 8.0 / 3600.0
    idx = np.arange(1, n + 1)
    deltas = 0.56 + 0.24 * ((3 * idx) % 7) / 6.0
    on_ramps = (3, 17, 25)
    off_ramps = (14, 21)
    segments = []
    for i in range(1, n + 1):
        ramp = RampType.ON if i in on_ramps else RampType.OFF if i in off_ramps else RampType.NONE
        segments.append(Segment(length_km=float(deltas[i - 1]), ramp=ramp))
    cfg = NetworkConfig(
        segments=tuple(segments),
        flow_sensor_segments=frozenset({13, 16, 20, 24, 31}),
        time_step_h=T,
    )

    k = np.arange(K)
    t_h = k * T
    # Internal bottleneck around segments 11..15: speeds dip to 40 km/h,
    # then fully recover; free flow 100 km/h against delta/T >= 252.
    dip_profile = np.exp(-((idx - 12.5) ** 2) / (2.0 * 3.0**2))
    dip_amplitude = 60.0 * _raised_cosine(k, 250, 800)
    speeds = 100.0 - dip_amplitude[:, np.newaxis] * dip_profile[np.newaxis, :]

    entry = 3200.0 + 800.0 * _raised_cosine(k, 200, 900)
    # Ramp period divides the horizon so end-of-run densities land back on
    # the initial profile for every seed.
    ramp_period_h = K * T / 6.0
    ramp_flows: dict[int, np.ndarray] = {}
    for seg in on_ramps:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ramp_flows[seg] = 500.0 + 100.0 * np.sin(2.0 * np.pi * t_h / ramp_period_h + phase)
    for seg in off_ramps:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ramp_flows[seg] = 350.0 + 60.0 * np.sin(2.0 * np.pi * t_h / ramp_period_h + phase)

    balance = np.full(n, entry[0])
    for seg, series in ramp_flows.items():
        sign = 1.0 if seg in on_ramps else -1.0
        balance[seg - 1 :] += sign * series[0]
    rho0 = balance / speeds[0]
    return Scenario(
        cfg=cfg,
        n_steps=K,
        initial_density_veh_km=rho0,
        speeds_kmh=speeds,
        entry_flow_vph=entry,
        ramp_flows_vph=ramp_flows,
        name="a20_like",
    )


def make_congestion_scenario(name: str, seed: int = 0) -> Scenario:
    """Build one of the bundled synthetic presets.

    ``ngsim_like``: 8 short segments, heavy stop-and-go waves entering
    from downstream, one unmeasured on-ramp, a single exit flow sensor.
    ``a20_like``: 31 heterogeneous segments, 5 unmeasured ramps, an
    internal bottleneck forming and fully dissipating, 5 flow sensors.
    The seed only moves demand/wave phases; each seed gives one fixed table.
    """
    if name == "ngsim_like":
        return _ngsim_like(seed)
    if name == "a20_like":
        return _a20_like(seed)
    raise ValueError(f"unknown preset {name!r}, expected one of {PRESET_NAMES}")


def preset_filter_defaults(name: str) -> dict[str, float]:
    """Per-preset filter calibration used by the command line.

    ``initial_density`` sits at each preset's typical stretch density;
    ``initial_ramp_state`` starts the unmeasured-ramp states near zero so
    the early flow estimate does not dwarf the actual ramp demand.
    """
    if name == "ngsim_like":
        return {"measurement_var": 10.0, "initial_density": 300.0, "initial_ramp_state": 0.0}
    if name == "a20_like":
        return {"measurement_var": 100.0, "initial_density": 35.0, "initial_ramp_state": 1.0}
    raise ValueError(f"unknown preset {name!r}, expected one of {PRESET_NAMES}")


def save_scenario(sc: Scenario, path: str | Path) -> None:
    """Write a scenario to JSON so a run can be reproduced elsewhere."""
    payload = {
        "name": sc.name,
        "n_steps": sc.n_steps,
        "network": {
            "time_step_h": sc.cfg.time_step_h,
            "segments": [
                {"length_km": s.length_km, "ramp": s.ramp.value, "ramp_measured": s.ramp_measured}
                for s in sc.cfg.segments
            ],
            "flow_sensors": sorted(sc.cfg.flow_sensor_segments),
            "entry_flow_measured": sc.cfg.entry_flow_measured,
        },
        "initial_density_veh_km": sc.initial_density_veh_km.tolist(),
        "speeds_kmh": sc.speeds_kmh.tolist(),
        "entry_flow_vph": sc.entry_flow_vph.tolist(),
        "ramp_flows_vph": {str(seg): series.tolist() for seg, series in sorted(sc.ramp_flows_vph.items())},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_scenario(path: str | Path) -> Scenario:
    raw = json.loads(Path(path).read_text())
    net = raw["network"]
    cfg = NetworkConfig(
        segments=tuple(
            Segment(
                length_km=float(d["length_km"]),
                ramp=RampType(d.get("ramp", "none")),
                ramp_measured=bool(d.get("ramp_measured", False)),
            )
            for d in net["segments"]
        ),
        flow_sensor_segments=frozenset(int(j) for j in net.get("flow_sensors", [])),
        time_step_h=float(net["time_step_h"]),
        entry_flow_measured=bool(net.get("entry_flow_measured", True)),
    )
    return Scenario(
        cfg=cfg,
        n_steps=int(raw["n_steps"]),
        initial_density_veh_km=np.array(raw["initial_density_veh_km"], dtype=float),
        speeds_kmh=np.array(raw["speeds_kmh"], dtype=float),
        entry_flow_vph=np.array(raw["entry_flow_vph"], dtype=float),
        ramp_flows_vph={int(seg): np.array(v, dtype=float) for seg, v in raw.get("ramp_flows_vph", {}).items()},
        name=str(raw.get("name", "")),
    )
