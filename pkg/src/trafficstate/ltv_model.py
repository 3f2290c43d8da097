"""Time-varying linear model of segment densities driven by probe speeds.

The state vector stacks the N segment densities (veh/km) with one extra
random-walk state per unmeasured ramp. The extra state for a ramp on
segment i is the per-step density contribution (T/delta_i) * flow, so the
ramp flow in veh/h is recovered by multiplying with delta_i/T.

All builders take the per-step segment speeds explicitly; the matrices A
change every step while B and C are constant for a fixed network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from trafficstate.network import NetworkConfig, RampType

__all__ = [
    "StateIndex",
    "LtvSnapshot",
    "build_state_index",
    "build_A",
    "build_B",
    "build_u",
    "build_C",
    "build_snapshot",
    "select_sensor_segments",
    "step_dynamics",
    "density_to_flow",
    "ramp_states_to_flows",
    "ramp_flow_to_state",
]


@dataclass(frozen=True)
class StateIndex:
    """Layout of the augmented state and input vectors for one network.

    Densities occupy positions 0..N-1 (segment i at position i-1). The
    ramp states follow in ascending segment order. Inputs are the entry
    flow first, then one entry per measured ramp, ascending.
    """

    n_segments: int
    theta_segments: tuple[int, ...]
    theta_kinds: tuple[RampType, ...]
    measured_ramp_segments: tuple[int, ...]
    measured_ramp_kinds: tuple[RampType, ...]

    @property
    def n_theta(self) -> int:
        return len(self.theta_segments)

    @property
    def dim(self) -> int:
        return self.n_segments + self.n_theta

    @property
    def n_inputs(self) -> int:
        return 1 + len(self.measured_ramp_segments)

    def theta_position(self, segment: int) -> int:
        """0-based state position of the ramp state attached to ``segment``."""
        return self.n_segments + self.theta_segments.index(segment)


@dataclass(frozen=True)
class LtvSnapshot:
    """The four system matrices of one time step: x+ = A x + B u, z = C x."""

    A: np.ndarray
    B: np.ndarray
    u: np.ndarray
    C: np.ndarray


def build_state_index(cfg: NetworkConfig) -> StateIndex:
    theta_segs: list[int] = []
    theta_kinds: list[RampType] = []
    meas_segs: list[int] = []
    meas_kinds: list[RampType] = []
    for i, seg in enumerate(cfg.segments, start=1):
        if seg.ramp is RampType.NONE:
            continue
        if seg.ramp_measured:
            meas_segs.append(i)
            meas_kinds.append(seg.ramp)
        else:
            theta_segs.append(i)
            theta_kinds.append(seg.ramp)
    return StateIndex(
        n_segments=cfg.n_segments,
        theta_segments=tuple(theta_segs),
        theta_kinds=tuple(theta_kinds),
        measured_ramp_segments=tuple(meas_segs),
        measured_ramp_kinds=tuple(meas_kinds),
    )


def _ratios(lengths_km: Sequence[float], time_step_h: float) -> np.ndarray:
    lengths = np.asarray(lengths_km, dtype=float)
    return time_step_h / lengths


def build_A(
    idx: StateIndex,
    lengths_km: Sequence[float],
    time_step_h: float,
    speeds_kmh: Sequence[float],
) -> np.ndarray:
    """Transition matrix for one step given that step's segment speeds."""
    n = idx.n_segments
    v = np.asarray(speeds_kmh, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"expected {n} segment speeds, got shape {v.shape}")
    c = _ratios(lengths_km, time_step_h)
    if c.shape != (n,):
        raise ValueError(f"expected {n} segment lengths, got {c.shape[0]}")

    A = np.zeros((idx.dim, idx.dim))
    A[np.arange(n), np.arange(n)] = 1.0 - c * v
    if n > 1:
        A[np.arange(1, n), np.arange(n - 1)] = c[1:] * v[:-1]
    for j, (seg, kind) in enumerate(zip(idx.theta_segments, idx.theta_kinds)):
        col = n + j
        A[seg - 1, col] = 1.0 if kind is RampType.ON else -1.0
        A[col, col] = 1.0
    return A


def build_B(idx: StateIndex, lengths_km: Sequence[float], time_step_h: float) -> np.ndarray:
    """Input matrix: entry flow into segment 1, measured ramps into theirs.

    One column per actual input (entry plus each measured ramp); segments
    without a measured ramp contribute no column.
    """
    c = _ratios(lengths_km, time_step_h)
    B = np.zeros((idx.dim, idx.n_inputs))
    B[0, 0] = c[0]
    for jcol, seg in enumerate(idx.measured_ramp_segments, start=1):
        B[seg - 1, jcol] = c[seg - 1]
    return B


def build_u(
    idx: StateIndex,
    entry_flow_vph: float,
    measured_ramp_flows_vph: Mapping[int, float] | None = None,
) -> np.ndarray:
    """Input vector from the entry flow and measured ramp flow magnitudes.

    Ramp flows are keyed by 1-based segment and given as non-negative
    magnitudes; the sign is applied here from the ramp kind (off-ramps
    enter negatively). Segments absent from the mapping default to zero.
    """
    flows = dict(measured_ramp_flows_vph or {})
    u = np.zeros(idx.n_inputs)
    u[0] = float(entry_flow_vph)
    for jcol, (seg, kind) in enumerate(
        zip(idx.measured_ramp_segments, idx.measured_ramp_kinds), start=1
    ):
        mag = float(flows.pop(seg, 0.0))
        if mag < 0.0:
            raise ValueError(f"ramp flow magnitude at segment {seg} must be non-negative, got {mag}")
        u[jcol] = mag if kind is RampType.ON else -mag
    if flows:
        raise ValueError(f"flows given for segments without a measured ramp: {sorted(flows)}")
    return u


def build_C(idx: StateIndex, sensor_segments: Sequence[int]) -> np.ndarray:
    """Output matrix selecting the density of each sensor-carrying segment.

    A flow sensor at segment j combined with that segment's speed yields a
    direct density reading, so each row is a unit selector.
    """
    segs = sorted(set(int(j) for j in sensor_segments))
    if not segs:
        raise ValueError("at least one sensor segment is required")
    bad = [j for j in segs if j < 1 or j > idx.n_segments]
    if bad:
        raise ValueError(f"sensor segments outside 1..{idx.n_segments}: {bad}")
    C = np.zeros((len(segs), idx.dim))
    for row, seg in enumerate(segs):
        C[row, seg - 1] = 1.0
    return C


def select_sensor_segments(cfg: NetworkConfig) -> tuple[int, ...]:
    """Default measurement set: exit sensor plus one per unmeasured-ramp gap.

    For each pair of consecutive unmeasured ramps at segments a < b, the
    downstream-most available sensor in a..b-1 is taken. Selection is best
    effort: gaps without any sensor are skipped here and left to
    validate_network to report, so a deficient placement can still be
    built and shown to be unobservable.
    """
    chosen: set[int] = set()
    if cfg.n_segments in cfg.flow_sensor_segments:
        chosen.add(cfg.n_segments)
    unmeasured = cfg.ramp_segments(measured=False)
    for a, b in zip(unmeasured, unmeasured[1:]):
        candidates = [j for j in cfg.flow_sensor_segments if a <= j <= b - 1]
        if candidates:
            chosen.add(max(candidates))
    return tuple(sorted(chosen))


def build_snapshot(
    idx: StateIndex,
    lengths_km: Sequence[float],
    time_step_h: float,
    speeds_kmh: Sequence[float],
    entry_flow_vph: float,
    sensor_segments: Sequence[int],
    measured_ramp_flows_vph: Mapping[int, float] | None = None,
) -> LtvSnapshot:
    return LtvSnapshot(
        A=build_A(idx, lengths_km, time_step_h, speeds_kmh),
        B=build_B(idx, lengths_km, time_step_h),
        u=build_u(idx, entry_flow_vph, measured_ramp_flows_vph),
        C=build_C(idx, sensor_segments),
    )


def step_dynamics(x: np.ndarray, snap: LtvSnapshot) -> np.ndarray:
    """Propagate the state one step with the snapshot's A, B and u."""
    return snap.A @ x + snap.B @ snap.u


def density_to_flow(density_veh_km, speed_kmh) -> np.ndarray:
    """Segment flow q = rho * v, elementwise."""
    return np.asarray(density_veh_km, dtype=float) * np.asarray(speed_kmh, dtype=float)


def ramp_states_to_flows(
    idx: StateIndex, x: np.ndarray, lengths_km: Sequence[float], time_step_h: float
) -> dict[int, float]:
    """Recover ramp flow magnitudes (veh/h) from the augmented states.

    Returns {segment: flow}; off-ramp flows come out as positive
    magnitudes the same way on-ramp flows do, because the sign lives in
    the dynamics, not the state.
    """
    lengths = np.asarray(lengths_km, dtype=float)
    out: dict[int, float] = {}
    for j, seg in enumerate(idx.theta_segments):
        theta = float(x[idx.n_segments + j])
        out[seg] = theta * lengths[seg - 1] / time_step_h
    return out


def ramp_flow_to_state(flow_vph: float, length_km: float, time_step_h: float) -> float:
    """Per-step density contribution of a ramp flow: (T/delta) * flow."""
    return time_step_h / length_km * float(flow_vph)
