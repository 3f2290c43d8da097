"""Kalman filtering of the time-varying density model.

The filter is run in one-step-ahead predictor form: the state estimate
published for step k+1 uses measurements up to and including step k. The
gain solve goes through a Cholesky factorization of the innovation
covariance rather than an explicit inverse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from trafficstate.ltv_model import LtvSnapshot, StateIndex, build_A, build_B, build_C, build_u
from trafficstate.network import CflReport, NetworkConfig, check_cfl
from trafficstate.sensing import MeasurementFrame

logger = logging.getLogger(__name__)

__all__ = [
    "FilterTuning",
    "FilterState",
    "FilterResult",
    "SingularInnovationError",
    "CflViolationError",
    "default_tuning",
    "kf_step",
    "run_filter",
    "observability_gramian",
]

COND_LIMIT = 1e12


class SingularInnovationError(RuntimeError):
    """Innovation covariance too ill-conditioned to invert reliably."""

    def __init__(self, step: int, cond: float):
        super().__init__(
            f"innovation covariance at step {step} has condition number {cond:.3e}"
            f" (limit {COND_LIMIT:.0e})"
        )
        self.step = step
        self.cond = cond


class CflViolationError(RuntimeError):
    """Raised in strict mode when the discretization accuracy bound fails."""


def _check_symmetric_psd(name: str, M: np.ndarray, dim: int) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    eigmin = float(np.linalg.eigvalsh(M).min())
    if eigmin < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite (min eigenvalue {eigmin:.3e})")
    return M


@dataclass(frozen=True)
class FilterTuning:
    """Process/measurement covariances and the initial state belief.

    Q is sized to the augmented state, R to the measurement vector. R must
    be positive definite; Q and the initial covariance only need to be
    positive semidefinite.
    """

    process_cov: np.ndarray
    measurement_cov: np.ndarray
    initial_mean: np.ndarray
    initial_cov: np.ndarray

    def __post_init__(self) -> None:
        dim = np.asarray(self.initial_mean, dtype=float).shape[0]
        object.__setattr__(self, "initial_mean", np.asarray(self.initial_mean, dtype=float))
        object.__setattr__(self, "process_cov", _check_symmetric_psd("process_cov", self.process_cov, dim))
        object.__setattr__(self, "initial_cov", _check_symmetric_psd("initial_cov", self.initial_cov, dim))
        R = np.asarray(self.measurement_cov, dtype=float)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ValueError(f"measurement_cov must be square, got {R.shape}")
        if not np.allclose(R, R.T, atol=1e-10):
            raise ValueError("measurement_cov must be symmetric")
        try:
            cho_factor(R, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("measurement_cov must be positive definite") from exc
        object.__setattr__(self, "measurement_cov", R)

    @property
    def dim(self) -> int:
        return self.initial_mean.shape[0]

    @property
    def n_measurements(self) -> int:
        return self.measurement_cov.shape[0]


def default_tuning(
    idx: StateIndex,
    n_sensors: int,
    *,
    density_process_var: float = 1.0,
    ramp_process_var: float = 0.01,
    measurement_var: float = 10.0,
    initial_density: float = 40.0,
    initial_ramp_state: float | None = None,
    initial_var: float = 1.0,
) -> FilterTuning:
    """Diagonal tuning with one variance per state family.

    Defaults reproduce the reference calibration: unit process variance on
    densities, 0.01 on ramp states, identity-scaled initial covariance.
    """
    if initial_ramp_state is None:
        initial_ramp_state = initial_density
    q = np.concatenate(
        [np.full(idx.n_segments, density_process_var), np.full(idx.n_theta, ramp_process_var)]
    )
    mean = np.concatenate(
        [np.full(idx.n_segments, initial_density), np.full(idx.n_theta, initial_ramp_state)]
    )
    return FilterTuning(
        process_cov=np.diag(q),
        measurement_cov=measurement_var * np.eye(n_sensors),
        initial_mean=mean,
        initial_cov=initial_var * np.eye(idx.dim),
    )


@dataclass(frozen=True)
class FilterState:
    """Predicted state for step k given measurements through step k-1."""

    x_hat: np.ndarray
    cov: np.ndarray
    k: int


def kf_step(state: FilterState, snap: LtvSnapshot, z: np.ndarray, tuning: FilterTuning) -> FilterState:
    """One predictor update: absorb measurement z(k), return the k+1 state."""
    A, B, u, C = snap.A, snap.B, snap.u, snap.C
    P = state.cov
    S = C @ P @ C.T + tuning.measurement_cov
    S = 0.5 * (S + S.T)
    cond = float(np.linalg.cond(S))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularInnovationError(state.k, cond)
    factor = cho_factor(S, lower=True)
    gain = cho_solve(factor, C @ P).T
    innovation = z - C @ state.x_hat
    x_next = A @ state.x_hat + B @ u + A @ gain @ innovation
    joseph = P - gain @ C @ P
    P_next = A @ joseph @ A.T + tuning.process_cov
    P_next = 0.5 * (P_next + P_next.T)
    return FilterState(x_hat=x_next, cov=P_next, k=state.k + 1)


@dataclass(frozen=True)
class FilterResult:
    """Full estimator trajectory over K steps.

    ``states`` has K+1 rows: row k is the prediction for step k, row 0 the
    initial mean. ``speeds_used`` and ``measurements_used`` record what the
    filter actually consumed after gap filling and the speed floor guard.
    """

    states: np.ndarray
    sensor_segments: tuple[int, ...]
    speeds_used: np.ndarray
    measurements_used: np.ndarray
    innovations: np.ndarray
    cfl: CflReport
    final: FilterState
    index: StateIndex
    held_measurement_steps: int = 0

    @property
    def densities(self) -> np.ndarray:
        return self.states[:, : self.index.n_segments]

    def ramp_flows(self, lengths_km: Sequence[float], time_step_h: float) -> np.ndarray:
        """(K+1, n_theta) recovered ramp flow magnitudes in veh/h."""
        lengths = np.asarray(lengths_km, dtype=float)
        theta = self.states[:, self.index.n_segments :]
        scale = lengths[[s - 1 for s in self.index.theta_segments]] / time_step_h
        return theta * scale[np.newaxis, :]


def run_filter(
    cfg: NetworkConfig,
    idx: StateIndex,
    tuning: FilterTuning,
    frames: Sequence[MeasurementFrame],
    *,
    sensor_segments: Sequence[int] | None = None,
    v_floor_kmh: float = 2.0,
    default_speed_kmh: float = 100.0,
    strict_cfl: bool = False,
    clamp_nonnegative: bool = False,
) -> FilterResult:
    """Run the predictor over a measurement sequence.

    Gap handling: a missing segment speed holds the last seen value for
    that segment (free-flow ``default_speed_kmh`` before anything is seen);
    a missing sensor flow, or a sensor speed at or below ``v_floor_kmh``,
    holds the previous density reading for that sensor, seeded from the
    initial mean. Discretization violations warn unless ``strict_cfl``.
    ``clamp_nonnegative`` floors published density estimates at zero
    (the raw filter state keeps evolving unclamped).

    ``sensor_segments`` defaults to every declared flow sensor; pass an
    explicit subset to study reduced placements.
    """
    n = idx.n_segments
    if sensor_segments is None:
        sensor_segments = tuple(sorted(cfg.flow_sensor_segments))
    sensor_segments = tuple(sorted(set(int(j) for j in sensor_segments)))
    lengths = cfg.lengths_km
    T = cfg.time_step_h
    B = build_B(idx, lengths, T)
    C = build_C(idx, sensor_segments)
    if tuning.dim != idx.dim:
        raise ValueError(f"tuning is sized for dim {tuning.dim}, model has {idx.dim}")
    if tuning.n_measurements != len(sensor_segments):
        raise ValueError(
            f"measurement_cov is {tuning.n_measurements}x{tuning.n_measurements},"
            f" but {len(sensor_segments)} sensors are in use"
        )

    K = len(frames)
    states = np.zeros((K + 1, idx.dim))
    speeds_used = np.zeros((K, n))
    z_used = np.zeros((K, len(sensor_segments)))
    innovations = np.zeros((K, len(sensor_segments)))

    state = FilterState(x_hat=tuning.initial_mean.copy(), cov=tuning.initial_cov.copy(), k=0)
    states[0] = state.x_hat
    last_speed = np.full(n, np.nan)
    held_z = C @ tuning.initial_mean
    last_entry = 0.0
    held_steps = 0

    for k, frame in enumerate(frames):
        v = np.asarray(frame.speeds_kmh, dtype=float)
        if v.shape != (n,):
            raise ValueError(f"frame {k}: expected {n} speeds, got shape {v.shape}")
        missing = ~np.isfinite(v)
        filled = np.where(missing, last_speed, v)
        still = ~np.isfinite(filled)
        filled[still] = default_speed_kmh
        last_speed = filled
        speeds_used[k] = filled

        entry = frame.entry_flow_vph
        if entry is None or not np.isfinite(entry):
            logger.warning("step %d: entry flow missing, holding %.1f veh/h", k, last_entry)
            entry = last_entry
        last_entry = float(entry)

        z = held_z.copy()
        held_any = False
        for row, seg in enumerate(sensor_segments):
            q = frame.sensor_flows_vph.get(seg)
            v_seg = filled[seg - 1]
            if q is None or not np.isfinite(q) or v_seg <= v_floor_kmh:
                held_any = True
                continue
            z[row] = q / v_seg
        if held_any:
            held_steps += 1
        held_z = z
        z_used[k] = z

        A = build_A(idx, lengths, T, filled)
        u = build_u(idx, entry, frame.measured_ramp_flows_vph)
        snap = LtvSnapshot(A=A, B=B, u=u, C=C)
        innovations[k] = z - C @ state.x_hat
        state = kf_step(state, snap, z, tuning)
        states[k + 1] = state.x_hat

    cfl = check_cfl(cfg, speeds_used) if K else CflReport(0.0, ())
    if not cfl.ok:
        msg = (
            f"discretization accuracy bound exceeded at {len(cfl.violations)} (step, segment)"
            f" pairs, max ratio {cfl.max_ratio:.3f}"
        )
        if strict_cfl:
            raise CflViolationError(msg)
        logger.warning(msg)

    published = states
    if clamp_nonnegative:
        published = states.copy()
        published[:, :n] = np.maximum(published[:, :n], 0.0)

    return FilterResult(
        states=published,
        sensor_segments=sensor_segments,
        speeds_used=speeds_used,
        measurements_used=z_used,
        innovations=innovations,
        cfl=cfl,
        final=state,
        index=idx,
        held_measurement_steps=held_steps,
    )


def observability_gramian(
    A_seq: Sequence[np.ndarray], C: np.ndarray, *, rank_rtol: float = 1e-10
) -> tuple[np.ndarray, int]:
    """Finite-horizon observability Gramian and its numerical rank.

    With transition matrices A(0)..A(M-2) the Gramian sums
    Phi(j)^T C^T C Phi(j) over j = 0..M-1, Phi(0) = I and
    Phi(j) = A(j-1) ... A(0). Rank counts singular values above
    ``rank_rtol`` times the largest.
    """
    A_seq = list(A_seq)
    dim = C.shape[1]
    G = np.zeros((dim, dim))
    phi = np.eye(dim)
    CtC = C.T @ C
    G += phi.T @ CtC @ phi
    for A in A_seq:
        phi = A @ phi
        G += phi.T @ CtC @ phi
    G = 0.5 * (G + G.T)
    s = np.linalg.svd(G, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return G, 0
    rank = int(np.sum(s > rank_rtol * s[0]))
    return G, rank
