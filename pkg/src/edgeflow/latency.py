"""Perception latency versus maximum safe speed for a reactive dodge.

A dodge succeeds when the lateral distance covered after the system latency
reaches the bloated obstacle radius before impact::

    0.5 * A_max * (Z / V - N * tau_p - tau_A) ** 2 >= R_b

where ``N`` observations are needed to push the miss probability below the
required level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

G = 9.81
REFERENCE_LENGTH = 0.21  # m, diagonal of the reference quadrotor


@dataclass(frozen=True)
class VehicleParams:
    z: float = 3.5  # sensing depth, m
    a_max: float = 2 * G  # max lateral acceleration, m/s^2
    obstacle_radius: float = 0.25
    robot_radius: float = 0.15
    margin: float = 0.10
    inertia: float = 0.003  # kg m^2
    m_max: float = 0.4  # N m
    g: float = G
    length: float = REFERENCE_LENGTH  # m
    tau_p: float = 1 / 30  # s
    dr: float = 0.9
    dr_s: float = 0.99
    tau_a: float | None = None  # overrides the attitude-dynamics estimate when set

    def __post_init__(self):
        for name in ("z", "a_max", "obstacle_radius", "robot_radius", "inertia", "m_max", "g", "length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.margin < 0 or self.tau_p < 0:
            raise ValueError("margin and tau_p must be non-negative")
        if self.tau_a is not None and self.tau_a < 0:
            raise ValueError("tau_a must be non-negative")
        _check_rate("dr", self.dr)
        _check_rate("dr_s", self.dr_s)

    @property
    def bloated_radius(self) -> float:
        return self.obstacle_radius + self.robot_radius + self.margin

    def actuation(self) -> float:
        if self.tau_a is not None:
            return self.tau_a
        ref = actuation_latency(self.inertia, self.a_max, self.m_max, self.g)
        return mach_scale_latency(ref, REFERENCE_LENGTH, self.length)


def _check_rate(name: str, value: float) -> None:
    if not 0 < value < 1:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {value}")


def required_observations(dr: float, dr_s: float) -> int:
    """Smallest N with ``(1 - dr)**N <= 1 - dr_s``."""
    _check_rate("dr", dr)
    _check_rate("dr_s", dr_s)
    ratio = math.log(1 - dr_s) / math.log(1 - dr)
    n = max(1, math.ceil(ratio - 1e-12))
    # guard the ceil against log round-off on exact powers
    while (1 - dr) ** n > (1 - dr_s) * (1 + 1e-12):
        n += 1
    while n > 1 and (1 - dr) ** (n - 1) <= (1 - dr_s) * (1 + 1e-12):
        n -= 1
    return n


def actuation_latency(inertia: float, a_max: float, m_max: float, g: float = G) -> float:
    """Bang-bang attitude slew time to the tilt that yields ``a_max`` laterally."""
    for name, v in (("inertia", inertia), ("m_max", m_max), ("g", g)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    if a_max < 0:
        raise ValueError("a_max must be non-negative")
    return 2.0 * math.sqrt(inertia * math.atan(a_max / g) / m_max)


def mach_scale_latency(tau_a_ref: float, length_ref: float, length: float) -> float:
    if not (tau_a_ref >= 0 and length_ref > 0 and length > 0):
        raise ValueError("latency must be non-negative and lengths positive")
    return tau_a_ref * (length / length_ref)


def dodge_clearance(v: float, z: float, a_max: float, n: int, tau_p: float, tau_a: float) -> float:
    """Lateral distance achievable before impact at speed ``v`` (zero if no time is left)."""
    t = z / v - n * tau_p - tau_a
    return 0.5 * a_max * t * t if t > 0 else 0.0


@dataclass(frozen=True)
class SpeedResult:
    speed: float
    observations: int
    tau_a: float
    latency: float
    feasible: bool


def max_safe_speed(p: VehicleParams) -> SpeedResult:
    n = required_observations(p.dr, p.dr_s)
    tau_a = p.actuation()
    latency = n * p.tau_p + tau_a
    v = p.z / (math.sqrt(2 * p.bloated_radius / p.a_max) + latency)
    # time to impact must exceed the latency budget for any manoeuvre at all
    feasible = p.z / v > latency
    return SpeedResult(v, n, tau_a, latency, feasible)


def grid_scan_speed(p: VehicleParams, v_max: float | None = None, step: float = 1e-4) -> float:
    """Largest speed on a uniform grid that satisfies the dodge inequality (oracle)."""
    n = required_observations(p.dr, p.dr_s)
    tau_a = p.actuation()
    if v_max is None:
        v_max = p.z / (n * p.tau_p + tau_a) if n * p.tau_p + tau_a > 0 else p.z / math.sqrt(2 * p.bloated_radius / p.a_max) * 2
    v = np.arange(step, v_max + step, step)
    t = p.z / v - n * p.tau_p - tau_a
    ok = (t > 0) & (0.5 * p.a_max * t * t >= p.bloated_radius)
    return float(v[ok].max()) if ok.any() else 0.0


def calibrate_actuation(target_speed: float, p: VehicleParams) -> float:
    """Actuation latency that makes ``max_safe_speed(p)`` equal ``target_speed``."""
    n = required_observations(p.dr, p.dr_s)
    tau_a = p.z / target_speed - math.sqrt(2 * p.bloated_radius / p.a_max) - n * p.tau_p
    if tau_a < 0:
        raise ValueError(f"{target_speed} m/s is unreachable even with zero actuation latency")
    return tau_a


def speed_curves(tau_ps: Iterable[float], drs: Iterable[float], lengths: Iterable[float] = (),
                 depths: Iterable[float] = (), base: VehicleParams = VehicleParams()) -> list[dict]:
    """Max speed over ``tau_p x DR x length`` and ``tau_p x DR x depth`` grids.

    Rows carry a ``family`` key: ``"length"`` or ``"depth"``.
    """
    rows = []
    tau_ps, drs = list(tau_ps), list(drs)
    for family, values, field_name in (("length", list(lengths), "length"), ("depth", list(depths), "z")):
        for val in values:
            for dr in drs:
                for tp in tau_ps:
                    p = replace(base, tau_p=tp, dr=dr, **{field_name: val})
                    r = max_safe_speed(p)
                    rows.append({
                        "family": family, family: val, "dr": dr, "tau_p": tp,
                        "n": r.observations, "tau_a": r.tau_a, "speed": r.speed, "feasible": r.feasible,
                    })
    return rows


# reference networks for the speed comparison (host-independent published rates)
SLOW_NET_FPS = 10.8
FAST_NET_FPS = 93.6
ANCHOR_SPEED = 9.0  # m/s for the slow, high-DR network


@dataclass(frozen=True)
class SpeedComparison:
    slow: SpeedResult
    fast: SpeedResult
    params: VehicleParams

    @property
    def improvement(self) -> float:
        return self.fast.speed / self.slow.speed - 1.0


def calibrated_comparison(base: VehicleParams | None = None, anchor: float = ANCHOR_SPEED,
                          slow=(1 / SLOW_NET_FPS, 0.9), fast=(1 / FAST_NET_FPS, 0.7)) -> SpeedComparison:
    """Fix the actuation latency so the slow network reaches ``anchor`` m/s, then compare.

    ``slow`` and ``fast`` are ``(tau_p, DR)`` pairs.
    """
    base = base or COMPARISON_PARAMS
    slow_p = replace(base, tau_p=slow[0], dr=slow[1], tau_a=None)
    tau_a = calibrate_actuation(anchor, slow_p)
    slow_p = replace(slow_p, tau_a=tau_a)
    fast_p = replace(base, tau_p=fast[0], dr=fast[1], tau_a=tau_a)
    return SpeedComparison(max_safe_speed(slow_p), max_safe_speed(fast_p), slow_p)


# smaller obstacle (0.1 + 0.1 + 0.1 m) and a 91% confidence target; see README
COMPARISON_PARAMS = VehicleParams(obstacle_radius=0.1, robot_radius=0.1, margin=0.1, dr_s=0.91)
