"""Longitudinal (IDM) and lateral (MOBIL) background driver models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

from ccma.sim.types import ACCEL_LIMIT, DrivingStyle


@dataclass(frozen=True)
class IDMParams:
    s0: float = 10.0
    T: float = 1.5
    a: float = 3.0
    b: float = 5.0
    delta: float = 4.0


DEFAULT_IDM = IDMParams()


@lru_cache(maxsize=None)
def style_params(style: DrivingStyle, base: IDMParams = DEFAULT_IDM) -> IDMParams:
    return IDMParams(base.s0, base.T * style.headway_mult, base.a * style.accel_mult, base.b, base.delta)


def idm_accel(v: float, v0: float, gap: float = math.inf, dv: float = 0.0,
              params: IDMParams = DEFAULT_IDM) -> float:
    """Intelligent driver model acceleration, clamped to +-5 m/s^2.

    ``gap`` is the bumper-to-bumper distance to the leader (``math.inf`` when
    there is none) and ``dv`` the approach rate ``v - v_leader``. A
    non-positive gap with a leader present returns the emergency deceleration.
    """
    if gap <= 0.0:
        return -ACCEL_LIMIT
    free = (v / v0) ** params.delta if v0 > 0 else (math.inf if v > 0 else 0.0)
    acc = 1.0 - free
    if gap != math.inf:
        # dynamic term floored at zero so a fast-receding leader cannot make s* negative
        dyn = v * params.T + v * dv / (2.0 * math.sqrt(params.a * params.b))
        s_star = params.s0 + max(0.0, dyn)
        acc -= (s_star / gap) ** 2
    acc *= params.a
    if acc > ACCEL_LIMIT:
        return ACCEL_LIMIT
    if acc < -ACCEL_LIMIT:
        return -ACCEL_LIMIT
    return acc
