"""Oval track geometry, reference generation and lap counting.

The oval has two straights of length ``L_s`` along the x-axis and two
semicircles of radius ``R``, centred on the origin and driven
counter-clockwise.  Arc length ``s`` starts at the left end of the lower
straight.  Lateral error is positive to the left of the direction of travel,
which on this oval is towards the infield.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np


@dataclasses.dataclass(frozen=True)
class TrackSpec:
    R: float = 1.5
    L_s: float = 3.0
    v_ref: float = 2.0

    def __post_init__(self):
        if self.R <= 0 or self.L_s < 0 or self.v_ref < 0:
            raise ValueError("track needs R > 0, L_s >= 0 and v_ref >= 0")

    @property
    def length(self) -> float:
        return 2.0 * self.L_s + 2.0 * math.pi * self.R

    @property
    def breakpoints(self) -> tuple[float, float, float, float]:
        arc = math.pi * self.R
        return (0.0, self.L_s, self.L_s + arc, 2.0 * self.L_s + arc)

    def point(self, s):
        """Centerline ``(x, y, heading)`` at arc length ``s`` (any real, wrapped)."""
        s = np.mod(np.asarray(s, dtype=float), self.length)
        a, R = self.L_s / 2.0, self.R
        s1, s2, s3 = self.breakpoints[1:]
        x = np.empty_like(s)
        y = np.empty_like(s)
        heading = np.empty_like(s)

        bottom = s < s1
        x[bottom], y[bottom], heading[bottom] = -a + s[bottom], -R, 0.0

        right = (s >= s1) & (s < s2)
        theta = -math.pi / 2 + (s[right] - s1) / R
        x[right], y[right], heading[right] = a + R * np.cos(theta), R * np.sin(theta), theta + math.pi / 2

        top = (s >= s2) & (s < s3)
        x[top], y[top], heading[top] = a - (s[top] - s2), R, math.pi

        left = s >= s3
        theta = math.pi / 2 + (s[left] - s3) / R
        x[left], y[left], heading[left] = -a + R * np.cos(theta), R * np.sin(theta), theta + math.pi / 2
        return x, y, heading

    def project(self, p_x, p_y):
        """Nearest centerline point: returns ``(s, lateral_error)``.

        Candidates from the four pieces are compared in order of increasing
        ``s``, so exact ties resolve to the smaller arc length.
        """
        px = np.asarray(p_x, dtype=float)
        py = np.asarray(p_y, dtype=float)
        a, R = self.L_s / 2.0, self.R
        s1, s2, s3 = self.breakpoints[1:]
        candidates = []

        # lower straight, travelling +x
        t = np.clip(px + a, 0.0, self.L_s)
        candidates.append((t, -a + t, np.full_like(px, -R), 0.0 * px + 1.0, 0.0 * px))
        # right semicircle
        ang = np.clip(np.arctan2(py, px - a), -math.pi / 2, math.pi / 2)
        candidates.append((s1 + (ang + math.pi / 2) * R, a + R * np.cos(ang), R * np.sin(ang),
                           -np.sin(ang), np.cos(ang)))
        # upper straight, travelling -x
        t = np.clip(a - px, 0.0, self.L_s)
        candidates.append((s2 + t, a - t, np.full_like(px, R), 0.0 * px - 1.0, 0.0 * px))
        # left semicircle; angle measured in [pi/2, 3pi/2]
        ang = np.mod(np.arctan2(py, px + a), 2 * math.pi)
        ang = np.clip(ang, math.pi / 2, 3 * math.pi / 2)
        candidates.append((s3 + (ang - math.pi / 2) * R, -a + R * np.cos(ang), R * np.sin(ang),
                           -np.sin(ang), np.cos(ang)))

        best_d = np.full(px.shape, np.inf)
        best_s = np.zeros(px.shape)
        best_lat = np.zeros(px.shape)
        for s, cx, cy, tx, ty in candidates:
            dx, dy = px - cx, py - cy
            d2 = dx * dx + dy * dy
            better = d2 < best_d
            best_d = np.where(better, d2, best_d)
            best_s = np.where(better, s, best_s)
            best_lat = np.where(better, tx * dy - ty * dx, best_lat)
        best_s = np.mod(best_s, self.length)
        if best_s.ndim == 0:
            return float(best_s), float(best_lat)
        return best_s, best_lat

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lateral_error(state, track: TrackSpec):
    state = np.asarray(state)
    return track.project(state[..., 0], state[..., 1])[1]


def make_oval_reference(track: TrackSpec, K_h: int, state, dt: float) -> np.ndarray:
    """``K_h`` reference rows ``(p_x, p_y, v)`` spaced ``v_ref * dt`` ahead of the projection."""
    s0, _ = track.project(state[0], state[1])
    s = s0 + track.v_ref * dt * np.arange(1, K_h + 1)
    x, y, _ = track.point(s)
    return np.column_stack([x, y, np.full(K_h, track.v_ref)])


class LapCounter:
    """Unwrapped arc-length progress; a lap counts each forward crossing of ``s = 0``."""

    def __init__(self, track: TrackSpec, s0: float):
        self.track = track
        self.s_last = float(s0)
        self.start = float(s0)
        self.progress = 0.0

    def update(self, s: float) -> None:
        L = self.track.length
        delta = (s - self.s_last + L / 2.0) % L - L / 2.0
        self.progress += delta
        self.s_last = float(s)

    @property
    def laps(self) -> int:
        return max(0, int(math.floor((self.start + self.progress) / self.track.length)))
