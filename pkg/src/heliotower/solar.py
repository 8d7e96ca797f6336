"""Tower plant performance surrogate.

Per-heliostat annual energy is the product chain cosine x shadow/block x
atmospheric attenuation x interception x reflectivity integrated over hourly
samples of twelve monthly design days (the 21st), weighted by days and
clear-day ratio; plant output additionally passes the summed incident power
through a receiver/cycle efficiency before integration.

The scalar objective is plant cost divided by annual electric energy.
:class:`ObjectiveEvaluator` stages the computation (layout | sun-dependent
optical factors | interception | integration) behind per-stage caches so a
line search that only moves aperture variables never recomputes the
expensive shadow/block factors.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erf

from .layout import (
    CavityReceiver,
    CylindricalReceiver,
    DesignVector,
    FieldLayout,
    LayoutConfig,
    Receiver,
    generate_field,
    select_top,
)

TWO_PI = 2.0 * math.pi

#: day of year of the 21st of each month (non-leap year)
DAY_OF_YEAR_21 = (21, 52, 80, 111, 141, 172, 202, 233, 264, 294, 325, 355)

#: shadow/block neighbours: lowest sun elevation considered when sizing the
#: neighbourhood, and the cap on neighbours per heliostat
MIN_SHADOW_ELEVATION = math.radians(15.0)
NEIGHBOR_CAP = 8

_ATT_A = 0.99321
_ATT_B = 1.176e-4
_ATT_C = 1.97e-8
_ATT_EXP = 1.106e-4


@dataclass(frozen=True)
class CostModel:
    """Plant cost as an explicit four-coefficient function."""

    c_fixed: float
    c_heliostat: float  # per m^2 of mirror
    c_tower: float  # scales with tower height^1.5
    c_receiver: float  # per m^2 of receiver surface

    def __post_init__(self) -> None:
        for name in ("c_fixed", "c_heliostat", "c_tower", "c_receiver"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and non-negative")

    def total(self, n_hel: int, mirror_area: float, receiver: Receiver) -> float:
        return (
            self.c_fixed
            + self.c_heliostat * n_hel * mirror_area
            + self.c_tower * receiver.h_t**1.5
            + self.c_receiver * receiver.area
        )


@dataclass(frozen=True)
class PlantParams:
    """Fixed plant parameters (not optimized)."""

    sigma_h: float  # heliostat optical error [mrad]
    l_h: float  # heliostat width [m]
    l_v: float  # heliostat height [m]
    reflectivity: float
    phi: float  # latitude [rad]
    m_n: float  # terrain slope, rise per metre north
    m_w: float  # terrain slope, rise per metre east
    eta_cycle: float  # power-block peak efficiency
    loss_coeff: float  # receiver loss per unit receiver area [kW/m^2]
    cost: CostModel
    sigma_sun: float = 4.65  # sunshape width [mrad]

    def __post_init__(self) -> None:
        for name in ("sigma_h", "l_h", "l_v", "sigma_sun", "loss_coeff"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("reflectivity", "eta_cycle"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not abs(self.phi) <= math.pi / 2.0:
            raise ValueError("latitude phi must lie in [-pi/2, pi/2]")
        for name in ("m_n", "m_w"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def mirror_area(self) -> float:
        return self.l_h * self.l_v


@dataclass(frozen=True)
class MonthInsolation:
    """Hourly design-day data for one month (the 21st)."""

    month: int  # 1..12
    hours: tuple[float, ...]  # solar hours
    dni: tuple[float, ...]  # W/m^2
    tamb: tuple[float, ...]  # degrees C
    clear_ratio: float
    days: int

    def __post_init__(self) -> None:
        if not 1 <= self.month <= 12:
            raise ValueError("month must lie in 1..12")
        if not (len(self.hours) == len(self.dni) == len(self.tamb)):
            raise ValueError("hours, dni and tamb must have equal length")
        if len(self.hours) < 2:
            raise ValueError("need at least two hourly samples per month")
        if any(h2 <= h1 for h1, h2 in zip(self.hours, self.hours[1:])):
            raise ValueError("hours must be strictly increasing")
        if any(v < 0.0 for v in self.dni):
            raise ValueError("DNI must be non-negative")
        if not 0.0 <= self.clear_ratio <= 1.0:
            raise ValueError("clear_ratio must lie in [0, 1]")
        if self.days < 1:
            raise ValueError("days must be at least 1")

    @property
    def day_of_year(self) -> int:
        return DAY_OF_YEAR_21[self.month - 1]


@dataclass(frozen=True)
class InsolationTable:
    """Twelve design-day records, one per month, in calendar order."""

    months: tuple[MonthInsolation, ...]

    def __post_init__(self) -> None:
        if len(self.months) != 12:
            raise ValueError("an insolation table needs exactly 12 months")
        if tuple(m.month for m in self.months) != tuple(range(1, 13)):
            raise ValueError("months must be 1..12 in order")


def declination(day_of_year: int) -> float:
    """Solar declination [rad] (Cooper's formula)."""
    return math.radians(23.45) * math.sin(TWO_PI * (284 + day_of_year) / 365.0)


def sun_position(phi: float, day_of_year: int, solar_hour: float) -> tuple[float, float]:
    """Sun (azimuth, elevation) in radians; azimuth 0 at north, clockwise.

    Standard declination / hour-angle geometry; elevation is negative at
    night.
    """
    vec = sun_vector(phi, day_of_year, solar_hour)
    elevation = math.asin(max(-1.0, min(1.0, vec[2])))
    azimuth = math.atan2(vec[0], vec[1]) % TWO_PI
    return azimuth, elevation


def sun_vector(phi: float, day_of_year: int, solar_hour: float) -> np.ndarray:
    """Unit vector pointing from the ground toward the sun (x east, y north)."""
    dec = declination(day_of_year)
    omega = math.radians(15.0 * (solar_hour - 12.0))
    east = -math.cos(dec) * math.sin(omega)
    north = math.cos(phi) * math.sin(dec) - math.sin(phi) * math.cos(dec) * math.cos(omega)
    up = math.sin(phi) * math.sin(dec) + math.cos(phi) * math.cos(dec) * math.cos(omega)
    vec = np.array([east, north, up])
    return vec / np.linalg.norm(vec)


def cosine_efficiency(sun_vec, heliostat_pos, target_pos) -> float:
    """Cosine of half the angle between the sun ray and the mirror-target ray."""
    t = np.asarray(target_pos, dtype=float) - np.asarray(heliostat_pos, dtype=float)
    t = t / np.linalg.norm(t)
    s = np.asarray(sun_vec, dtype=float)
    s = s / np.linalg.norm(s)
    return math.sqrt(max(0.0, 0.5 * (1.0 + float(np.dot(s, t)))))


def attenuation(slant_range):
    """Clear-day atmospheric transmission over ``slant_range`` metres.

    Quadratic up to 1 km, exponential extrapolation beyond; clamped to
    [0, 1] and non-increasing.
    """
    s = np.asarray(slant_range, dtype=float)
    if np.any(s < 0.0):
        raise ValueError("slant_range must be non-negative")
    near = _ATT_A - _ATT_B * s + _ATT_C * s * s
    far = np.exp(-_ATT_EXP * s)
    out = np.clip(np.where(s <= 1000.0, near, far), 0.0, 1.0)
    return float(out) if np.isscalar(slant_range) else out


def interception(sigma_h: float, sigma_sun: float, slant_range, receiver: Receiver, beam_dir):
    """Fraction of the reflected beam captured by the receiver.

    The beam at the receiver is modelled as a circular Gaussian of width
    ``sigma_eff = slant_range * sqrt((2 sigma_h)^2 + sigma_sun^2)`` (errors
    in mrad).  A cavity captures the Gaussian inside its aperture disc
    projected along the beam; a cylinder captures a separable Gaussian
    over its half-width ``r`` and beam-foreshortened half-height.
    ``beam_dir`` is the unit heliostat-to-receiver direction.
    """
    if sigma_h <= 0.0 or sigma_sun <= 0.0:
        raise ValueError("sigma_h and sigma_sun must be positive")
    slant = np.asarray(slant_range, dtype=float)
    beam = np.asarray(beam_dir, dtype=float)
    scalar = slant.ndim == 0
    slant = np.atleast_1d(slant)
    beam = beam.reshape(-1, 3)
    sigma_eff = slant * math.hypot(2.0 * sigma_h, sigma_sun) * 1.0e-3
    if np.any(sigma_eff <= 0.0):
        raise ValueError("effective beam width must be positive; check slant_range")
    if isinstance(receiver, CavityReceiver):
        normal = np.array([0.0, math.cos(receiver.e_l), -math.sin(receiver.e_l)])
        cos_psi = np.clip(-(beam @ normal), 0.0, 1.0)
        r_proj = receiver.r * cos_psi
        out = 1.0 - np.exp(-(r_proj**2) / (2.0 * sigma_eff**2))
    else:
        elev = np.arcsin(np.clip(beam[:, 2], -1.0, 1.0))
        half_w = receiver.r
        half_h = 0.5 * receiver.h_r * np.cos(elev)
        inv = 1.0 / (math.sqrt(2.0) * sigma_eff)
        out = erf(half_w * inv) * erf(half_h * inv)
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def receiver_cycle_efficiency(power_in, receiver_area: float, t_amb, eta_cycle: float, loss_coeff: float):
    """Receiver + power-block efficiency for ``power_in`` [kW].

    Thermal losses scale with receiver area and grow mildly with ambient
    temperature; efficiency is zero at zero input power.
    """
    p = np.asarray(power_in, dtype=float)
    if np.any(p < 0.0):
        raise ValueError("power_in must be non-negative")
    t = np.asarray(t_amb, dtype=float)
    loss = loss_coeff * (1.0 + 0.005 * (t - 25.0)) * receiver_area
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = eta_cycle * np.maximum(0.0, 1.0 - loss / p)
    eta = np.where(p > 0.0, eta, 0.0)
    return float(eta) if (np.isscalar(power_in) and np.isscalar(t_amb)) else eta


# ---------------------------------------------------------------------------
# shadow / block geometry
# ---------------------------------------------------------------------------


def _mirror_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """In-plane orthonormal basis (u horizontal-ish, v) for each normal."""
    u = np.empty_like(normals)
    u[:, 0] = -normals[:, 1]
    u[:, 1] = normals[:, 0]
    u[:, 2] = 0.0
    norm = np.linalg.norm(u, axis=1)
    degenerate = norm < 1e-12
    if np.any(degenerate):
        u[degenerate] = (1.0, 0.0, 0.0)
        norm[degenerate] = 1.0
    u /= norm[:, None]
    v = np.cross(normals, u)
    return u, v


def _mirror_corners(centers: np.ndarray, u: np.ndarray, v: np.ndarray,
                    half_h: float, half_v: float) -> np.ndarray:
    """(n, 4, 3) corner coordinates, ordered around the rectangle."""
    eu = half_h * u
    ev = half_v * v
    return np.stack(
        (centers + eu + ev, centers - eu + ev, centers - eu - ev, centers + eu - ev),
        axis=1,
    )


def _clip_halfplane(verts: np.ndarray, counts: np.ndarray, axis: int, sign: float,
                    bound: float) -> tuple[np.ndarray, np.ndarray]:
    """Sutherland-Hodgman pass: keep ``sign * coord[axis] <= bound``.

    ``verts`` is (m, v, 2) with ``counts`` valid vertices per polygon;
    convex polygons grow by at most one vertex per pass.
    """
    m, v, _ = verts.shape
    idx = np.arange(v)
    valid = idx[None, :] < counts[:, None]
    cnt = np.maximum(counts, 1)[:, None]
    nxt = (idx[None, :] + 1) % cnt
    vnext = np.take_along_axis(verts, np.repeat(nxt[:, :, None], 2, axis=2), axis=1)
    coord = sign * verts[:, :, axis]
    coord_next = sign * vnext[:, :, axis]
    inside = (coord <= bound) & valid
    inside_next = np.take_along_axis(inside, nxt, axis=1)
    denom = coord_next - coord
    safe = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    t = np.clip((bound - coord) / safe, 0.0, 1.0)
    pint = verts + t[:, :, None] * (vnext - verts)
    emit1 = valid & (inside | inside_next)
    emit2 = valid & ~inside & inside_next
    first_pt = np.where((inside & inside_next)[:, :, None], vnext, pint)
    n_emit = emit1.astype(np.int64) + emit2.astype(np.int64)
    ends = np.cumsum(n_emit, axis=1)
    starts = ends - n_emit
    out = np.zeros((m, v + 1, 2))
    flat = out.reshape(-1, 2)
    rowbase = (np.arange(m) * (v + 1))[:, None]
    flat[(rowbase + starts)[emit1]] = first_pt[emit1]
    flat[(rowbase + starts + 1)[emit2]] = vnext[emit2]
    return out, ends[:, -1]


def _poly_area(verts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Shoelace area of padded polygons."""
    m, v, _ = verts.shape
    idx = np.arange(v)
    valid = idx[None, :] < counts[:, None]
    cnt = np.maximum(counts, 1)[:, None]
    nxt = (idx[None, :] + 1) % cnt
    vn = np.take_along_axis(verts, np.repeat(nxt[:, :, None], 2, axis=2), axis=1)
    cross = verts[:, :, 0] * vn[:, :, 1] - vn[:, :, 0] * verts[:, :, 1]
    return 0.5 * np.abs(np.where(valid & (counts[:, None] >= 3), cross, 0.0).sum(axis=1))


def _rect_overlap_areas(quads: np.ndarray, half_h: float, half_v: float) -> np.ndarray:
    """Area of each convex quad clipped to [-half_h, half_h] x [-half_v, half_v]."""
    verts = quads
    counts = np.full(quads.shape[0], 4, dtype=np.int64)
    for axis, sign, bound in ((0, 1.0, half_h), (0, -1.0, half_h), (1, 1.0, half_v), (1, -1.0, half_v)):
        verts, counts = _clip_halfplane(verts, counts, axis, sign, bound)
        if not counts.any():
            return np.zeros(quads.shape[0])
    return _poly_area(verts, counts)


def _occlusion_fractions(n: int, ii: np.ndarray, jj: np.ndarray,
                         pos: np.ndarray, normals: np.ndarray, u: np.ndarray,
                         v: np.ndarray, corners: np.ndarray, dirs: np.ndarray,
                         half_h: float, half_v: float) -> np.ndarray:
    """Mirror fraction of each front heliostat occluded along per-pair rays.

    ``dirs[p]`` is the (unit) ray direction for pair ``p``: toward the sun
    for shadowing, toward the receiver for blocking.  Neighbour ``jj``
    mirrors are projected along the ray onto the ``ii`` mirror plane and the
    clipped overlap areas accumulate per front heliostat.
    """
    out = np.zeros(n)
    if ii.size == 0:
        return out
    ni = normals[ii]
    dn = np.einsum("pd,pd->p", dirs, ni)
    tau_c = np.einsum("pd,pd->p", pos[jj] - pos[ii], ni)
    # occluder must sit on the ray side of the mirror plane (tau >= 0) and
    # the ray must not graze the plane
    ok = (np.abs(dn) > 1e-6) & (tau_c * np.sign(dn) >= -1e-9 * np.abs(dn))
    if not ok.any():
        return out
    ii, jj, d, ni = ii[ok], jj[ok], dirs[ok], ni[ok]
    ci = pos[ii]
    rel = corners[jj] - ci[:, None, :]
    tau = np.einsum("pkd,pd->pk", rel, ni) / np.einsum("pd,pd->p", d, ni)[:, None]
    proj = corners[jj] - d[:, None, :] * tau[:, :, None]
    relp = proj - ci[:, None, :]
    xi = np.einsum("pkd,pd->pk", relp, u[ii])
    eta = np.einsum("pkd,pd->pk", relp, v[ii])
    hit = (
        (xi.min(axis=1) < half_h)
        & (xi.max(axis=1) > -half_h)
        & (eta.min(axis=1) < half_v)
        & (eta.max(axis=1) > -half_v)
    )
    if not hit.any():
        return out
    quads = np.stack((xi[hit], eta[hit]), axis=2)
    areas = _rect_overlap_areas(quads, half_h, half_v)
    return np.bincount(ii[hit], weights=areas / (4.0 * half_h * half_v), minlength=n)


class _PairGeometry:
    """Static neighbour-pair data reused across time samples."""

    def __init__(self, pos: np.ndarray, pair_i: np.ndarray, pair_j: np.ndarray,
                 l_h: float, l_v: float):
        self.pair_i = pair_i
        self.pair_j = pair_j
        self.delta = pos[pair_j] - pos[pair_i]
        self.dist2 = np.einsum("pd,pd->p", self.delta, self.delta)
        self.diag2 = (l_h**2 + l_v**2)

    def shadow_pairs(self, sun: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        along = self.delta @ sun
        cand = self.dist2 - along**2 <= self.diag2
        return self.pair_i[cand], self.pair_j[cand]

    def block_pairs(self, tdirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        along = np.einsum("pd,pd->p", self.delta, tdirs[self.pair_i])
        cand = self.dist2 - along**2 <= self.diag2
        return self.pair_i[cand], self.pair_j[cand]


def _shadow_block_sample(pos: np.ndarray, tdirs: np.ndarray, sun: np.ndarray,
                         geo: _PairGeometry, l_h: float, l_v: float,
                         block_pairs: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Shadow/block factor of every heliostat for one sun position."""
    n = pos.shape[0]
    normals = tdirs + sun[None, :]
    norm = np.linalg.norm(normals, axis=1)
    bad = norm < 1e-12
    if np.any(bad):
        normals[bad] = (0.0, 0.0, 1.0)
        norm[bad] = 1.0
    normals = normals / norm[:, None]
    u, v = _mirror_frames(normals)
    corners = _mirror_corners(pos, u, v, 0.5 * l_h, 0.5 * l_v)
    si, sj = geo.shadow_pairs(sun)
    bi, bj = geo.block_pairs(tdirs) if block_pairs is None else block_pairs
    shadow = _occlusion_fractions(n, si, sj, pos, normals, u, v, corners,
                                  np.broadcast_to(sun, (si.size, 3)),
                                  0.5 * l_h, 0.5 * l_v)
    block = _occlusion_fractions(n, bi, bj, pos, normals, u, v, corners,
                                 tdirs[bi], 0.5 * l_h, 0.5 * l_v)
    return np.clip(1.0 - shadow - block, 0.0, 1.0)


def shadow_block_factor(heliostat_pos, neighbor_positions, sun_vec, target_vec,
                        l_h: float, l_v: float) -> float:
    """Fraction of one mirror neither shadowed nor blocked by its neighbours.

    ``target_vec`` is the unit direction from the heliostat toward the
    receiver; neighbours are oriented with the same target direction (they
    are nearby, so the aim directions are nearly parallel).
    """
    pos_i = np.asarray(heliostat_pos, dtype=float).reshape(3)
    nbrs = np.asarray(neighbor_positions, dtype=float).reshape(-1, 3)
    if nbrs.shape[0] == 0:
        return 1.0
    sun = np.asarray(sun_vec, dtype=float)
    sun = sun / np.linalg.norm(sun)
    tgt = np.asarray(target_vec, dtype=float)
    tgt = tgt / np.linalg.norm(tgt)
    pos = np.vstack((pos_i[None, :], nbrs))
    tdirs = np.broadcast_to(tgt, pos.shape).copy()
    k = nbrs.shape[0]
    pair_i = np.zeros(k, dtype=np.int64)
    pair_j = np.arange(1, k + 1, dtype=np.int64)
    geo = _PairGeometry(pos, pair_i, pair_j, l_h, l_v)
    sb = _shadow_block_sample(pos, tdirs, sun, geo, l_h, l_v)
    return float(sb[0])


def _neighbor_pairs(pos: np.ndarray, l_h: float, l_v: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat (i, j) pairs of the capped nearest-neighbour sets."""
    n = pos.shape[0]
    if n < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    cutoff = 3.0 * max(l_h, l_v) / math.tan(MIN_SHADOW_ELEVATION)
    k = min(NEIGHBOR_CAP + 1, n)
    dist, idx = cKDTree(pos).query(pos, k=k)
    dist = dist[:, 1:]
    idx = idx[:, 1:]
    keep = (dist <= cutoff) & (idx < n)
    pair_i = np.repeat(np.arange(n, dtype=np.int64), keep.sum(axis=1))
    pair_j = idx[keep].astype(np.int64)
    return pair_i, pair_j


# ---------------------------------------------------------------------------
# time grid and integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Daylight samples of the twelve design days, concatenated."""

    hours: np.ndarray  # [T]
    dni: np.ndarray  # [T] W/m^2
    tamb: np.ndarray  # [T] degrees C
    sun_vecs: np.ndarray  # [T, 3]
    month_slices: tuple[slice, ...]
    month_weights: np.ndarray  # [12] days * clear_ratio

    @staticmethod
    def build(phi: float, insolation: InsolationTable) -> "TimeGrid":
        hours, dni, tamb, vecs, slices, weights = [], [], [], [], [], []
        start = 0
        for rec in insolation.months:
            day = rec.day_of_year
            for h, irr, ta in zip(rec.hours, rec.dni, rec.tamb):
                vec = sun_vector(phi, day, h)
                if vec[2] > 0.0:
                    hours.append(h)
                    dni.append(irr)
                    tamb.append(ta)
                    vecs.append(vec)
            slices.append(slice(start, len(hours)))
            weights.append(rec.days * rec.clear_ratio)
            start = len(hours)
        return TimeGrid(
            hours=np.asarray(hours),
            dni=np.asarray(dni),
            tamb=np.asarray(tamb),
            sun_vecs=np.asarray(vecs).reshape(-1, 3),
            month_slices=tuple(slices),
            month_weights=np.asarray(weights),
        )

    def integrate(self, values: np.ndarray) -> np.ndarray | float:
        """Sum over months of weight * trapezoid over the day, last axis."""
        total = np.zeros(values.shape[:-1])
        for sl, w in zip(self.month_slices, self.month_weights):
            if sl.stop - sl.start >= 2:
                total = total + w * np.trapezoid(values[..., sl], self.hours[sl], axis=-1)
        return float(total) if total.ndim == 0 else total


def _thread_cap() -> int:
    raw = os.environ.get("HELIOTOWER_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class EfficiencyBreakdown:
    """Per-heliostat efficiency factors.

    ``cosine`` and ``shadow_block`` are (n, T) over the daylight samples;
    ``attenuation`` and ``interception`` are (n,) and time-constant.
    """

    cosine: np.ndarray
    shadow_block: np.ndarray
    attenuation: np.ndarray
    interception: np.ndarray
    reflectivity: float


@dataclass(frozen=True)
class ObjectiveValue:
    """Cost per unit annual electric energy, with its ingredients."""

    annual_energy: float  # [kWh]
    total_cost: float
    objective: float
    feasible: bool = True


@dataclass
class EvalCounters:
    """Stage recomputation counters for cache instrumentation."""

    layout: int = 0
    optical: int = 0
    shadow_block: int = 0
    interception: int = 0
    integration: int = 0
    cache_hits: int = 0


class _StageCache:
    """Tiny keyed LRU for stage results."""

    def __init__(self, slots: int):
        self.slots = slots
        self._data: dict = {}

    def get(self, key):
        if key in self._data:
            value = self._data.pop(key)
            self._data[key] = value
            return value
        return None

    def put(self, key, value) -> None:
        if key in self._data:
            self._data.pop(key)
        elif len(self._data) >= self.slots:
            self._data.pop(next(iter(self._data)))
        self._data[key] = value


_KERNELS = None


def _kernels():
    """Jitted kernel module, or None when numba is unavailable."""
    global _KERNELS
    if _KERNELS is None:
        try:
            from . import _kernels as mod
        except ImportError:
            mod = False
        _KERNELS = mod
    return _KERNELS or None


def _shadow_block_field(pos: np.ndarray, beam: np.ndarray, geo: _PairGeometry,
                        params: PlantParams, grid: TimeGrid) -> np.ndarray:
    """(n, T) shadow/block factors; jitted kernel when available."""
    t_count = grid.hours.size
    block_pairs = geo.block_pairs(beam)  # beam directions are time-constant
    kern = _kernels()
    if kern is not None:
        cap = _thread_cap()
        if cap > 1 or "HELIOTOWER_THREADS" in os.environ:
            import numba

            numba.set_num_threads(max(1, min(cap, numba.config.NUMBA_NUM_THREADS)))
        bi, bj = block_pairs
        bdelta = pos[bj] - pos[bi]
        bdist2 = np.einsum("pd,pd->p", bdelta, bdelta)
        return kern.shadow_block_all_samples(
            pos, beam, grid.sun_vecs, geo.pair_i, geo.pair_j, geo.delta,
            geo.dist2, bi, bj, bdelta, bdist2, geo.diag2, params.l_h, params.l_v,
        )

    n = pos.shape[0]
    sb = np.empty((n, t_count))

    def one_sample(t: int) -> None:
        sb[:, t] = _shadow_block_sample(pos, beam, grid.sun_vecs[t], geo,
                                        params.l_h, params.l_v,
                                        block_pairs=block_pairs)

    cap = _thread_cap()
    if cap > 1 and t_count > 1:
        with ThreadPoolExecutor(max_workers=cap) as pool:
            list(pool.map(one_sample, range(t_count)))
    else:
        for t in range(t_count):
            one_sample(t)
    return sb


def _optical_factors(layout: FieldLayout, geo: _PairGeometry, h_t: float,
                     params: PlantParams, grid: TimeGrid) -> dict:
    """Sun-dependent optical chain: cosine, shadow/block, attenuation."""
    pos = layout.positions
    aim = np.array([0.0, 0.0, h_t])
    to_recv = aim[None, :] - pos
    slant = np.linalg.norm(to_recv, axis=1)
    beam = to_recv / slant[:, None]
    cos_inc = np.sqrt(np.clip(0.5 * (1.0 + beam @ grid.sun_vecs.T), 0.0, 1.0))
    sb = _shadow_block_field(pos, beam, geo, params, grid)

    return {
        "cosine": cos_inc,
        "shadow_block": sb,
        "attenuation": attenuation(slant),
        "slant": slant,
        "beam": beam,
    }


def _per_heliostat_power(factors: dict, icpt: np.ndarray, params: PlantParams,
                         grid: TimeGrid) -> np.ndarray:
    """Incident-on-receiver power per heliostat and sample [W]."""
    static = params.mirror_area * params.reflectivity * factors["attenuation"] * icpt
    return grid.dni[None, :] * factors["cosine"] * factors["shadow_block"] * static[:, None]


def _plant_energy(power_w: np.ndarray, mask: np.ndarray | None, receiver: Receiver,
                  params: PlantParams, grid: TimeGrid) -> float:
    """Annual electric energy [kWh] of the (masked) field."""
    p = power_w if mask is None else power_w[mask]
    p_in_kw = p.sum(axis=0) / 1000.0
    eta = receiver_cycle_efficiency(p_in_kw, receiver.area, grid.tamb,
                                    params.eta_cycle, params.loss_coeff)
    return float(grid.integrate(eta * p_in_kw))


def annual_energy(layout: FieldLayout, design: DesignVector, params: PlantParams,
                  insolation: InsolationTable) -> tuple[np.ndarray, float]:
    """Per-heliostat annual energies [kWh] and the plant total [kWh].

    The plant total applies the receiver/cycle efficiency to the summed
    incident power of the whole layout at each time sample.
    """
    if len(layout) == 0:
        raise ValueError("layout is empty")
    grid = TimeGrid.build(params.phi, insolation)
    pair_i, pair_j = _neighbor_pairs(layout.positions, params.l_h, params.l_v)
    geo = _PairGeometry(layout.positions, pair_i, pair_j, params.l_h, params.l_v)
    factors = _optical_factors(layout, geo, design.receiver.h_t, params, grid)
    icpt = interception(params.sigma_h, params.sigma_sun, factors["slant"],
                        design.receiver, factors["beam"])
    power = _per_heliostat_power(factors, icpt, params, grid)
    per_hel = np.asarray(grid.integrate(power)) / 1000.0
    plant = _plant_energy(power, None, design.receiver, params, grid)
    return per_hel, plant


class ObjectiveEvaluator:
    """Cost-per-energy objective with staged evaluation caches.

    Stages and the design variables they depend on:

    * layout - the eight field variables;
    * optical (cosine, shadow/block, attenuation) - field variables plus
      tower height, which sets the aim point and therefore mirror
      orientations;
    * interception - the above plus the aperture/receiver variables;
    * integration, selection and cost - always recomputed.

    A line search that only moves the aperture variables therefore reuses
    the layout and every shadow/block factor.  ``counters`` exposes the
    per-stage recomputation counts.
    """

    def __init__(self, params: PlantParams, config: LayoutConfig,
                 insolation: InsolationTable, use_cache: bool = True):
        self.params = params
        self.config = config
        self.insolation = insolation
        self.grid = TimeGrid.build(params.phi, insolation)
        self.use_cache = use_cache
        self.counters = EvalCounters()
        self._layout_cache = _StageCache(4)
        self._optical_cache = _StageCache(3)
        self._icpt_cache = _StageCache(8)
        self.n_evals = 0

    # stage lookups -------------------------------------------------------

    def _layout(self, design: DesignVector):
        key = design.field_values()
        if self.use_cache:
            hit = self._layout_cache.get(key)
            if hit is not None:
                self.counters.cache_hits += 1
                return hit
        layout = generate_field(design, self.params, self.config)
        pair_i, pair_j = _neighbor_pairs(layout.positions, self.params.l_h, self.params.l_v)
        geo = _PairGeometry(layout.positions, pair_i, pair_j, self.params.l_h, self.params.l_v)
        value = (layout, geo)
        self.counters.layout += 1
        if self.use_cache:
            self._layout_cache.put(key, value)
        return value

    def _optical(self, design: DesignVector, layout: FieldLayout,
                 geo: _PairGeometry) -> dict:
        key = design.field_values() + (design.receiver.h_t,)
        if self.use_cache:
            hit = self._optical_cache.get(key)
            if hit is not None:
                self.counters.cache_hits += 1
                return hit
        factors = _optical_factors(layout, geo, design.receiver.h_t,
                                   self.params, self.grid)
        self.counters.optical += 1
        self.counters.shadow_block += 1
        if self.use_cache:
            self._optical_cache.put(key, factors)
        return factors

    def _interception(self, design: DesignVector, factors: dict) -> np.ndarray:
        key = (design.field_values(), design.receiver)
        if self.use_cache:
            hit = self._icpt_cache.get(key)
            if hit is not None:
                self.counters.cache_hits += 1
                return hit
        icpt = interception(self.params.sigma_h, self.params.sigma_sun,
                            factors["slant"], design.receiver, factors["beam"])
        self.counters.interception += 1
        if self.use_cache:
            self._icpt_cache.put(key, icpt)
        return icpt

    # public API ----------------------------------------------------------

    def evaluate(self, design: DesignVector) -> tuple[ObjectiveValue, FieldLayout]:
        """Objective value plus the evaluated layout (energies and selection)."""
        self.n_evals += 1
        layout, geo = self._layout(design)
        factors = self._optical(design, layout, geo)
        icpt = self._interception(design, factors)
        power = _per_heliostat_power(factors, icpt, self.params, self.grid)
        per_hel = np.asarray(self.grid.integrate(power)) / 1000.0
        selected_layout = select_top(layout, per_hel, self.config.n_hel)
        energy = _plant_energy(power, selected_layout.selected, design.receiver,
                               self.params, self.grid)
        self.counters.integration += 1
        cost = self.params.cost.total(self.config.n_hel, self.params.mirror_area,
                                      design.receiver)
        if energy <= 0.0:
            value = ObjectiveValue(0.0, cost, math.inf, feasible=False)
        else:
            value = ObjectiveValue(energy, cost, cost / energy)
        return value, selected_layout

    def objective(self, design: DesignVector) -> ObjectiveValue:
        return self.evaluate(design)[0]

    def __call__(self, design: DesignVector, changed: Iterable[int] | None = None) -> float:
        # `changed` is an optional which-variables-moved hint from optimizers;
        # the stage caches already detect reuse through their keys.
        return self.objective(design).objective

    def breakdown(self, design: DesignVector) -> EfficiencyBreakdown:
        """Efficiency factors of the current design (for reporting)."""
        layout, geo = self._layout(design)
        factors = self._optical(design, layout, geo)
        icpt = self._interception(design, factors)
        return EfficiencyBreakdown(
            cosine=factors["cosine"],
            shadow_block=factors["shadow_block"],
            attenuation=factors["attenuation"],
            interception=icpt,
            reflectivity=self.params.reflectivity,
        )


def objective(design: DesignVector, params: PlantParams, config: LayoutConfig,
              insolation: InsolationTable,
              cache: ObjectiveEvaluator | None = None) -> ObjectiveValue:
    """One-shot objective; pass an :class:`ObjectiveEvaluator` to reuse stages."""
    if cache is None:
        cache = ObjectiveEvaluator(params, config, insolation)
    return cache.objective(design)


def clear_sky_insolation(phi: float, *, hours: tuple[float, ...] | None = None,
                         clear_ratios: tuple[float, ...] | None = None,
                         t_mean: float = 15.0, t_seasonal: float = 10.0,
                         t_diurnal: float = 6.0) -> InsolationTable:
    """Synthetic design-day table from a simple clear-sky DNI model.

    DNI follows 1353 * 0.7^(AM^0.678) with air mass 1/sin(elevation);
    ambient temperature is a smooth seasonal + diurnal curve.  Useful for
    demos and tests when measured data is not available.
    """
    if hours is None:
        hours = tuple(float(h) for h in range(5, 20))
    if clear_ratios is None:
        clear_ratios = tuple(0.55 + 0.2 * math.sin(TWO_PI * (m - 3.5) / 12.0) for m in range(1, 13))
    days_per_month = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
    months = []
    for m in range(1, 13):
        day = DAY_OF_YEAR_21[m - 1]
        dni, tamb = [], []
        for h in hours:
            _, elev = sun_position(phi, day, h)
            if elev > 1e-6:
                air_mass = 1.0 / math.sin(elev)
                dni.append(1353.0 * 0.7 ** (air_mass**0.678))
            else:
                dni.append(0.0)
            tamb.append(
                t_mean
                + t_seasonal * math.sin(TWO_PI * (m - 4.0) / 12.0)
                + t_diurnal * math.sin(math.pi * (h - 8.0) / 12.0)
            )
        months.append(
            MonthInsolation(
                month=m,
                hours=hours,
                dni=tuple(dni),
                tamb=tuple(tamb),
                clear_ratio=clear_ratios[m - 1],
                days=days_per_month[m - 1],
            )
        )
    return InsolationTable(months=tuple(months))
