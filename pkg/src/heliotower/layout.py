"""Parametric heliostat field layout generation.

A field is described by eight scalar layout variables plus a receiver
geometry (see :class:`DesignVector`).  Heliostat lines are laid out group by
group: the first line of each group is filled azimuthally from north
(``theta = 0``, clockwise positive) with a growing arc spacing, subsequent
lines of the group are radially staggered (each mirror at the mean azimuth of
the two facing mirrors of the previous line), and every group restarts the
pattern after a transition gap.

Coordinate conventions: x east, y north, z up, tower axis at the origin.
Ground elevation is ``z = m_n * y + m_w * x`` for terrain slopes
``m_n`` (rise per metre north) and ``m_w`` (rise per metre east).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Iterator, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Effective radii (base radius + azimuthal shift) are floored here so that a
# strongly negative d_theta cannot push a line through the tower.
RADIUS_FLOOR = 1.0

# Hard cap on generated lines; reaching it means the configuration cannot
# host the requested heliostat count in any practical way.
MAX_LINES = 2000


class FieldCapacityError(ValueError):
    """Raised when a layout configuration cannot host the requested field."""


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class CavityReceiver:
    """North-facing circular aperture on top of the tower.

    ``e_l`` tilts the aperture normal down from the horizontal north
    direction, so the aperture looks into the field.
    """

    h_t: float  # tower height [m]
    r: float  # aperture radius [m]
    e_l: float  # aperture inclination [rad]

    kind = "cavity"

    def __post_init__(self) -> None:
        _check_finite(h_t=self.h_t, r=self.r, e_l=self.e_l)
        if self.h_t <= 0.0:
            raise ValueError("tower height h_t must be positive")
        if self.r <= 0.0:
            raise ValueError("aperture radius r must be positive")
        if not 0.0 <= self.e_l <= math.pi / 2.0:
            raise ValueError("aperture inclination e_l must lie in [0, pi/2]")

    @property
    def area(self) -> float:
        """Aperture area [m^2]."""
        return math.pi * self.r**2

    def variable_values(self) -> tuple[float, float, float]:
        return (self.h_t, self.r, self.e_l)


@dataclass(frozen=True)
class CylindricalReceiver:
    """External cylindrical receiver absorbing from all directions."""

    h_t: float  # tower height [m]
    r: float  # receiver radius [m]
    h_r: float  # receiver height [m]

    kind = "cylindrical"

    def __post_init__(self) -> None:
        _check_finite(h_t=self.h_t, r=self.r, h_r=self.h_r)
        if self.h_t <= 0.0:
            raise ValueError("tower height h_t must be positive")
        if self.r <= 0.0:
            raise ValueError("receiver radius r must be positive")
        if self.h_r <= 0.0:
            raise ValueError("receiver height h_r must be positive")

    @property
    def area(self) -> float:
        """Lateral (absorbing) surface area [m^2]."""
        return TWO_PI * self.r * self.h_r

    def variable_values(self) -> tuple[float, float, float]:
        return (self.h_t, self.r, self.h_r)


Receiver = CavityReceiver | CylindricalReceiver

#: Canonical ordering of the 11 design variables in optimization vectors.
FIELD_VAR_NAMES = ("a0", "a1", "d_theta", "e_theta", "epsilon", "delta", "b", "d0_1")
RECEIVER_VAR_NAMES = {"cavity": ("h_t", "r", "e_l"), "cylindrical": ("h_t", "r", "h_r")}


@dataclass(frozen=True)
class DesignVector:
    """The 11 optimization variables of a plant design.

    Eight field-layout variables plus three receiver variables (cavity or
    cylindrical variant).
    """

    a0: float  # initial row spacing [m]
    a1: float  # row-spacing growth [-]
    d_theta: float  # radial correction with azimuth [m/rad]
    e_theta: float  # azimuthal-spacing growth [m/rad]
    epsilon: float  # transition extra distance [m]
    delta: float  # transition distance growth [-]
    b: float  # group start-spacing growth [-]
    d0_1: float  # first-line north azimuthal spacing [m]
    receiver: Receiver

    def __post_init__(self) -> None:
        _check_finite(
            a0=self.a0,
            a1=self.a1,
            d_theta=self.d_theta,
            e_theta=self.e_theta,
            epsilon=self.epsilon,
            delta=self.delta,
            b=self.b,
            d0_1=self.d0_1,
        )
        if self.a0 < 0.0:
            raise ValueError("a0 must be non-negative")
        if self.d0_1 <= 0.0:
            raise ValueError("d0_1 must be positive")

    @property
    def var_names(self) -> tuple[str, ...]:
        return FIELD_VAR_NAMES + RECEIVER_VAR_NAMES[self.receiver.kind]

    def field_values(self) -> tuple[float, ...]:
        """The eight layout variables, in canonical order."""
        return (
            self.a0,
            self.a1,
            self.d_theta,
            self.e_theta,
            self.epsilon,
            self.delta,
            self.b,
            self.d0_1,
        )

    def to_array(self) -> np.ndarray:
        """Full 11-vector (field variables then receiver variables)."""
        return np.array(self.field_values() + self.receiver.variable_values())

    def with_array(self, x: Sequence[float]) -> "DesignVector":
        """Rebuild a design of the same receiver kind from an 11-vector."""
        x = [float(v) for v in x]
        if len(x) != 11:
            raise ValueError(f"expected 11 design variables, got {len(x)}")
        if self.receiver.kind == "cavity":
            receiver: Receiver = CavityReceiver(x[8], x[9], x[10])
        else:
            receiver = CylindricalReceiver(x[8], x[9], x[10])
        return DesignVector(*x[:8], receiver=receiver)


@dataclass(frozen=True)
class LayoutConfig:
    """Fixed layout constants that are not optimized.

    ``group_lines`` gives the number of lines in each successive group; when
    ``None`` the default increasing sequence 2, 3, 3, 4, 4, 5, 5, ... is
    extended for as long as needed.
    """

    r_base: float  # first-line distance to the tower [m]
    r_min: float  # minimal radial spacing between lines [m]
    d_min: float  # minimal azimuthal arc spacing within a line [m]
    n_hel: int  # heliostats kept in the final design
    n_overgen: float = 1.5  # overgeneration factor
    group_lines: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        _check_finite(r_base=self.r_base, r_min=self.r_min, d_min=self.d_min, n_overgen=self.n_overgen)
        if self.r_base <= 0.0:
            raise ValueError("r_base must be positive")
        if self.r_min <= 0.0:
            raise ValueError("r_min must be positive")
        if self.d_min <= 0.0:
            raise ValueError("d_min must be positive")
        if self.n_hel < 1:
            raise ValueError("n_hel must be at least 1")
        if self.n_overgen < 1.0:
            raise ValueError("n_overgen must be >= 1")
        if self.group_lines is not None:
            if len(self.group_lines) == 0 or any(g < 1 for g in self.group_lines):
                raise ValueError("group_lines must be a non-empty sequence of counts >= 1")

    @property
    def n_generate(self) -> int:
        """Heliostats to generate before selection."""
        return math.ceil(self.n_hel * self.n_overgen)

    def iter_group_lines(self) -> Iterator[int]:
        if self.group_lines is not None:
            yield from self.group_lines
            return
        yield 2
        count = 3
        while True:
            yield count
            yield count
            count += 1


@dataclass(frozen=True)
class Heliostat:
    """A single placed heliostat."""

    id: int
    theta: float  # azimuth [rad], 0 at north, clockwise
    radius: float  # horizontal distance to the tower axis [m]
    x: float
    y: float
    z: float
    group: int
    line: int  # line index within its group
    annual_energy: float = 0.0  # [kWh], filled by the plant model
    selected: bool = False


@dataclass(frozen=True)
class FieldLayout:
    """Immutable generated field.

    Heliostat attributes are stored as parallel read-only arrays;
    :attr:`heliostats` materializes them as :class:`Heliostat` records.
    """

    design: DesignVector
    config: LayoutConfig
    theta: np.ndarray
    radius: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    group: np.ndarray
    line: np.ndarray
    annual_kwh: np.ndarray
    selected: np.ndarray

    def __post_init__(self) -> None:
        for arr in (self.theta, self.radius, self.x, self.y, self.z,
                    self.group, self.line, self.annual_kwh, self.selected):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.theta.shape[0]

    @cached_property
    def heliostats(self) -> tuple[Heliostat, ...]:
        return tuple(
            Heliostat(
                id=i,
                theta=float(self.theta[i]),
                radius=float(self.radius[i]),
                x=float(self.x[i]),
                y=float(self.y[i]),
                z=float(self.z[i]),
                group=int(self.group[i]),
                line=int(self.line[i]),
                annual_energy=float(self.annual_kwh[i]),
                selected=bool(self.selected[i]),
            )
            for i in range(len(self))
        )

    @cached_property
    def positions(self) -> np.ndarray:
        """(n, 3) array of heliostat centre coordinates."""
        pos = np.column_stack((self.x, self.y, self.z))
        pos.setflags(write=False)
        return pos

    def with_energies(self, annual_kwh: np.ndarray, selected: np.ndarray | None = None) -> "FieldLayout":
        annual = np.asarray(annual_kwh, dtype=float).copy()
        if annual.shape != self.theta.shape:
            raise ValueError("energy array length does not match the layout")
        sel = self.selected if selected is None else np.asarray(selected, dtype=bool).copy()
        return replace(self, annual_kwh=annual, selected=sel)


def radial_distances(a0: float, a1: float, r_base: float, r_min: float, n_lines: int) -> np.ndarray:
    """Base radii of the first ``n_lines`` heliostat lines.

    The recursion ``R_n = a0 + (a1 + 1) R_{n-1}`` is seeded with
    ``R_0 = r_base`` and every step is clamped to keep at least ``r_min``
    between consecutive lines.
    """
    _check_finite(a0=a0, a1=a1, r_base=r_base, r_min=r_min)
    if n_lines < 1:
        raise ValueError("n_lines must be at least 1")
    if r_base <= 0.0:
        raise ValueError("r_base must be positive")
    if r_min <= 0.0:
        raise ValueError("r_min must be positive")
    radii = np.empty(n_lines)
    radii[0] = r_base
    for n in range(1, n_lines):
        radii[n] = max(a0 + (a1 + 1.0) * radii[n - 1], radii[n - 1] + r_min)
    return radii


def azimuthal_shift(d_theta: float, theta):
    """Radial increment at azimuth ``theta`` (symmetric about the south).

    Grows linearly from north over the east half and mirrors over the west
    half, so the shift is continuous at ``theta = pi`` and vanishes at north.
    Accepts scalars or arrays; ``theta`` must lie in ``[0, 2*pi)``.
    """
    th = np.asarray(theta, dtype=float)
    if np.any((th < 0.0) | (th >= TWO_PI)):
        raise ValueError("theta must lie in [0, 2*pi)")
    shift = np.where(th <= math.pi, d_theta * th, d_theta * (TWO_PI - th))
    return float(shift) if np.isscalar(theta) else shift


def transition_gap(a0: float, a1: float, last_spacing: float, delta: float, epsilon: float) -> float:
    """Extra radial clearance in front of the first line of a group.

    ``last_spacing`` is the most recent inter-line spacing; the gap grows
    with it, so transition lines open up further from the tower.
    """
    if last_spacing < 0.0:
        raise ValueError("last_spacing must be non-negative")
    return (1.0 + a0 + a1 * last_spacing) * delta + epsilon


def group_start_spacing(b: float, d0_prev: float) -> float:
    """North azimuthal spacing of the next group from the previous group's."""
    if b <= -1.0:
        raise ValueError("b must be greater than -1 (spacing must stay positive)")
    if d0_prev <= 0.0:
        raise ValueError("d0_prev must be positive")
    return (b + 1.0) * d0_prev


def _fill_group_first(d0: float, e_theta: float, r_line: float, d_min: float,
                      extent: float = math.pi) -> np.ndarray:
    """Azimuths of a group-first line, sorted ascending in [0, 2*pi).

    One heliostat sits exactly at north; the east half is filled with the
    growing-spacing recursion (increment uses the azimuth of the previously
    placed heliostat, clamped at ``d_min``), the west half mirrors it, and
    westmost heliostats are dropped while the south seam gap is below
    ``d_min``.  Arc spacings are measured on the line's base circle.
    """
    east = []
    psi = 0.0
    spacing = d0
    while True:
        spacing = max(spacing + e_theta * psi, d_min)
        psi_next = psi + spacing / r_line
        if psi_next > extent:
            break
        east.append(psi_next)
        psi = psi_next
        if len(east) > 100000:
            raise FieldCapacityError("line filling does not terminate; check d_min and d0_1")
    n_west = len(east)
    if east:
        # south seam: keep at least d_min of arc between the east- and
        # westmost heliostats
        while n_west > 0 and (TWO_PI - east[-1] - east[n_west - 1]) * r_line < d_min:
            n_west -= 1
    east_arr = np.asarray(east)
    west_arr = TWO_PI - east_arr[:n_west][::-1]
    return np.concatenate(([0.0], east_arr, west_arr))


def _stagger(prev_thetas: np.ndarray, r_line: float, d_min: float) -> np.ndarray:
    """Azimuths of a staggered line: midpoints of consecutive front pairs."""
    mids = 0.5 * (prev_thetas[:-1] + prev_thetas[1:])
    if mids.size == 0:
        return mids
    # with monotone radii the inherited spacing can only grow, but a violation
    # would silently break the field invariant, so keep the guard
    if np.all(np.diff(mids) * r_line >= d_min - 1e-12):
        return mids
    kept = [mids[0]]
    for m in mids[1:]:
        if (m - kept[-1]) * r_line >= d_min - 1e-12:
            kept.append(m)
    return np.asarray(kept)


def place_line(line_kind: str, d0_line: float | None, e_theta: float,
               radius_fn: Callable[[float], float],
               prev_line: Sequence[Heliostat] | None, d_min: float) -> list[Heliostat]:
    """Place one line of heliostats.

    ``line_kind`` is ``"group_first"`` (azimuthal fill seeded by ``d0_line``)
    or ``"staggered"`` (midpoints of ``prev_line``).  ``radius_fn`` maps
    azimuth to the line's effective radius; its value at north is the base
    radius used to convert arc spacings to angles.  Group/line indices of the
    returned records are zero; :func:`generate_field` assigns real ones.
    """
    r_line = float(radius_fn(0.0))
    if r_line <= 0.0:
        raise ValueError("radius_fn(0) must be positive")
    if line_kind == "group_first":
        if d0_line is None or d0_line <= 0.0:
            raise ValueError("group_first lines need a positive d0_line")
        thetas = _fill_group_first(d0_line, e_theta, r_line, d_min)
    elif line_kind == "staggered":
        if prev_line is None or len(prev_line) == 0:
            raise ValueError("staggered lines need a populated prev_line")
        prev_thetas = np.sort(np.asarray([h.theta for h in prev_line]))
        thetas = _stagger(prev_thetas, r_line, d_min)
    else:
        raise ValueError(f"unknown line kind {line_kind!r}")
    out = []
    for i, th in enumerate(thetas):
        radius = max(float(radius_fn(float(th))), RADIUS_FLOOR)
        out.append(
            Heliostat(
                id=i,
                theta=float(th),
                radius=radius,
                x=radius * math.sin(th),
                y=radius * math.cos(th),
                z=0.0,
                group=0,
                line=0,
            )
        )
    return out


def generate_field(design: DesignVector, params, config: LayoutConfig) -> FieldLayout:
    """Deterministically expand a design into a full (overgenerated) field.

    ``params`` only contributes the terrain slopes ``m_n`` and ``m_w``.
    Generation proceeds group by group until at least
    ``config.n_hel * config.n_overgen`` heliostats exist; a finite
    ``group_lines`` that ends before that raises :class:`FieldCapacityError`.
    """
    m_n = float(getattr(params, "m_n", 0.0))
    m_w = float(getattr(params, "m_w", 0.0))
    target = config.n_generate

    thetas_parts: list[np.ndarray] = []
    radii_parts: list[np.ndarray] = []
    groups_parts: list[np.ndarray] = []
    lines_parts: list[np.ndarray] = []

    count = 0
    total_lines = 0
    r_prev = None  # base radius of the previous line
    last_spacing = 0.0  # most recent inter-line base spacing
    d0 = design.d0_1

    def emit(thetas: np.ndarray, r_base_line: float, g: int, j: int) -> int:
        shift = azimuthal_shift(design.d_theta, thetas)
        r_eff = np.maximum(r_base_line + shift, RADIUS_FLOOR)
        thetas_parts.append(thetas)
        radii_parts.append(r_eff)
        groups_parts.append(np.full(thetas.shape, g, dtype=np.int64))
        lines_parts.append(np.full(thetas.shape, j, dtype=np.int64))
        return thetas.size

    done = False
    for g, n_lines_in_group in enumerate(config.iter_group_lines()):
        if done:
            break
        if g > 0:
            d0 = group_start_spacing(design.b, d0)
        prev_thetas: np.ndarray | None = None
        for j in range(n_lines_in_group):
            if r_prev is None:
                r_line = config.r_base
            else:
                rec = design.a0 + (design.a1 + 1.0) * r_prev
                if j == 0:
                    rec += transition_gap(design.a0, design.a1, last_spacing, design.delta, design.epsilon)
                r_line = max(rec, r_prev + config.r_min)
            if j == 0:
                thetas = _fill_group_first(d0, design.e_theta, r_line, config.d_min)
            else:
                if prev_thetas is None or prev_thetas.size < 2:
                    break  # group cannot stagger further; move to next group
                thetas = _stagger(prev_thetas, r_line, config.d_min)
                if thetas.size == 0:
                    break
            count += emit(thetas, r_line, g, j)
            if r_prev is not None:
                last_spacing = r_line - r_prev
            r_prev = r_line
            prev_thetas = thetas
            total_lines += 1
            if total_lines > MAX_LINES:
                raise FieldCapacityError(
                    f"more than {MAX_LINES} lines needed for {target} heliostats; "
                    "layout spacings are growing too fast"
                )
            if count >= target:
                done = True
                break

    if count < target:
        raise FieldCapacityError(
            f"group_lines={config.group_lines} hosts only {count} heliostats, "
            f"but n_hel * n_overgen = {target} are required"
        )

    theta = np.concatenate(thetas_parts)
    radius = np.concatenate(radii_parts)
    x = radius * np.sin(theta)
    y = radius * np.cos(theta)
    z = m_n * y + m_w * x
    n = theta.size
    return FieldLayout(
        design=design,
        config=config,
        theta=theta,
        radius=radius,
        x=x,
        y=y,
        z=z,
        group=np.concatenate(groups_parts),
        line=np.concatenate(lines_parts),
        annual_kwh=np.zeros(n),
        selected=np.zeros(n, dtype=bool),
    )


def select_top(layout: FieldLayout, per_heliostat_energy: np.ndarray, n_hel: int) -> FieldLayout:
    """Flag the ``n_hel`` most productive heliostats as selected.

    Ties are broken towards smaller radius, then smaller angular distance
    from north, then smaller id.
    """
    energy = np.asarray(per_heliostat_energy, dtype=float)
    if energy.shape != layout.theta.shape:
        raise ValueError("energy array length does not match the layout")
    if not np.all(np.isfinite(energy)):
        raise ValueError("per-heliostat energies must be finite")
    n = len(layout)
    if n_hel > n:
        raise ValueError(f"cannot select {n_hel} heliostats from a field of {n}")
    fold = np.minimum(layout.theta, TWO_PI - layout.theta)
    order = np.lexsort((np.arange(n), fold, layout.radius, -energy))
    selected = np.zeros(n, dtype=bool)
    selected[order[:n_hel]] = True
    return layout.with_energies(energy, selected)


LAYOUT_CSV_HEADER = ("id", "theta_rad", "radius_m", "x_m", "y_m", "z_m",
                     "group", "line", "annual_kwh", "selected")


def write_layout_csv(layout: FieldLayout, path) -> None:
    """Write one row per heliostat; floats use shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LAYOUT_CSV_HEADER)
        for h in layout.heliostats:
            writer.writerow([
                h.id,
                repr(h.theta),
                repr(h.radius),
                repr(h.x),
                repr(h.y),
                repr(h.z),
                h.group,
                h.line,
                repr(h.annual_energy),
                int(h.selected),
            ])
