"""Config-file and data-file formats.

A run is described by one INI-style config with sections ``[design]``,
``[layout]``, ``[plant]``, ``[cost]`` and an optional ``[bounds]`` (keys
match the corresponding dataclass fields), plus two insolation CSVs: hourly
design-day samples ``month,hour,dni_wm2,tamb_c`` and a months table
``month,clear_ratio,days``.
"""

from __future__ import annotations

import configparser
import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layout import (
    CavityReceiver,
    CylindricalReceiver,
    DesignVector,
    LayoutConfig,
)
from .solar import CostModel, InsolationTable, MonthInsolation, PlantParams


class ConfigError(ValueError):
    """Config/data parsing problem; carries file and line when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f", line {line}"
            where = f" ({where})"
        super().__init__(message + where)


#: fallback optimization box per design variable, used when the config has
#: no [bounds] section
DEFAULT_BOUNDS: dict[str, tuple[float, float]] = {
    "a0": (0.0, 15.0),
    "a1": (0.0, 0.12),
    "d_theta": (-15.0, 15.0),
    "e_theta": (-2.0, 2.0),
    "epsilon": (0.0, 8.0),
    "delta": (0.0, 0.8),
    "b": (-0.05, 0.25),
    "d0_1": (6.0, 40.0),
    "h_t": (60.0, 220.0),
    "r": (3.0, 25.0),
    "e_l": (0.0, 1.3),
    "h_r": (3.0, 25.0),
}


@dataclass(frozen=True)
class RunBundle:
    """Everything a command needs from one config file."""

    design: DesignVector
    layout_config: LayoutConfig
    params: PlantParams
    bounds: np.ndarray  # (11, 2)

    @property
    def var_names(self) -> tuple[str, ...]:
        return self.design.var_names


def _key_line(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*[=:]", re.IGNORECASE)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return lineno
    return None


class _SectionReader:
    def __init__(self, parser: configparser.ConfigParser, section: str, path, text: str):
        self.section = section
        self.path = path
        self.text = text
        if not parser.has_section(section):
            raise ConfigError(f"missing section [{section}]", path)
        self.values = dict(parser.items(section))
        self.seen: set[str] = set()

    def _raw(self, key: str, default=None, required: bool = True):
        self.seen.add(key)
        if key in self.values:
            return self.values[key]
        if required and default is None:
            raise ConfigError(f"missing key '{key}' in [{self.section}]", self.path)
        return default

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self._raw(key, default)
        if isinstance(raw, float):
            return raw
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(
                f"key '{key}' in [{self.section}] is not a number: {raw!r}",
                self.path, _key_line(self.text, key),
            ) from None
        if not math.isfinite(value):
            raise ConfigError(
                f"key '{key}' in [{self.section}] must be finite",
                self.path, _key_line(self.text, key),
            )
        return value

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self._raw(key, default)
        if isinstance(raw, int):
            return raw
        try:
            return int(str(raw))
        except ValueError:
            raise ConfigError(
                f"key '{key}' in [{self.section}] is not an integer: {raw!r}",
                self.path, _key_line(self.text, key),
            ) from None

    def get_str(self, key: str, default: str | None = None) -> str:
        return str(self._raw(key, default))


def load_config(path) -> RunBundle:
    """Parse a run config; raises :class:`ConfigError` with location info."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"config syntax error: {exc.message.splitlines()[0]}",
                          path, line) from exc

    design_sec = _SectionReader(parser, "design", path, text)
    kind = design_sec.get_str("receiver").strip().lower()
    if kind == "cavity":
        receiver = CavityReceiver(
            h_t=design_sec.get_float("h_t"),
            r=design_sec.get_float("r"),
            e_l=design_sec.get_float("e_l"),
        )
    elif kind == "cylindrical":
        receiver = CylindricalReceiver(
            h_t=design_sec.get_float("h_t"),
            r=design_sec.get_float("r"),
            h_r=design_sec.get_float("h_r"),
        )
    else:
        raise ConfigError(
            f"receiver must be 'cavity' or 'cylindrical', got {kind!r}",
            path, _key_line(text, "receiver"),
        )
    try:
        design = DesignVector(
            a0=design_sec.get_float("a0"),
            a1=design_sec.get_float("a1"),
            d_theta=design_sec.get_float("d_theta"),
            e_theta=design_sec.get_float("e_theta"),
            epsilon=design_sec.get_float("epsilon"),
            delta=design_sec.get_float("delta"),
            b=design_sec.get_float("b"),
            d0_1=design_sec.get_float("d0_1"),
            receiver=receiver,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [design]: {exc}", path) from exc

    layout_sec = _SectionReader(parser, "layout", path, text)
    group_lines = None
    raw_groups = layout_sec.get_str("group_lines", "")
    if raw_groups.strip():
        try:
            group_lines = tuple(int(part) for part in raw_groups.split(","))
        except ValueError:
            raise ConfigError(
                "group_lines must be a comma-separated list of integers",
                path, _key_line(text, "group_lines"),
            ) from None
    try:
        layout_config = LayoutConfig(
            r_base=layout_sec.get_float("r_base"),
            r_min=layout_sec.get_float("r_min"),
            d_min=layout_sec.get_float("d_min"),
            n_hel=layout_sec.get_int("n_hel"),
            n_overgen=layout_sec.get_float("n_overgen", 1.5),
            group_lines=group_lines,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [layout]: {exc}", path) from exc

    cost_sec = _SectionReader(parser, "cost", path, text)
    try:
        cost = CostModel(
            c_fixed=cost_sec.get_float("c_fixed"),
            c_heliostat=cost_sec.get_float("c_heliostat"),
            c_tower=cost_sec.get_float("c_tower"),
            c_receiver=cost_sec.get_float("c_receiver"),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [cost]: {exc}", path) from exc

    plant_sec = _SectionReader(parser, "plant", path, text)
    try:
        params = PlantParams(
            sigma_h=plant_sec.get_float("sigma_h"),
            l_h=plant_sec.get_float("l_h"),
            l_v=plant_sec.get_float("l_v"),
            reflectivity=plant_sec.get_float("reflectivity"),
            phi=plant_sec.get_float("phi"),
            m_n=plant_sec.get_float("m_n", 0.0),
            m_w=plant_sec.get_float("m_w", 0.0),
            eta_cycle=plant_sec.get_float("eta_cycle"),
            loss_coeff=plant_sec.get_float("loss_coeff"),
            cost=cost,
            sigma_sun=plant_sec.get_float("sigma_sun", 4.65),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [plant]: {exc}", path) from exc

    names = design.var_names
    bounds = np.empty((11, 2))
    bounds_sec = None
    if parser.has_section("bounds"):
        bounds_sec = _SectionReader(parser, "bounds", path, text)
    for i, name in enumerate(names):
        if bounds_sec is not None and name in bounds_sec.values:
            raw = bounds_sec.get_str(name)
            parts = raw.split(",")
            if len(parts) != 2:
                raise ConfigError(
                    f"bounds for '{name}' must be 'lo, hi'",
                    path, _key_line(text, name),
                )
            try:
                lo, hi = float(parts[0]), float(parts[1])
            except ValueError:
                raise ConfigError(
                    f"bounds for '{name}' must be numbers",
                    path, _key_line(text, name),
                ) from None
        else:
            lo, hi = DEFAULT_BOUNDS[name]
        if lo >= hi:
            raise ConfigError(f"bounds for '{name}' are empty: {lo} >= {hi}", path)
        bounds[i] = (lo, hi)

    return RunBundle(design=design, layout_config=layout_config, params=params,
                     bounds=bounds)


def months_path_for(insolation_path) -> Path:
    """Default companion months file: same stem with '.months.csv'."""
    p = Path(insolation_path)
    return p.with_suffix(".months.csv")


def load_insolation(hourly_path, months_path=None) -> InsolationTable:
    """Read the hourly design-day CSV plus the months CSV."""
    hourly_path = Path(hourly_path)
    if months_path is None:
        months_path = months_path_for(hourly_path)
    months_path = Path(months_path)
    if not hourly_path.exists():
        raise ConfigError(f"insolation file not found: {hourly_path}")
    if not months_path.exists():
        raise ConfigError(f"insolation months file not found: {months_path}")

    ratios: dict[int, float] = {}
    days: dict[int, int] = {}
    with open(months_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"month", "clear_ratio", "days"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigError(
                f"months CSV must have columns month,clear_ratio,days", months_path, 1,
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                m = int(row["month"])
                ratios[m] = float(row["clear_ratio"])
                days[m] = int(row["days"])
            except (TypeError, ValueError):
                raise ConfigError("bad months row", months_path, lineno) from None

    samples: dict[int, list[tuple[float, float, float]]] = {m: [] for m in range(1, 13)}
    with open(hourly_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"month", "hour", "dni_wm2", "tamb_c"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigError(
                "insolation CSV must have columns month,hour,dni_wm2,tamb_c",
                hourly_path, 1,
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                m = int(row["month"])
                sample = (float(row["hour"]), float(row["dni_wm2"]), float(row["tamb_c"]))
            except (TypeError, ValueError):
                raise ConfigError("bad insolation row", hourly_path, lineno) from None
            if not 1 <= m <= 12:
                raise ConfigError(f"month {m} out of range", hourly_path, lineno)
            samples[m].append(sample)

    months = []
    for m in range(1, 13):
        if not samples[m]:
            raise ConfigError(f"no hourly samples for month {m}", hourly_path)
        if m not in ratios:
            raise ConfigError(f"no clear_ratio/days row for month {m}", months_path)
        ordered = sorted(samples[m])
        try:
            months.append(
                MonthInsolation(
                    month=m,
                    hours=tuple(s[0] for s in ordered),
                    dni=tuple(s[1] for s in ordered),
                    tamb=tuple(s[2] for s in ordered),
                    clear_ratio=ratios[m],
                    days=days[m],
                )
            )
        except ValueError as exc:
            raise ConfigError(f"invalid data for month {m}: {exc}", hourly_path) from exc
    return InsolationTable(months=tuple(months))


def write_insolation(table: InsolationTable, hourly_path, months_path=None) -> None:
    """Write the two insolation CSVs (inverse of :func:`load_insolation`)."""
    hourly_path = Path(hourly_path)
    if months_path is None:
        months_path = months_path_for(hourly_path)
    with open(hourly_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["month", "hour", "dni_wm2", "tamb_c"])
        for rec in table.months:
            for h, d, t in zip(rec.hours, rec.dni, rec.tamb):
                writer.writerow([rec.month, repr(h), repr(d), repr(t)])
    with open(months_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["month", "clear_ratio", "days"])
        for rec in table.months:
            writer.writerow([rec.month, repr(rec.clear_ratio), rec.days])


def _format_section(name: str, entries: dict) -> str:
    lines = [f"[{name}]"]
    for key, value in entries.items():
        if isinstance(value, float):
            lines.append(f"{key} = {value!r}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines)


def write_config(bundle: RunBundle, path, design: DesignVector | None = None) -> None:
    """Write a complete, re-runnable config; ``design`` overrides the bundle's.

    Floats use shortest round-trip repr, so re-evaluating the written design
    reproduces the objective value exactly.
    """
    design = bundle.design if design is None else design
    receiver = design.receiver
    design_entries: dict = {"receiver": receiver.kind}
    for name, value in zip(FIELD_KEYS, design.field_values()):
        design_entries[name] = float(value)
    design_entries["h_t"] = float(receiver.h_t)
    design_entries["r"] = float(receiver.r)
    if receiver.kind == "cavity":
        design_entries["e_l"] = float(receiver.e_l)
    else:
        design_entries["h_r"] = float(receiver.h_r)

    lc = bundle.layout_config
    layout_entries: dict = {
        "r_base": lc.r_base,
        "r_min": lc.r_min,
        "d_min": lc.d_min,
        "n_hel": lc.n_hel,
        "n_overgen": lc.n_overgen,
    }
    if lc.group_lines is not None:
        layout_entries["group_lines"] = ",".join(str(g) for g in lc.group_lines)

    p = bundle.params
    plant_entries = {
        "sigma_h": p.sigma_h,
        "l_h": p.l_h,
        "l_v": p.l_v,
        "reflectivity": p.reflectivity,
        "phi": p.phi,
        "m_n": p.m_n,
        "m_w": p.m_w,
        "sigma_sun": p.sigma_sun,
        "eta_cycle": p.eta_cycle,
        "loss_coeff": p.loss_coeff,
    }
    cost_entries = {
        "c_fixed": p.cost.c_fixed,
        "c_heliostat": p.cost.c_heliostat,
        "c_tower": p.cost.c_tower,
        "c_receiver": p.cost.c_receiver,
    }
    bounds_entries = {
        name: f"{bundle.bounds[i, 0]!r}, {bundle.bounds[i, 1]!r}"
        for i, name in enumerate(design.var_names)
    }
    sections = [
        _format_section("design", design_entries),
        _format_section("layout", layout_entries),
        _format_section("plant", plant_entries),
        _format_section("cost", cost_entries),
        _format_section("bounds", bounds_entries),
    ]
    Path(path).write_text("\n\n".join(sections) + "\n", encoding="utf-8")


FIELD_KEYS = ("a0", "a1", "d_theta", "e_theta", "epsilon", "delta", "b", "d0_1")
