"""Scenario configuration files.

Configurations are TOML documents. Every table is optional; missing keys
take the library defaults. A commented example for each contact model lives
in ``configs/`` at the repository root. Layout::

    [scenario]      model, initial_distance, goal_displacement, horizon,
                    t_c, dt, box_pose, seed
    [contact]       k, c, slack_weight
    [weights]       w1 .. w5 (defaults depend on the model; w5 defaults
                    to the contact slack_weight)
    [solver]        any SolverOptions field
    [arm]           any ArmModel field
    [box]           any BoxModel field
    [sweep]         models, initial_distances, workers

Errors carry the file name and, where it can be found, the line of the
offending key.
"""

from __future__ import annotations

import dataclasses
import re
from pathlib import Path
from typing import Any, Dict, List, Optional

import tomli

from .contact_models import ContactModelSpec, ModelVariant
from .harness import ScenarioConfig, SweepConfig
from .nlp_solver import SolverOptions
from .planar_dynamics import ArmModel, BoxModel
from .transcription import CostWeights


class ConfigError(ValueError):
    """Invalid configuration, reported with file and line context."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = path or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


_SECTIONS = ("scenario", "contact", "weights", "solver", "arm", "box", "sweep")
_SCENARIO_KEYS = ("model", "initial_distance", "goal_displacement", "horizon", "t_c", "dt", "box_pose", "seed")
_SWEEP_KEYS = ("models", "initial_distances", "workers")


def _find_line(text: str, section: Optional[str], key: Optional[str]) -> Optional[int]:
    """Best-effort line number of ``key`` inside ``[section]``."""
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.]+)\s*\]")
    for no, raw in enumerate(text.splitlines(), start=1):
        m = header.match(raw)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", raw):
            return no
    return None


class _Reader:
    def __init__(self, data: dict, text: str, path: Optional[str]):
        self.data = data
        self.text = text
        self.path = path

    def fail(self, message: str, section: Optional[str] = None, key: Optional[str] = None):
        raise ConfigError(message, self.path, _find_line(self.text, section, key))

    def table(self, name: str) -> dict:
        value = self.data.get(name, {})
        if not isinstance(value, dict):
            self.fail(f"[{name}] must be a table", None, name)
        return value

    def check_keys(self, section: str, allowed) -> None:
        for key in self.table(section):
            if key not in allowed:
                self.fail(f"unknown key {key!r} in [{section}]", section, key)

    def build(self, section: str, cls, **fixed):
        names = {f.name for f in dataclasses.fields(cls)}
        values = self.table(section)
        for key in values:
            if key not in names:
                self.fail(f"unknown key {key!r} in [{section}]", section, key)
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
        kwargs.update(fixed)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            self.fail(f"invalid [{section}]: {exc}", section, next(iter(values), None))


def _parse(text: str, path: Optional[str]) -> _Reader:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", path, int(m.group(1)) if m else None) from None
    reader = _Reader(data, text, path)
    for name in data:
        if name not in _SECTIONS:
            reader.fail(f"unknown section [{name}]", name, None)
    return reader


def _common(reader: _Reader):
    arm = reader.build("arm", ArmModel)
    box = reader.build("box", BoxModel)
    solver = reader.build("solver", SolverOptions)
    return arm, box, solver


def _contact(reader: _Reader, model: str) -> ContactModelSpec:
    try:
        variant = ModelVariant(model)
    except ValueError:
        reader.fail(f"unknown model {model!r}; expected one of CCCM, SCM, VSCM", "scenario", "model")
    return reader.build("contact", ContactModelSpec, variant=variant)


def _weights(reader: _Reader, base: CostWeights) -> CostWeights:
    values = reader.table("weights")
    allowed = ("w1", "w2", "w3", "w4", "w5")
    for key in values:
        if key not in allowed:
            reader.fail(f"unknown key {key!r} in [weights]", "weights", key)
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        reader.fail(f"invalid [weights]: {exc}", "weights", None)


def _scenario_fields(reader: _Reader) -> Dict[str, Any]:
    reader.check_keys("scenario", _SCENARIO_KEYS)
    sc = dict(reader.table("scenario"))
    if "box_pose" in sc:
        sc["box_pose"] = tuple(sc["box_pose"])
    return sc


def _scenario(reader: _Reader, model: str, distance: float, sc: Dict[str, Any]) -> ScenarioConfig:
    arm, box, solver = _common(reader)
    spec = _contact(reader, model)
    extra = {k: v for k, v in sc.items() if k not in ("model", "initial_distance")}
    try:
        probe = ScenarioConfig(spec, float(distance), **extra)
    except (TypeError, ValueError) as exc:
        reader.fail(f"invalid [scenario]: {exc}", "scenario", None)
    weights = _weights(reader, probe.weights)
    return dataclasses.replace(probe, weights=weights, solver=solver, arm=arm, box=box)


def load_text(text: str, path: Optional[str] = None) -> ScenarioConfig:
    """Single-scenario configuration from TOML text."""
    reader = _parse(text, path)
    sc = _scenario_fields(reader)
    for key in ("model", "initial_distance"):
        if key not in sc:
            reader.fail(f"[scenario] needs {key!r}", "scenario", None)
    return _scenario(reader, sc["model"], sc["initial_distance"], sc)


def load_sweep_text(text: str, path: Optional[str] = None) -> SweepConfig:
    """Model by distance grid. ``[sweep]`` keys default to the full 3 x 3 grid."""
    reader = _parse(text, path)
    sc = _scenario_fields(reader)
    reader.check_keys("sweep", _SWEEP_KEYS)
    sw = reader.table("sweep")
    models: List[str] = list(sw.get("models", [v.value for v in ModelVariant]))
    distances = sw.get("initial_distances", [sc["initial_distance"]] if "initial_distance" in sc else [0.11, 0.17, 0.30])
    workers = sw.get("workers", 1)
    if not models or not distances:
        reader.fail("[sweep] needs at least one model and one distance", "sweep", None)
    if not isinstance(workers, int) or workers < 1:
        reader.fail("workers must be a positive integer", "sweep", "workers")
    if reader.table("weights") and len(models) > 1:
        reader.fail("[weights] overrides are only allowed for single-model sweeps", "weights", None)
    cells: List[ScenarioConfig] = []
    for model in models:
        for d in distances:
            if not isinstance(d, (int, float)) or isinstance(d, bool):
                reader.fail(f"initial distance {d!r} is not a number", "sweep", "initial_distances")
            cells.append(_scenario(reader, model, d, sc))
    return SweepConfig(tuple(cells), workers)


def load(path) -> ScenarioConfig:
    p = Path(path)
    return load_text(_read(p), str(p))


def load_sweep(path) -> SweepConfig:
    p = Path(path)
    return load_sweep_text(_read(p), str(p))


def _read(p: Path) -> str:
    try:
        return p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", str(p)) from None


def default_sweep() -> SweepConfig:
    return load_sweep_text("")
