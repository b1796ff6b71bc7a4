"""Run parameters, validation, config loading and the phototaxis response."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CONFIG_ENV = "BIOSTAB_CONFIG"


class InvalidParams(ValueError):
    """Raised with every violated invariant listed in ``violations``."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Params:
    schmidt: float = 20.0
    swim_speed: float = 20.0
    extinction: float = 0.5
    albedo: float = 0.42
    aniso: float = 0.0
    critical_intensity: float = 1.0
    source_intensity: float = 1.0
    taylor: float = 0.0
    nz: int = 201
    n_tau: int = 201
    n_mu: int = 32
    n_phi: int = 24
    # default phototaxis shape, see TanhTaxis
    taxis_amplitude: float = 0.8
    taxis_steepness: float = 2.0

    def violations(self):
        out = []

        def need(ok, field, msg):
            if not ok:
                out.append(f"{field} must be {msg}")

        need(self.schmidt > 0, "schmidt", "> 0")
        need(self.swim_speed >= 0, "swim_speed", "≥ 0")
        need(self.extinction > 0, "extinction", "> 0")
        need(self.albedo >= 0, "albedo", "≥ 0")
        need(self.albedo < 1, "albedo", "< 1")
        need(-1 <= self.aniso <= 1, "aniso", "in [-1, 1]")
        need(self.critical_intensity > 0, "critical_intensity", "> 0")
        need(self.source_intensity > 0, "source_intensity", "> 0")
        need(self.taylor >= 0, "taylor", "≥ 0")
        for name in ("nz", "n_tau", "n_mu", "n_phi"):
            value = getattr(self, name)
            need(int(value) == value and value >= 8, name, "an integer ≥ 8")
        for name in ("nz", "n_tau"):
            need(int(getattr(self, name)) % 2 == 1, name, "odd")
        need(0 < self.taxis_amplitude <= 1, "taxis_amplitude", "in (0, 1]")
        need(self.taxis_steepness > 0, "taxis_steepness", "> 0")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                out.append(f"{f.name} must be finite")
        return out

    def with_(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return asdict(self)

    def digest(self):
        import hashlib

        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def validate(params: Params) -> Params:
    """Return ``params`` unchanged, or raise InvalidParams naming every violation."""
    bad = params.violations()
    if bad:
        raise InvalidParams(bad)
    return params


_FIELD_TYPES = {f.name: f.type for f in fields(Params)}

# Short aliases accepted in config files and on the command line.
ALIASES = {
    "Sc": "schmidt",
    "Vc": "swim_speed",
    "kappa": "extinction",
    "omega": "albedo",
    "A": "aniso",
    "Gc": "critical_intensity",
    "Lt": "source_intensity",
    "Ta": "taylor",
}


def params_from_mapping(mapping, base: Params | None = None) -> Params:
    base = base or Params()
    changes = {}
    for key, value in mapping.items():
        name = ALIASES.get(key, key)
        if name not in _FIELD_TYPES:
            raise InvalidParams([f"unknown parameter {key!r}"])
        changes[name] = int(value) if _FIELD_TYPES[name] == "int" else float(value)
    return replace(base, **changes)


def load_config(path=None, base: Params | None = None) -> Params:
    """Read a flat key = value document (TOML or JSON).

    With no path, falls back to $BIOSTAB_CONFIG; with neither, returns defaults.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if not path:
        return base or Params()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise InvalidParams([f"config must be flat; nested keys {nested}"])
    return params_from_mapping(data, base)


class TaxisError(ValueError):
    pass


class Taxis:
    """Phototactic response G -> (M(G), dM/dG).

    Subclasses implement :meth:`evaluate`; :meth:`check` samples the sign,
    bound and derivative properties every admissible response must have.
    """

    name = "taxis"

    def __init__(self, critical_intensity=1.0):
        self.critical_intensity = float(critical_intensity)

    def evaluate(self, G):
        raise NotImplementedError

    def __call__(self, G):
        return self.evaluate(G)

    def describe(self):
        return {"name": self.name, "critical_intensity": self.critical_intensity}

    def check(self, g_max=None, n=400, rtol=1e-6):
        Gc = self.critical_intensity
        g_max = 3.0 * Gc if g_max is None else g_max
        G = np.linspace(0.0, g_max, n)
        M, dM = self.evaluate(G)
        bad = []
        below = G <= Gc
        if np.any(M[below] < 0):
            bad.append("M(G) must be ≥ 0 for G ≤ G_c")
        if np.any(M[~below] >= 0):
            bad.append("M(G) must be < 0 for G > G_c")
        if np.any(np.abs(M) > 1):
            bad.append("|M(G)| must be ≤ 1")
        h = 1e-5 * max(Gc, 1.0)
        Gi = G[(G > h) & (G < g_max - h)]
        fd = (self.evaluate(Gi + h)[0] - self.evaluate(Gi - h)[0]) / (2 * h)
        _, d = self.evaluate(Gi)
        scale = np.maximum(np.abs(d), np.max(np.abs(d)) * 1e-3 + 1e-12)
        if np.any(np.abs(fd - d) > rtol * scale):
            bad.append("dM/dG disagrees with finite differences of M")
        if bad:
            raise TaxisError("; ".join(bad))
        return self


class TanhTaxis(Taxis):
    """M(G) = amplitude * tanh(steepness * (G_c - G))."""

    name = "tanh"

    def __init__(self, critical_intensity=1.0, amplitude=0.8, steepness=2.0):
        super().__init__(critical_intensity)
        self.amplitude = float(amplitude)
        self.steepness = float(steepness)

    def evaluate(self, G):
        t = np.tanh(self.steepness * (self.critical_intensity - np.asarray(G, dtype=float)))
        return self.amplitude * t, -self.amplitude * self.steepness * (1.0 - t * t)

    def describe(self):
        out = super().describe()
        out.update(amplitude=self.amplitude, steepness=self.steepness)
        return out


class CallableTaxis(Taxis):
    """Wrap user functions ``response(G)`` and ``slope(G)``."""

    name = "callable"

    def __init__(self, response: Callable, slope: Callable, critical_intensity=1.0, name=None):
        super().__init__(critical_intensity)
        self._response = response
        self._slope = slope
        if name:
            self.name = name

    def evaluate(self, G):
        G = np.asarray(G, dtype=float)
        return np.asarray(self._response(G), dtype=float), np.asarray(self._slope(G), dtype=float)


def taxis_from_params(params: Params) -> Taxis:
    return TanhTaxis(
        params.critical_intensity, params.taxis_amplitude, params.taxis_steepness
    ).check()


def taxis_eval(taxis: Taxis, G):
    if np.any(np.asarray(G) < 0):
        raise ValueError("light intensity must be nonnegative")
    return taxis.evaluate(G)
