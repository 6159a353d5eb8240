"""Contact models that produce the virtual normal force.

* CCCM: the force magnitude is a decision variable, tied to the distance
  through relaxed complementarity constraints ``phi >= 0, gamma*phi <= s``.
* SCM: ``gamma = k * exp(-(c/k) * phi)`` with fixed stiffness k.
* VSCM: the same law with a per-step stiffness ``k_l`` chosen by the
  optimizer, ``0 <= k_l <= k_max``; the force is exactly zero at ``k_l = 0``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from . import _kernels as K

N_CONTACTS = 1


class SchemaMismatch(ValueError):
    """Decision vector layout does not match the contact model."""


class ModelVariant(str, enum.Enum):
    CCCM = "CCCM"
    SCM = "SCM"
    VSCM = "VSCM"

    @property
    def code(self) -> int:
        return {"CCCM": K.MODEL_CCCM, "SCM": K.MODEL_SCM, "VSCM": K.MODEL_VSCM}[self.value]


@dataclass(frozen=True)
class ContactModelSpec:
    variant: ModelVariant
    k: float = 100.0
    c: float = 5.0e3
    slack_weight: float = 1.0e3

    def __post_init__(self):
        object.__setattr__(self, "variant", ModelVariant(self.variant))
        if self.variant is ModelVariant.CCCM:
            if self.slack_weight < 0:
                raise ValueError("slack_weight must be non-negative")
        elif self.k <= 0 or self.c <= 0:
            raise ValueError("k and c must be positive for smooth contact models")

    @property
    def alpha(self) -> float:
        return self.c / self.k


@dataclass(frozen=True)
class CccmStepVars:
    gamma: float
    s: float


@dataclass(frozen=True)
class ConstraintResiduals:
    phi_lb: np.ndarray
    comp: np.ndarray

    def feasible(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.phi_lb >= -tol) and np.all(self.comp <= tol))


def _smooth(k, c, phi):
    # same compiled law as the rollout, so recorded forces match bit for bit
    kk, pp = np.broadcast_arrays(np.asarray(k, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    out = np.empty(kk.size)
    K.smooth_force_array(np.ascontiguousarray(kk).ravel(), float(c), np.ascontiguousarray(pp).ravel(), out)
    out = out.reshape(kk.shape)
    return float(out) if out.ndim == 0 else out


def scm_force(spec: ContactModelSpec, phi):
    """Fixed-stiffness exponential force. Accepts scalars or arrays."""
    if spec.variant is not ModelVariant.SCM:
        raise ValueError("scm_force needs an SCM spec")
    return _smooth(spec.k, spec.c, phi)


def vscm_force(spec: ContactModelSpec, k_step, phi):
    """Variable-stiffness force with curvature ``c / k_step``; 0 where ``k_step == 0``."""
    k_arr = np.asarray(k_step, dtype=np.float64)
    if np.any(k_arr < 0) or np.any(k_arr > spec.k):
        raise ValueError("k_step must lie in [0, spec.k]")
    return _smooth(k_arr, spec.c, phi)


def scm_force_derivative(spec: ContactModelSpec, phi):
    """d gamma / d phi of the fixed-stiffness law, ``-alpha * gamma``."""
    return -spec.alpha * scm_force(spec, phi)


def cccm_residuals(gamma, phi, s) -> ConstraintResiduals:
    """Relaxed complementarity residuals: ``phi`` (>= 0) and ``gamma*phi - s`` (<= 0)."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    return ConstraintResiduals(phi_lb=phi.copy(), comp=gamma * phi - s)


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    length: int
    lower: float
    upper: float
    initial: float

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class DecisionSchema:
    """Layout of the flat decision vector: named blocks, bounds, initial guess."""

    variant: ModelVariant
    n_steps: int
    n_u: int
    blocks: tuple

    @property
    def size(self) -> int:
        return sum(b.length for b in self.blocks)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise SchemaMismatch(f"no block {name!r} for {self.variant.value}")

    def has(self, name: str) -> bool:
        return any(b.name == name for b in self.blocks)

    def lower(self) -> np.ndarray:
        return np.concatenate([np.full(b.length, b.lower) for b in self.blocks])

    def upper(self) -> np.ndarray:
        return np.concatenate([np.full(b.length, b.upper) for b in self.blocks])

    def initial(self) -> np.ndarray:
        return np.concatenate([np.full(b.length, b.initial) for b in self.blocks])

    def split(self, x) -> Dict[str, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.size,):
            raise SchemaMismatch(
                f"decision vector has shape {x.shape}, schema expects ({self.size},)"
            )
        parts = {b.name: x[b.slice] for b in self.blocks}
        parts["u"] = parts["u"].reshape(self.n_steps, self.n_u)
        return parts

    def describe(self) -> List[dict]:
        return [
            dict(name=b.name, offset=b.offset, length=b.length, lower=b.lower, upper=b.upper)
            for b in self.blocks
        ]


def decision_schema(spec: ContactModelSpec, N: int, n_u: int, u_max: float = 20.0) -> DecisionSchema:
    if N < 1 or n_u < 1:
        raise ValueError("N and n_u must be >= 1")
    blocks = []
    offset = 0

    def add(name, length, lo, hi, init):
        nonlocal offset
        blocks.append(Block(name, offset, length, lo, hi, init))
        offset += length

    add("u", N * n_u, -u_max, u_max, 0.0)
    if spec.variant is ModelVariant.CCCM:
        add("gamma", N * N_CONTACTS, 0.0, np.inf, 0.0)
        add("s", N, 0.0, np.inf, 0.0)
    elif spec.variant is ModelVariant.VSCM:
        add("k", N, 0.0, spec.k, spec.k)
    return DecisionSchema(spec.variant, N, n_u, tuple(blocks))


def virtual_force_schedule(spec: ContactModelSpec, schema: DecisionSchema, decision, phi) -> np.ndarray:
    """Per-step virtual force magnitude given the recorded distances ``phi``.

    The rollout applies the same law at every substep; this gives the value
    at each recorded (end-of-step) distance.
    """
    if schema.variant is not spec.variant:
        raise SchemaMismatch("schema was built for a different contact model")
    parts = schema.split(decision)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (schema.n_steps,):
        raise SchemaMismatch("phi must have one entry per control step")
    if spec.variant is ModelVariant.CCCM:
        return parts["gamma"].copy()
    if spec.variant is ModelVariant.SCM:
        return np.asarray(_smooth(np.full(phi.shape, spec.k), spec.c, phi))
    return np.asarray(_smooth(parts["k"], spec.c, phi))
