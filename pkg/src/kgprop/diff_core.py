"""Parameter storage, optimizers and the finite-difference gradient check."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from kgprop.errors import DuplicateName, NonFiniteValue, ValidationError

CHECKPOINT_FORMAT = "kgprop-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str = "scaled_uniform"  # "zeros" | "uniform" | "scaled_uniform"
    low: float = -0.1
    high: float = 0.1


def _fans(shape):
    if len(shape) == 1:
        return shape[0], shape[0]
    # leading axes are treated as a stack of independent matrices
    return shape[-1], shape[-2]


class ParamStore:
    """Named float64 tensors with matching gradient buffers.

    Adam moment buffers live here too so a store fully describes optimizer
    state.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise DuplicateName(name)
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore(self.rng_seed)
        for k, v in self.values.items():
            out.values[k] = v.copy()
            out.grads[k] = self.grads[k].copy()
        out.moments = {k: (m.copy(), s.copy()) for k, (m, s) in self.moments.items()}
        out.step_count = self.step_count
        return out

    def load_values(self, other: "ParamStore") -> None:
        for k in self.values:
            self.values[k][...] = other.values[k]

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self.values) != list(other.values):
            return False
        return all(
            a.shape == other.values[k].shape and a.tobytes() == other.values[k].tobytes()
            for k, a in self.values.items()
        )

    def check_finite(self) -> None:
        for k, v in self.values.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteValue(f"parameter {k} is not finite")


def init_params(specs: Iterable[ParamSpec], seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    for spec in specs:
        shape = tuple(int(s) for s in spec.shape)
        if any(s <= 0 for s in shape):
            raise ValidationError(f"{spec.name}: shape {shape} must be positive")
        if spec.init == "zeros":
            value = np.zeros(shape)
        elif spec.init == "uniform":
            value = rng.uniform(spec.low, spec.high, size=shape)
        elif spec.init == "scaled_uniform":
            fan_in, fan_out = _fans(shape)
            c = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-c, c, size=shape)
        else:
            raise ValidationError(f"unknown init kind {spec.init!r}")
        store.add(spec.name, value)
    return store


def _check_grads_finite(store: ParamStore):
    for k, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteValue(f"gradient of {k} is not finite")


def sgd_step(store: ParamStore, lr: float) -> None:
    if lr <= 0:
        raise ValidationError("learning rate must be positive")
    _check_grads_finite(store)
    for k, v in store.values.items():
        v -= lr * store.grads[k]
    store.check_finite()


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int | None = None) -> None:
    """Bias-corrected Adam update. ``t`` defaults to the store's step counter + 1."""
    if lr <= 0:
        raise ValidationError("learning rate must be positive")
    _check_grads_finite(store)
    t = store.step_count + 1 if t is None else t
    store.step_count = t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, v in store.values.items():
        g = store.grads[k]
        if k not in store.moments:
            store.moments[k] = (np.zeros_like(v), np.zeros_like(v))
        m, s = store.moments[k]
        m *= beta1
        m += (1.0 - beta1) * g
        s *= beta2
        s += (1.0 - beta2) * g * g
        v -= lr * (m / c1) / (np.sqrt(s / c2) + eps)
    store.check_finite()


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    max_abs_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)
    passed: bool = True

    @property
    def worst_rel_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def worst_abs_error(self) -> float:
        return max(self.max_abs_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [
            f"{name:24s} n={self.checked[name]:5d} rel={self.max_rel_error[name]:.3e} "
            f"abs={self.max_abs_error[name]:.3e} failing={self.failures[name]}"
            for name in self.max_rel_error
        ]
        lines.append(f"max relative error {self.worst_rel_error:.3e}, max absolute error {self.worst_abs_error:.3e}, "
                     f"failing coordinates {sum(self.failures.values())}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def finite_diff_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-7,
    max_coords: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` must return the scalar loss and leave the analytic gradient in
    ``store.grads`` (it is called once up front with zeroed grads). When a
    store holds more than ``max_coords`` coordinates, a seeded random subset
    of that size is probed, allotted to parameters in proportion to size
    with at least one coordinate each.
    """
    if step <= 0:
        raise ValidationError("step must be positive")
    store.zero_grad()
    base = f(store)
    if not math.isfinite(base):
        raise NonFiniteValue("loss is not finite at the base point")
    analytic = {k: g.copy() for k, g in store.grads.items()}
    names = list(names or store.names())
    total = sum(store.values[k].size for k in names)
    rng = np.random.default_rng(seed)

    report = GradCheckReport()
    for name in names:
        value = store.values[name]
        flat = value.reshape(-1)
        n = flat.size
        if max_coords is not None and total > max_coords:
            quota = max(1, int(round(max_coords * n / total)))
            coords = np.sort(rng.choice(n, size=min(n, quota), replace=False))
        else:
            coords = np.arange(n)
        worst_rel = worst_abs = 0.0
        failing = 0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            plus = f(store)
            flat[idx] = orig - step
            minus = f(store)
            flat[idx] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NonFiniteValue(f"non-finite probe at {name}[{idx}]")
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[idx]
            abs_err = abs(a - numeric)
            scale = max(abs(a), abs(numeric))
            rel_err = abs_err / scale if scale > 0 else 0.0
            # a coordinate fails only when both errors exceed their limits
            if rel_err > rel_tol and abs_err > abs_floor:
                failing += 1
            worst_abs = max(worst_abs, abs_err)
            worst_rel = max(worst_rel, rel_err)
        report.max_rel_error[name] = worst_rel
        report.max_abs_error[name] = worst_abs
        report.checked[name] = len(coords)
        report.failures[name] = failing
        if failing:
            report.passed = False
    # leave the store as the caller handed it over, analytic grads restored
    for k, g in analytic.items():
        store.grads[k][...] = g
    return report


def save_checkpoint(path, store: ParamStore, hyperparameters: dict | None = None) -> None:
    """Versioned JSON. Floats go through ``repr`` so values round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "rng_seed": store.rng_seed,
        "hyperparameters": hyperparameters or {},
        "entries": [
            {"name": k, "shape": list(v.shape), "values": [float(x) for x in v.reshape(-1)]}
            for k, v in store.values.items()
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a kgprop checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    store = ParamStore(doc.get("rng_seed", 0))
    for entry in doc["entries"]:
        values = np.array(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != math.prod(shape):
            raise ValidationError(f"{path}: entry {entry['name']} has wrong size")
        store.add(entry["name"], values.reshape(shape))
    return store, doc.get("hyperparameters", {})
