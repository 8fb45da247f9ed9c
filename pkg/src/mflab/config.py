"""Experiment configuration: a flat key-value format with bracketed sections.

The format is deliberately tiny so configs diff cleanly and parse without
dependencies::

    scenario = kl-forward
    [system]
    order = first
    N = 16
    sigma = 1.0
    [kernel]
    variant = sine
    kappa = 1.0
    omega = 1.0

Values are scalars or comma-separated lists; ``sigma`` additionally accepts
semicolon-separated matrix rows.  Every referenced value is pushed through
the domain-type constructors before any simulation starts, and the canonical
hash of the parsed content is recorded in every output file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .model import (
    ConstantKernel,
    DeterministicPoint,
    EmpiricalInit,
    GaussBumpKernel,
    GaussianIID,
    InitialLaw,
    Kernel,
    LinearKernel,
    RngPolicy,
    SineKernel,
    SystemParams,
    TimeGrid,
    ZeroKernel,
)

__all__ = ["ExperimentConfig", "parse_config", "load_config", "config_hash"]

KNOWN_SCENARIOS = (
    "zero-kernel-null",
    "dpi-suite",
    "kl-forward",
    "reversed",
    "girsanov-martingale",
    "oracle-validation",
    "concentration",
    "n-sweep",
    "mass-sweep",
    "knn-sanity",
    "mz-check",
    "simulate",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description with desk-scale defaults."""

    scenario: str = "kl-forward"
    # [system]
    order: str = "first"
    N: int = 16
    d: int = 1
    m: float = 1.0
    gamma: float = 1.0
    sigma: tuple = (1.0,)
    # [kernel]
    kernel_variant: str = "sine"
    kappa: float = 1.0
    omega: float = 1.0
    constant_c: tuple = (0.5,)
    slope_a: float = 0.5
    # [init]
    init_law: str = "gaussian"
    init_mean: tuple = (0.0,)
    init_cov: tuple = (1.0,)
    init_point: tuple = (0.0,)
    init_path: str = ""
    # [meanfield]
    M: int = 10_000
    refine_iters: int = 1
    # [integration]
    T: float = 1.0
    dt: float = 1e-3
    # [montecarlo]
    realizations: int = 2000
    master_seed: int = 20240808
    # [sweep]
    sweep_N: tuple = ()
    sweep_m: tuple = ()
    sweep_T: tuple = ()
    sweep_eta: tuple = ()
    # [output]
    directory: str = "out"
    formats: tuple = ("csv", "json", "png")

    # ---- builders ---------------------------------------------------------

    def build_kernel(self) -> Kernel:
        v = self.kernel_variant
        if v == "zero":
            return ZeroKernel()
        if v == "constant":
            return ConstantKernel(list(self.constant_c))
        if v == "sine":
            return SineKernel(kappa=self.kappa, omega=self.omega)
        if v == "bump":
            return GaussBumpKernel(kappa=self.kappa)
        if v == "linear":
            return LinearKernel(a=self.slope_a)
        raise ConfigError(f"unknown kernel variant {v!r}")

    def build_params(self) -> SystemParams:
        sig = _sigma_matrix(self.sigma, self.d)
        return SystemParams(d=self.d, d_prime=sig.shape[1], sigma=sig,
                            m=self.m, gamma=self.gamma)

    def build_grid(self) -> TimeGrid:
        return TimeGrid(T=self.T, dt=self.dt)

    def build_init(self) -> InitialLaw:
        sdim = self.d if self.order == "first" else 2 * self.d
        if self.init_law == "gaussian":
            mean = _fit_vector(self.init_mean, sdim, "init mean")
            cov = np.array(self.init_cov, dtype=np.float64)
            if cov.size == 1:
                cov = float(cov[0])
            elif cov.size == sdim:
                cov = cov
            else:
                raise ConfigError("init covariance must be scalar or diagonal")
            return GaussianIID(mean, cov)
        if self.init_law == "point":
            return DeterministicPoint(_fit_vector(self.init_point, sdim, "init point"))
        if self.init_law == "file":
            if not self.init_path:
                raise ConfigError("file initial law needs a path")
            return EmpiricalInit(self.init_path)
        raise ConfigError(f"unknown initial law {self.init_law!r}")

    def build_rng(self) -> RngPolicy:
        return RngPolicy(master_seed=self.master_seed)

    def validate(self) -> "ExperimentConfig":
        """Run every block through its domain constructor; fail early."""
        if self.scenario not in KNOWN_SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.order not in ("first", "second"):
            raise ConfigError("order must be 'first' or 'second'")
        if self.N < 1:
            raise ConfigError("N must be positive")
        if self.M < 100:
            raise ConfigError("mean-field cloud needs M >= 100")
        if self.realizations < 1:
            raise ConfigError("need at least one realization")
        self.build_kernel()
        self.build_params()
        self.build_grid()
        self.build_init()
        self.build_rng()
        return self

    def canonical_dict(self) -> dict:
        out = {}
        for name in sorted(self.__dataclass_fields__):
            val = getattr(self, name)
            if isinstance(val, tuple):
                val = list(val)
            out[name] = val
        return out

    def with_overrides(self, **kv) -> "ExperimentConfig":
        return replace(self, **kv).validate()


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.canonical_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _fit_vector(values, sdim, what) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.size == 1:
        return np.full(sdim, float(arr[0]))
    if arr.size != sdim:
        raise ConfigError(f"{what} has length {arr.size}, expected {sdim}")
    return arr


def _sigma_matrix(spec: tuple, d: int) -> np.ndarray:
    if isinstance(spec, tuple) and spec and isinstance(spec[0], tuple):
        mat = np.array([list(row) for row in spec], dtype=np.float64)
        if mat.shape[0] != d:
            raise ConfigError("sigma row count must equal d")
        return mat
    arr = np.array(spec, dtype=np.float64)
    if arr.size == 1:
        return float(arr[0]) * np.eye(d)
    if arr.size == d:
        return np.diag(arr)
    raise ConfigError("sigma must be a scalar, a diagonal of length d, or matrix rows")


def _scalar(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _value(text: str):
    text = text.strip()
    if ";" in text:
        return tuple(
            tuple(_scalar(x) for x in row.split(",") if x.strip())
            for row in text.split(";")
            if row.strip()
        )
    if "," in text:
        return tuple(_scalar(x) for x in text.split(",") if x.strip())
    return _scalar(text)


_FIELD_MAP = {
    ("", "scenario"): "scenario",
    ("experiment", "scenario"): "scenario",
    ("system", "order"): "order",
    ("system", "n"): "N",
    ("system", "d"): "d",
    ("system", "m"): "m",
    ("system", "gamma"): "gamma",
    ("system", "sigma"): "sigma",
    ("kernel", "variant"): "kernel_variant",
    ("kernel", "kappa"): "kappa",
    ("kernel", "omega"): "omega",
    ("kernel", "c"): "constant_c",
    ("kernel", "a"): "slope_a",
    ("init", "law"): "init_law",
    ("init", "mean"): "init_mean",
    ("init", "cov"): "init_cov",
    ("init", "point"): "init_point",
    ("init", "path"): "init_path",
    ("meanfield", "m"): "M",
    ("meanfield", "refine_iters"): "refine_iters",
    ("integration", "t"): "T",
    ("integration", "dt"): "dt",
    ("montecarlo", "realizations"): "realizations",
    ("montecarlo", "master_seed"): "master_seed",
    ("sweep", "n"): "sweep_N",
    ("sweep", "m"): "sweep_m",
    ("sweep", "t"): "sweep_T",
    ("sweep", "eta"): "sweep_eta",
    ("output", "directory"): "directory",
    ("output", "formats"): "formats",
}

_TUPLE_FIELDS = {
    "sigma", "constant_c", "init_mean", "init_cov", "init_point",
    "sweep_N", "sweep_m", "sweep_T", "sweep_eta", "formats",
}

_FLOAT_TUPLES = {
    "sigma", "constant_c", "init_mean", "init_cov", "init_point",
    "sweep_m", "sweep_T", "sweep_eta",
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse the sectioned key-value format and validate the result."""
    section = ""
    fields: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        lookup = (section, key.strip().lower())
        if lookup not in _FIELD_MAP:
            raise ConfigError(f"line {lineno}: unknown key {key.strip()!r} in section [{section}]")
        name = _FIELD_MAP[lookup]
        parsed = _value(val)
        if name in _TUPLE_FIELDS and not isinstance(parsed, tuple):
            parsed = (parsed,)
        if name in _FLOAT_TUPLES and isinstance(parsed, tuple) and parsed and not isinstance(parsed[0], tuple):
            parsed = tuple(float(x) for x in parsed)
        if name == "sweep_N":
            parsed = tuple(int(x) for x in parsed)
        fields[name] = parsed
    return ExperimentConfig(**fields).validate()


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
