"""Prediction models used by the buffer controller.

BufferModel maps stream-shape signals (diversity ratio, graph density) to an
expected effective buffer size in statements. CpuModel maps the previous CPU
reading and a statement load to the expected CPU after ingesting that load.
Both are linear in basis-transformed features and are fitted by ordinary
least squares on telemetry.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class FitError(ValueError):
    """Fitting could not produce a usable model."""


# Basis functions for the buffer model's two features. The inverse form
# guards against a zero diversity ratio by clamping the argument.
_SHAPE_BASES = {
    "linear": lambda x: x,
    "quadratic": lambda x: x * x,
    "inverse": lambda x: 1.0 / max(x, 1e-3),
}

# Basis functions for the CPU model. Loads below one statement are clamped
# so the log form stays defined; CPU readings feed the log form the same way.
_CPU_PREV_BASES = {
    "linear": lambda m: m,
    "log": lambda m: math.log(max(m, 1.0)),
    "quadratic": lambda m: m * m,
}
_LOAD_BASES = {
    "log": lambda b: math.log(max(b, 1.0)),
    "linear": lambda b: max(b, 1.0),
    "quadratic": lambda b: max(b, 1.0) ** 2,
}


@dataclass(frozen=True)
class BufferModel:
    """Expected statement volume from diversity and density signals."""

    diversity_coef: float
    density_coef: float
    diversity_basis: str = "linear"
    density_basis: str = "quadratic"
    intercept: float = 0.0

    def __post_init__(self):
        if self.diversity_basis not in _SHAPE_BASES:
            raise ValueError(f"unknown diversity basis {self.diversity_basis!r}")
        if self.density_basis not in _SHAPE_BASES:
            raise ValueError(f"unknown density basis {self.density_basis!r}")


@dataclass(frozen=True)
class CpuModel:
    """Expected CPU percent after ingesting a given statement load."""

    cpu_coef: float
    load_coef: float
    intercept: float
    cpu_basis: str = "linear"
    load_basis: str = "log"

    def __post_init__(self):
        if self.cpu_basis not in _CPU_PREV_BASES:
            raise ValueError(f"unknown cpu basis {self.cpu_basis!r}")
        if self.load_basis not in _LOAD_BASES:
            raise ValueError(f"unknown load basis {self.load_basis!r}")


@dataclass(frozen=True)
class FitReport:
    """In-sample error summary for one fitted model."""

    mae: float
    mse: float
    rmse: float
    n_samples: int
    basis: str


def predict_buffer(diversity: float, dens: float, model: BufferModel) -> float:
    """Expected effective buffer size; never negative."""
    phi1 = _SHAPE_BASES[model.diversity_basis]
    phi2 = _SHAPE_BASES[model.density_basis]
    value = (model.diversity_coef * phi1(diversity)
             + model.density_coef * phi2(dens)
             + model.intercept)
    return max(0.0, value)


def predict_cpu(load: float, cpu_prev: float, model: CpuModel) -> float:
    """Expected CPU percent, clamped to [0, 100]."""
    g = _CPU_PREV_BASES[model.cpu_basis]
    h = _LOAD_BASES[model.load_basis]
    value = model.cpu_coef * g(cpu_prev) + model.load_coef * h(load) + model.intercept
    return min(100.0, max(0.0, value))


# -- fitting -----------------------------------------------------------------


def _report(design: np.ndarray, y: np.ndarray, coefs: np.ndarray,
            basis: str) -> FitReport:
    resid = y - design @ coefs
    mse = float(np.mean(resid ** 2))
    return FitReport(
        mae=float(np.mean(np.abs(resid))),
        mse=mse,
        rmse=math.sqrt(mse),
        n_samples=len(y),
        basis=basis,
    )


def _ols(columns: list[np.ndarray], names: list[str], y: np.ndarray,
         basis: str) -> tuple[np.ndarray, FitReport]:
    """Least squares with an intercept column; rejects degenerate designs."""
    n_coef = len(columns) + 1
    if len(y) < 3 * n_coef:
        raise FitError(
            f"need at least {3 * n_coef} samples to fit {n_coef} "
            f"coefficients, got {len(y)}")
    design = np.column_stack(columns + [np.ones(len(y))])
    coefs, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        bad = _collinear_columns(design, names + ["intercept"])
        raise FitError(f"design matrix is rank deficient; "
                       f"collinear columns: {', '.join(bad)}")
    return coefs, _report(design, y, coefs, basis)


def _collinear_columns(design: np.ndarray, names: list[str]) -> list[str]:
    """Name the columns involved in a rank deficiency."""
    bad = []
    for i in range(design.shape[1]):
        others = np.delete(design, i, axis=1)
        if np.linalg.matrix_rank(others) == np.linalg.matrix_rank(design):
            bad.append(names[i])
    return bad or names


def fit_buffer_model(samples, diversity_basis: str = "linear",
                     density_basis: str = "quadratic"
                     ) -> tuple[BufferModel, FitReport]:
    """Fit (diversity, density) -> statement volume on (x1, x2, y) triples."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise FitError("buffer samples must be (diversity, density, load) triples")
    phi1 = np.vectorize(_SHAPE_BASES[diversity_basis])
    phi2 = np.vectorize(_SHAPE_BASES[density_basis])
    basis = f"{diversity_basis}+{density_basis}"
    coefs, report = _ols(
        [phi1(arr[:, 0]), phi2(arr[:, 1])],
        [f"diversity[{diversity_basis}]", f"density[{density_basis}]"],
        arr[:, 2], basis)
    model = BufferModel(float(coefs[0]), float(coefs[1]),
                        diversity_basis, density_basis, float(coefs[2]))
    return model, report


def fit_cpu_model(samples, cpu_basis: str = "linear", load_basis: str = "log"
                  ) -> tuple[CpuModel, FitReport]:
    """Fit (cpu_prev, load) -> cpu on (cpu_prev, load, cpu) triples."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise FitError("cpu samples must be (cpu_prev, load, cpu) triples")
    g = np.vectorize(_CPU_PREV_BASES[cpu_basis])
    h = np.vectorize(_LOAD_BASES[load_basis])
    basis = f"{cpu_basis}-cpu+{load_basis}-load"
    coefs, report = _ols(
        [g(arr[:, 0]), h(arr[:, 1])],
        [f"cpu_prev[{cpu_basis}]", f"load[{load_basis}]"],
        arr[:, 2], basis)
    model = CpuModel(float(coefs[0]), float(coefs[1]), float(coefs[2]),
                     cpu_basis, load_basis)
    return model, report


# The six CPU model shapes tried during a sweep. One shape appears twice on
# purpose: the sweep mirrors a fixed historical candidate list, duplicate
# included, so ranks line up with it.
CANDIDATE_CPU_BASES: list[tuple[str, str, str]] = [
    ("cpu+log-load", "linear", "log"),
    ("cpu+sq-load", "linear", "quadratic"),
    ("cpu+lin-load", "linear", "linear"),
    ("log-cpu+log-load", "log", "log"),
    ("cpu+log-load-alt", "linear", "log"),
    ("sq-cpu+log-load", "quadratic", "log"),
]


@dataclass(frozen=True)
class SweepEntry:
    tag: str
    model: CpuModel | None
    report: FitReport | None

    @property
    def mse(self) -> float:
        return self.report.mse if self.report else math.inf


def candidate_basis_sweep(samples) -> list[SweepEntry]:
    """Fit every candidate CPU basis and rank by in-sample MSE.

    A basis that fails to fit is kept in the result, ranked last, with no
    model or report attached.
    """
    entries = []
    for tag, g, h in CANDIDATE_CPU_BASES:
        try:
            model, report = fit_cpu_model(samples, g, h)
            entries.append(SweepEntry(tag, model, report))
        except FitError as exc:
            log.warning("basis %s failed to fit: %s", tag, exc)
            entries.append(SweepEntry(tag, None, None))
    entries.sort(key=lambda e: e.mse)
    return entries


# -- presets and persistence -------------------------------------------------

# Published regression fits for the linear-diversity + quadratic-density
# buffer shape, and for the linear-cpu + log-load CPU shape at three CPU
# ceilings. Useful as starting points before telemetry exists.
BUFFER_PRESETS: dict[str, BufferModel] = {
    "reference-fit": BufferModel(0.597, 1.48, "linear", "quadratic", 0.0),
    "inverse-diversity": BufferModel(1.0, 1.0, "inverse", "quadratic", 0.0),
}

CPU_PRESETS: dict[str, CpuModel] = {
    "ceiling-40": CpuModel(0.009, 0.001, 0.541),
    "ceiling-50": CpuModel(0.008, 0.0024, 5.29),
    "ceiling-55": CpuModel(0.09, 0.003, 1.96),
}


def save_models(path: str | Path, buffer_model: BufferModel | None,
                cpu_model: CpuModel | None) -> None:
    """Persist models as plain key=value text."""
    lines = []
    if buffer_model is not None:
        lines += [
            f"buffer.diversity_coef={buffer_model.diversity_coef!r}",
            f"buffer.density_coef={buffer_model.density_coef!r}",
            f"buffer.diversity_basis={buffer_model.diversity_basis}",
            f"buffer.density_basis={buffer_model.density_basis}",
            f"buffer.intercept={buffer_model.intercept!r}",
        ]
    if cpu_model is not None:
        lines += [
            f"cpu.cpu_coef={cpu_model.cpu_coef!r}",
            f"cpu.load_coef={cpu_model.load_coef!r}",
            f"cpu.intercept={cpu_model.intercept!r}",
            f"cpu.cpu_basis={cpu_model.cpu_basis}",
            f"cpu.load_basis={cpu_model.load_basis}",
        ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_models(path: str | Path) -> tuple[BufferModel | None, CpuModel | None]:
    """Inverse of save_models."""
    kv: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    buffer_model = None
    if "buffer.diversity_coef" in kv:
        buffer_model = BufferModel(
            float(kv["buffer.diversity_coef"]),
            float(kv["buffer.density_coef"]),
            kv.get("buffer.diversity_basis", "linear"),
            kv.get("buffer.density_basis", "quadratic"),
            float(kv.get("buffer.intercept", "0.0")),
        )
    cpu_model = None
    if "cpu.cpu_coef" in kv:
        cpu_model = CpuModel(
            float(kv["cpu.cpu_coef"]),
            float(kv["cpu.load_coef"]),
            float(kv["cpu.intercept"]),
            kv.get("cpu.cpu_basis", "linear"),
            kv.get("cpu.load_basis", "log"),
        )
    return buffer_model, cpu_model
