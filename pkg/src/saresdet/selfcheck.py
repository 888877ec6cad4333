"""Built-in oracle suite: gradient checks, transform round trips, brute-force matching and AP micro-cases.

Each check returns ``(actual, expected, tol)``. With a fault injected the named
check's ``actual`` is shifted before comparison, so the report must name it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .detection.loss import set_loss
from .detection.boxes import CellGrid
from .detection.matching import hungarian_match
from .experts import make_expert
from .metrics import average_precision
from .neck import spd, spd_inverse
from .router import gate
from .spectral import dft2, fft2, haar_dwt2, haar_idwt2, ifft2
from .synth import gen_speckle
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tol: float

    def to_record(self) -> dict:
        return {"check": self.name, "passed": self.passed, "error": self.error, "tol": self.tol}


def _grad_error(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    with T.precision("float64"):
        t = Tensor(np.array(x, dtype=np.float64))
        return T.grad_rel_error(T.analytic_grad(f, t), T.finite_diff_grad(f, t))


def check_conv_grad(rng):
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    return _grad_error(lambda x: T.total(T.square(T.conv2d(x, w, padding=1))), rng.normal(size=(1, 2, 5, 5))), 0.0, 1e-4


def check_expert_grads(rng):
    worst = 0.0
    for kind in ("shared", "wavelet", "spatial", "frequency", "hybrid"):
        with T.precision("float64"):
            e = make_expert(kind, 4, np.random.default_rng(1))
        worst = max(worst, _grad_error(lambda x: T.total(T.square(e(x))), rng.normal(size=(1, 4, 4, 4))))
    return worst, 0.0, 1e-4


def check_set_loss_grad(rng):
    grid = CellGrid(np.arange(3.0), np.zeros(3), np.full(3, 8.0), 32)
    gt = [np.array([[0.3, 0.1, 0.2, 0.15]])]
    return _grad_error(lambda r: set_loss(r, gt, grid), rng.normal(scale=0.5, size=(1, 5, 3))), 0.0, 1e-4


def check_fft(rng):
    x = rng.normal(size=(1, 2, 16, 8))
    return float(np.abs(fft2(Tensor(x)).to_complex() - dft2(Tensor(x)).to_complex()).max()), 0.0, 1e-4


def check_fft_roundtrip(rng):
    x = rng.normal(size=(1, 1, 32, 32))
    return float(np.abs(ifft2(fft2(Tensor(x))).data - x).max()), 0.0, 1e-4


def check_haar(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    return float(np.abs(haar_idwt2(haar_dwt2(Tensor(x))).data - x).max()), 0.0, 1e-5


def check_spd(rng):
    x = rng.normal(size=(2, 3, 8, 6)).astype(np.float32)
    return float(np.abs(spd_inverse(spd(Tensor(x))).data - x).max()), 0.0, 0.0


def check_gating(rng):
    renorm = gate(Tensor(np.array([[2.0, 1.0, 0.0, -1.0]])), 1.0, 2).renorm[0]
    return float(renorm[0]), 0.7310585786300049, 1e-4


def check_hungarian(rng):
    worst = 0.0
    for _ in range(50):
        n_pred, n_gt = (int(v) for v in sorted(rng.integers(1, 6, 2))[::-1])
        cost = rng.normal(size=(n_pred, n_gt))
        brute = min(sum(cost[r, c] for c, r in enumerate(rows)) for rows in itertools.permutations(range(n_pred), n_gt))
        worst = max(worst, abs(hungarian_match(cost)[1] - brute))
    return worst, 0.0, 1e-9


def check_ap_cases(rng):
    g = np.array([[0.5, 0.5, 0.2, 0.2]])
    half = average_precision([(np.array([[0.1, 0.1, 0.05, 0.05], g[0]]), [0.9, 0.8])], [g])
    full = average_precision([(g, [0.9])], [g])
    none = average_precision([(np.zeros((0, 4)), [])], [g])
    return abs(half - 0.5) + abs(full - 1.0) + none, 0.0, 1e-9


def check_speckle(rng):
    s = gen_speckle((500, 500), 1.0, 4, seed=0).astype(np.float64)
    return abs(s.var() * 4 - 1), 0.0, 0.05


CHECKS: dict[str, Callable] = {
    "conv_gradient": check_conv_grad,
    "expert_gradients": check_expert_grads,
    "set_loss_gradient": check_set_loss_grad,
    "fft_vs_dft": check_fft,
    "fft_roundtrip": check_fft_roundtrip,
    "haar_roundtrip": check_haar,
    "spd_bijective": check_spd,
    "gating_worked_case": check_gating,
    "hungarian_brute_force": check_hungarian,
    "ap_micro_cases": check_ap_cases,
    "speckle_variance": check_speckle,
}


def run_checks(inject_fault: str | None = None, seed: int = 0) -> list[CheckResult]:
    if inject_fault is not None and inject_fault not in CHECKS:
        raise ValueError(f"unknown check {inject_fault!r}; choose from {sorted(CHECKS)}")
    results = []
    for name, fn in CHECKS.items():
        actual, expected, tol = fn(np.random.default_rng(seed))
        if name == inject_fault:
            actual = actual + max(10 * tol, 1.0)
        err = float(abs(actual - expected))
        results.append(CheckResult(name, err <= tol, err, tol))
    return results
