"""Stability constants of the polynomial inequalities behind the Nitsche and ghost penalties.

All three constants are largest generalized eigenvalues of small dense
quadratic forms over tensor-product polynomials of degree ``k``.  Bases are
scaled Legendre polynomials, integrated with Gauss rules that are exact for
the products involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from numpy.polynomial import legendre


def _legendre_1d(k: int, a: float, b: float, x: np.ndarray, order: int = 0) -> np.ndarray:
    """Legendre polynomials ``0..k`` mapped to ``[a, b]``, normalised in ``L2(a, b)``; shape (len(x), k+1)."""
    L = b - a
    t = 2 * (np.asarray(x, dtype=float) - a) / L - 1
    out = np.empty((t.size, k + 1))
    for n in range(k + 1):
        c = np.zeros(n + 1)
        c[n] = 1.0
        if order:
            c = legendre.legder(c, order) * (2 / L) ** order
        out[:, n] = np.sqrt((2 * n + 1) / L) * legendre.legval(t, c)
    return out


def _gauss(n: int, a: float, b: float):
    x, w = legendre.leggauss(n)
    return a + (b - a) * (x + 1) / 2, w * (b - a) / 2


def _largest_eig(A: np.ndarray, B: np.ndarray) -> float:
    return float(sla.eigh(A, B, eigvals_only=True)[-1])


def compute_trace_constant(k: int, cut_fractions=(0.0, 0.25, 0.5), h: float = 1.0) -> float:
    """Smallest ``C`` with ``||phi||^2_E <= C h^-1 ||phi||^2_K`` for all tensor polynomials of degree ``k``.

    ``K`` is the square of side ``h`` and ``E`` ranges over horizontal chords at
    the given fractions of the height; the edge itself is fraction 0.
    """
    if k < 0:
        raise ValueError("degree must be non-negative")
    xq, wq = _gauss(k + 2, 0.0, h)
    Px = _legendre_1d(k, 0.0, h, xq)
    Py = _legendre_1d(k, 0.0, h, xq)
    Mx = (Px * wq[:, None]).T @ Px
    My = (Py * wq[:, None]).T @ Py
    M = np.kron(My, Mx) / h
    best = 0.0
    for f in cut_fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError("cut fractions must lie in [0, 1]")
        py = _legendre_1d(k, 0.0, h, np.array([f * h]))[0]
        E = np.kron(np.outer(py, py), Mx)
        best = max(best, _largest_eig(E, M))
    return best


def _grad_energy(k: int, box, shape_box) -> np.ndarray:
    """Gradient energy on ``box`` of tensor Legendre polynomials living on ``shape_box``, constants dropped."""
    (x0, y0), (x1, y1) = box
    (a0, b0), (a1, b1) = shape_box
    xq, wx = _gauss(k + 2, x0, x1)
    yq, wy = _gauss(k + 2, y0, y1)
    Px, Dx = _legendre_1d(k, a0, a1, xq), _legendre_1d(k, a0, a1, xq, 1)
    Py, Dy = _legendre_1d(k, b0, b1, yq), _legendre_1d(k, b0, b1, yq, 1)
    mass = lambda A, B, w: (A * w[:, None]).T @ B
    A = np.kron(mass(Py, Py, wy), mass(Dx, Dx, wx)) + np.kron(mass(Dy, Dy, wy), mass(Px, Px, wx))
    return A[1:, 1:]


def compute_extension_constants(k: int, size_ratio: float = 1.0, h: float = 1.0) -> tuple[float, float]:
    """``(C_Q, C_F)`` for a cell ``K`` of side ``h`` and a neighbour ``K'`` of side ``size_ratio * h``.

    ``C_Q`` bounds the gradient energy on ``K`` of a polynomial extended from
    ``K'`` by its energy on ``K'``.  ``C_F`` is the tight constant in
    ``||grad w||^2_K <= C_F / 2 h_F^(2k-1) ||d_n^k w||^2_F`` where ``w`` is the
    jump correction ``g(y) x^k / k!`` with ``g`` of degree ``k`` along the
    shared face and ``h_F`` the larger of the two cell sizes.
    """
    if k < 1:
        raise ValueError("degree must be at least 1")
    if size_ratio <= 0:
        raise ValueError("size ratio must be positive")
    r = size_ratio * h
    K = ((0.0, 0.0), (h, h))
    Kp = ((-r, 0.0), (0.0, r))
    C_Q = _largest_eig(_grad_energy(k, K, Kp), _grad_energy(k, Kp, Kp))

    face = min(h, r)
    h_F = max(h, r)
    yq, wy = _gauss(k + 2, 0.0, face)
    G, dG = _legendre_1d(k, 0.0, face, yq), _legendre_1d(k, 0.0, face, yq, 1)
    My = (G * wy[:, None]).T @ G
    Sy = (dG * wy[:, None]).T @ dG
    # int_0^h x^(2k-2) dx / (k-1)!^2 and int_0^h x^(2k) dx / k!^2 for the two gradient components
    cx = h ** (2 * k - 1) / ((2 * k - 1) * math.factorial(k - 1) ** 2)
    cy = h ** (2 * k + 1) / ((2 * k + 1) * math.factorial(k) ** 2)
    A = cx * My + cy * Sy
    C_F = 2.0 * _largest_eig(A, h_F ** (2 * k - 1) * My)
    return C_Q, C_F


@dataclass(frozen=True)
class StabilityConstants:
    k: int
    C_T: float
    C_Q: float
    C_F: float


def constants_table(degrees=(1, 2, 3), size_ratio: float = 1.0) -> list[StabilityConstants]:
    rows = []
    for k in degrees:
        C_Q, C_F = compute_extension_constants(k, size_ratio)
        rows.append(StabilityConstants(k, compute_trace_constant(k), C_Q, C_F))
    return rows


def nondecreasing(values) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) >= -1e-12 * np.abs(v[:-1])))
