"""Residual-based element indicators and error norms against exact solutions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import LaplaceProblem, StabilizationParams, StokesProblem
from .discrete import Discretization

DX, DY, D0 = (1, 0), (0, 1), (0, 0)
DXX, DXY, DYY = (2, 0), (1, 1), (0, 2)


@dataclass
class Indicators:
    """Squared indicators per element with their per-term breakdown."""

    eta_sq: np.ndarray
    terms: dict = field(default_factory=dict)

    @property
    def eta(self) -> np.ndarray:
        return np.sqrt(self.eta_sq)

    @property
    def estimator(self) -> float:
        return float(np.sqrt(self.eta_sq.sum()))


@dataclass
class ErrorReport:
    n_dofs: int
    estimator: float
    err_L2: float = float("nan")
    err_H1: float = float("nan")
    err_energy: float = float("nan")
    err_p_L2: float = float("nan")

    def as_row(self) -> dict:
        return {"n_dofs": self.n_dofs, "err_L2": self.err_L2, "err_H1": self.err_H1,
                "err_energy": self.err_energy, "estimator": self.estimator}


def _bcast(v, n):
    return np.asarray(v, dtype=float) * np.ones(n)


def _indicator_order(disc):
    return disc.k + 2


def laplace_indicators(disc: Discretization, problem: LaplaceProblem, u: np.ndarray,
                       params: StabilizationParams | None = None) -> Indicators:
    k = disc.k
    prm = (params or StabilizationParams()).resolve(k)
    U = disc.local(u)
    h = disc.h
    order = _indicator_order(disc)
    V = disc.volume(order)
    lap = V.evaluate(U, DXX) + V.evaluate(U, DYY)
    r = _bcast(problem.f(V.x[:, 0], V.x[:, 1]), len(V.w)) + lap
    terms = {"volume": h ** 2 * V.element_sums(r ** 2)}
    bd = disc.boundary(order)
    neu = np.zeros(disc.n_el)
    dirich = np.zeros(disc.n_el)
    if len(bd.w):
        x, y = bd.x[:, 0], bd.x[:, 1]
        D = bd.dirichlet
        du = bd.normal_derivative(U)
        uh = bd.evaluate(U)
        if (~D).any():
            q = _bcast(problem.q(x, y, bd.n[:, 0], bd.n[:, 1]), len(x))
            neu = bd.element_sums(np.where(D, 0.0, (q - du) ** 2))
        g = _bcast(problem.g(x, y), len(x))
        dirich = bd.element_sums(np.where(D, (g - uh) ** 2, 0.0))
    terms["neumann"] = h * neu
    terms["nitsche"] = dirich / h
    terms["penalty"] = prm.beta ** 2 * dirich / h
    fr = disc.faces(order)
    if len(fr.w):
        j1 = fr.jump(U, fr.normal_basis("L", 1), fr.normal_basis("R", 1))
        terms["jump"] = fr.to_elements(fr.h_F * fr.face_sums((0.5 * j1) ** 2))
        jk = fr.jump(U, fr.normal_basis("L", k), fr.normal_basis("R", k))
        per_face = prm.gamma_g ** 2 * fr.h_F ** (2 * k - 1) * fr.face_sums((0.5 * jk) ** 2)
        terms["ghost"] = fr.to_elements(per_face, disc.ghost_mask)
    else:
        terms["jump"] = np.zeros(disc.n_el)
        terms["ghost"] = np.zeros(disc.n_el)
    return Indicators(sum(terms.values()), terms)


def _split(disc, sol):
    n = disc.n_dofs
    return sol[:n], sol[n:2 * n], sol[2 * n:]


def _stress_normal(grads, mu, n):
    """``(2 mu sym grad u) n`` from ``grads[i][a] = d u_i / d x_a``."""
    out = []
    for i in range(2):
        out.append(sum(mu * (grads[i][a] + grads[a][i]) * n[a] for a in range(2)))
    return out


def stokes_indicators(disc: Discretization, problem: StokesProblem, sol: np.ndarray,
                      params: StabilizationParams | None = None) -> Indicators:
    k = disc.k
    mu = float(problem.mu)
    prm = (params or StabilizationParams()).resolve(k)
    u1, u2, p = _split(disc, sol)
    U = [disc.local(u1), disc.local(u2)]
    P = disc.local(p)
    h = disc.h
    order = _indicator_order(disc)
    V = disc.volume(order)
    ev = lambda F, d: V.evaluate(F, d)
    fx, fy = problem.f(V.x[:, 0], V.x[:, 1])
    n = len(V.w)
    r1 = _bcast(fx, n) + mu * (2 * ev(U[0], DXX) + ev(U[0], DYY) + ev(U[1], DXY)) - ev(P, DX)
    r2 = _bcast(fy, n) + mu * (ev(U[1], DXX) + 2 * ev(U[1], DYY) + ev(U[0], DXY)) - ev(P, DY)
    div = ev(U[0], DX) + ev(U[1], DY)
    terms = {"volume": h ** 2 / mu * V.element_sums(r1 ** 2 + r2 ** 2), "mass": mu * V.element_sums(div ** 2)}
    bd = disc.boundary(order)
    neu = np.zeros(disc.n_el)
    dirich = np.zeros(disc.n_el)
    if len(bd.w):
        x, y = bd.x[:, 0], bd.x[:, 1]
        D = bd.dirichlet
        nrm = (bd.n[:, 0], bd.n[:, 1])
        grads = [[bd.evaluate(U[i], DX), bd.evaluate(U[i], DY)] for i in range(2)]
        sn = _stress_normal(grads, mu, nrm)
        ph = bd.evaluate(P)
        if (~D).any():
            tx, ty = problem.t(x, y, nrm[0], nrm[1])
            res = (_bcast(tx, len(x)) - sn[0] + ph * nrm[0]) ** 2 + (_bcast(ty, len(x)) - sn[1] + ph * nrm[1]) ** 2
            neu = bd.element_sums(np.where(D, 0.0, res))
        gx, gy = problem.g(x, y)
        res = (_bcast(gx, len(x)) - bd.evaluate(U[0])) ** 2 + (_bcast(gy, len(x)) - bd.evaluate(U[1])) ** 2
        dirich = bd.element_sums(np.where(D, res, 0.0))
    terms["neumann"] = h / mu * neu
    terms["nitsche"] = 9 * mu * dirich / h
    terms["penalty"] = prm.beta ** 2 * mu * dirich / h
    fr = disc.faces(order)
    if len(fr.w):
        nvec = (np.where(fr.pax == 0, 1.0, 0.0), np.where(fr.pax == 1, 1.0, 0.0))
        gL = [[np.einsum("qb,qb->q", U[i][fr.eL], fr.basis("L", d)) for d in (DX, DY)] for i in range(2)]
        gR = [[np.einsum("qb,qb->q", U[i][fr.eR], fr.basis("R", d)) for d in (DX, DY)] for i in range(2)]
        sL = _stress_normal(gL, mu, nvec)
        sR = _stress_normal(gR, mu, nvec)
        jsq = (0.5 * (sL[0] - sR[0])) ** 2 + (0.5 * (sL[1] - sR[1])) ** 2
        per_face = fr.face_sums(jsq) / mu
        terms["jump"] = (np.bincount(fr.left, weights=per_face * h[fr.left], minlength=disc.n_el)
                         + np.bincount(fr.right, weights=per_face * h[fr.right], minlength=disc.n_el))
        BkL, BkR = fr.normal_basis("L", k), fr.normal_basis("R", k)
        ju = sum((0.5 * fr.jump(U[i], BkL, BkR)) ** 2 for i in range(2))
        terms["ghost"] = fr.to_elements(mu * prm.gamma_g ** 2 * fr.h_F ** (2 * k - 1) * fr.face_sums(ju),
                                        disc.ghost_mask)
        jp = (0.5 * fr.jump(P, BkL, BkR)) ** 2
        terms["skeleton"] = fr.to_elements(prm.gamma_s ** 2 / mu * fr.h_F ** (2 * k + 1) * fr.face_sums(jp))
    else:
        for key in ("jump", "ghost", "skeleton"):
            terms[key] = np.zeros(disc.n_el)
    return Indicators(sum(terms.values()), terms)


def _error_order(disc):
    return disc.k + 3


def laplace_errors(disc: Discretization, exact, u: np.ndarray, params: StabilizationParams | None = None):
    """L2, H1-seminorm and energy-norm errors; ``exact`` provides ``value`` and ``grad``."""
    k = disc.k
    prm = (params or StabilizationParams()).resolve(k)
    U = disc.local(u)
    V = disc.volume(_error_order(disc))
    x, y = V.x[:, 0], V.x[:, 1]
    e = V.evaluate(U) - exact.value(x, y)
    gx, gy = exact.grad(x, y)
    ex, ey = V.evaluate(U, DX) - gx, V.evaluate(U, DY) - gy
    l2 = float(np.sum(V.w * e ** 2))
    h1 = float(np.sum(V.w * (ex ** 2 + ey ** 2)))
    energy = h1
    bd = disc.boundary(_error_order(disc))
    if len(bd.w):
        D = bd.dirichlet
        bx, by = bd.x[:, 0], bd.x[:, 1]
        eb = bd.evaluate(U) - exact.value(bx, by)
        gbx, gby = exact.grad(bx, by)
        en = bd.normal_derivative(U) - (gbx * bd.n[:, 0] + gby * bd.n[:, 1])
        bt = prm.beta / bd.h
        energy += float(np.sum(np.where(D, bd.w * (en ** 2 / bt + bt * eb ** 2), 0.0)))
    energy += _ghost_seminorm(disc, [U], prm.gamma_g, 2 * k - 1, disc.ghost_mask)
    return {"err_L2": np.sqrt(l2), "err_H1": np.sqrt(h1), "err_energy": np.sqrt(energy)}


def _ghost_seminorm(disc, fields, gamma, power, mask):
    fr = disc.faces()
    if len(fr.w) == 0:
        return 0.0
    k = disc.k
    BL, BR = fr.normal_basis("L", k), fr.normal_basis("R", k)
    per_face = sum(fr.face_sums(fr.jump(F, BL, BR) ** 2) for F in fields)
    per_face = gamma * fr.h_F ** power * per_face
    if mask is not None:
        per_face = per_face[mask]
    return float(per_face.sum())


def stokes_errors(disc: Discretization, exact, sol: np.ndarray, mu: float = 1.0,
                  params: StabilizationParams | None = None):
    """Velocity L2/H1-seminorm, pressure L2 and energy-norm errors."""
    k = disc.k
    prm = (params or StabilizationParams()).resolve(k)
    u1, u2, p = _split(disc, sol)
    U = [disc.local(u1), disc.local(u2)]
    P = disc.local(p)
    V = disc.volume(_error_order(disc))
    x, y = V.x[:, 0], V.x[:, 1]
    ue = exact.velocity(x, y)
    ge = exact.velocity_grad(x, y)
    l2 = sum(np.sum(V.w * (V.evaluate(U[i]) - ue[i]) ** 2) for i in range(2))
    G = [[V.evaluate(U[i], d) - ge[i][a] for a, d in enumerate((DX, DY))] for i in range(2)]
    h1 = sum(np.sum(V.w * G[i][a] ** 2) for i in range(2) for a in range(2))
    sym = np.sum(V.w * (G[0][0] ** 2 + G[1][1] ** 2 + 0.5 * (G[0][1] + G[1][0]) ** 2))
    ep = V.evaluate(P) - exact.pressure(x, y)
    pl2 = float(np.sum(V.w * ep ** 2))
    energy = mu * sym + pl2 / mu
    bd = disc.boundary(_error_order(disc))
    if len(bd.w):
        D = bd.dirichlet
        bx, by = bd.x[:, 0], bd.x[:, 1]
        ub = exact.velocity(bx, by)
        gb = exact.velocity_grad(bx, by)
        bt = prm.beta / bd.h
        for i in range(2):
            eb = bd.evaluate(U[i]) - ub[i]
            en = bd.normal_derivative(U[i]) - (gb[i][0] * bd.n[:, 0] + gb[i][1] * bd.n[:, 1])
            energy += mu * float(np.sum(np.where(D, bd.w * (en ** 2 / bt + bt * eb ** 2), 0.0)))
    energy += mu * _ghost_seminorm(disc, U, prm.gamma_g, 2 * k - 1, disc.ghost_mask)
    energy += _ghost_seminorm(disc, [P], prm.gamma_s, 2 * k + 1, None) / mu
    return {"err_L2": float(np.sqrt(l2)), "err_H1": float(np.sqrt(h1)),
            "err_energy": float(np.sqrt(energy)), "err_p_L2": float(np.sqrt(pl2))}
