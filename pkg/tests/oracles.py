"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: plain Python loops over cells and
directions, no vectorization, no code shared with the package paths they
check.
"""

from __future__ import annotations

import numpy as np

# D2Q9 constants restated independently (loop-friendly tuples).
DIRS = ((0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1))
WEIGHTS = (4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36)
OPPOSITE = (0, 3, 4, 1, 2, 7, 8, 5, 6)
CS2 = 1.0 / 3.0


def scalar_equilibrium(rho: float, ux: float, uy: float) -> list[float]:
    """Second-order BGK equilibrium, evaluated direction by direction."""
    out = []
    usq = (ux * ux + uy * uy) / (2.0 * CS2)
    for i in range(9):
        cu = (DIRS[i][0] * ux + DIRS[i][1] * uy) / CS2
        out.append(WEIGHTS[i] * rho * (1.0 + cu + 0.5 * cu * cu - usq))
    return out


def scalar_macroscopics(f: np.ndarray, x: int, y: int) -> tuple[float, float, float]:
    rho = 0.0
    mx = 0.0
    my = 0.0
    for i in range(9):
        rho += f[x, y, i]
        mx += DIRS[i][0] * f[x, y, i]
        my += DIRS[i][1] * f[x, y, i]
    if rho == 0.0:
        return rho, 0.0, 0.0
    return rho, mx / rho, my / rho


def scalar_collide(f: np.ndarray, tau: float) -> np.ndarray:
    nx, ny, _ = f.shape
    out = np.zeros_like(f)
    for x in range(nx):
        for y in range(ny):
            rho, ux, uy = scalar_macroscopics(f, x, y)
            feq = scalar_equilibrium(rho, ux, uy)
            for i in range(9):
                out[x, y, i] = f[x, y, i] + (feq[i] - f[x, y, i]) / tau
    return out


def scalar_stream(f: np.ndarray, solid: np.ndarray) -> np.ndarray:
    """Toroidal streaming with half-way bounce-back, solid cells zeroed."""
    nx, ny, _ = f.shape
    out = np.zeros_like(f)
    for x in range(nx):
        for y in range(ny):
            if solid[x, y]:
                continue
            out[x, y, 0] += f[x, y, 0]
            for i in range(1, 9):
                cx, cy = DIRS[i]
                tx, ty = (x + cx) % nx, (y + cy) % ny
                if solid[tx, ty]:
                    out[x, y, OPPOSITE[i]] += f[x, y, i]
                else:
                    out[tx, ty, i] += f[x, y, i]
    return out


def scalar_inlet_outlet(f: np.ndarray, inlet_velocity: float) -> np.ndarray:
    nx, ny, _ = f.shape
    out = f.copy()
    for y in range(ny):
        feq = scalar_equilibrium(1.0, inlet_velocity, 0.0)
        for i in range(9):
            out[0, y, i] = feq[i]
        rho = 0.0
        for i in range(9):
            rho += f[nx - 1, y, i]
        feq = scalar_equilibrium(rho, inlet_velocity, 0.0)
        for i in range(9):
            out[nx - 1, y, i] = feq[i]
    return out


def scalar_step(
    f: np.ndarray, solid: np.ndarray, tau: float, inlet_velocity: float, inlet_outlet: bool
) -> np.ndarray:
    out = scalar_collide(f, tau)
    out = scalar_stream(out, solid)
    if inlet_outlet:
        out = scalar_inlet_outlet(out, inlet_velocity)
    return out


def scalar_mse(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for va, vb in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (va - vb) ** 2
    return total / a.size


def scalar_gdl(a: np.ndarray, b: np.ndarray) -> float:
    """Loop form of the gradient difference loss for rank-4 arrays."""
    n, h, w, c = a.shape
    tx = []
    ty = []
    for s in range(n):
        for ch in range(c):
            for x in range(h - 1):
                for y in range(w):
                    da = abs(a[s, x + 1, y, ch] - a[s, x, y, ch])
                    db = abs(b[s, x + 1, y, ch] - b[s, x, y, ch])
                    tx.append((da - db) ** 2)
            for x in range(h):
                for y in range(w - 1):
                    da = abs(a[s, x, y + 1, ch] - a[s, x, y, ch])
                    db = abs(b[s, x, y + 1, ch] - b[s, x, y, ch])
                    ty.append((da - db) ** 2)
    return sum(tx) / len(tx) + sum(ty) / len(ty)


def scalar_adam(theta, g, m, v, t, lr, beta1, beta2, eps):
    """One published Adam update on python floats; returns (theta, m, v)."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return theta - lr * m_hat / (v_hat**0.5 + eps), m, v


def control_volume_drag_x(rho: np.ndarray, u: np.ndarray, nu: float, box) -> float:
    """Streamwise force on a body inside `box` from a momentum-flux balance.

    box = (x0, x1, y0, y1), inclusive cell indices of the control surface.
    Steady-flow balance over the control volume: the momentum flux and
    pressure entering minus leaving, plus viscous stress on the faces,
    equals the force on the body. Pressure is cs2 * rho; stresses use
    central differences, so the box must sit in the interior.
    """
    x0, x1, y0, y1 = box

    def p(x, y):
        return CS2 * rho[x, y]

    def tau_xx(x, y):
        dux_dx = (u[x + 1, y, 0] - u[x - 1, y, 0]) / 2.0
        return 2.0 * rho[x, y] * nu * dux_dx

    def tau_xy(x, y):
        dux_dy = (u[x, y + 1, 0] - u[x, y - 1, 0]) / 2.0
        duy_dx = (u[x + 1, y, 1] - u[x - 1, y, 1]) / 2.0
        return rho[x, y] * nu * (dux_dy + duy_dx)

    fx = 0.0
    for y in range(y0, y1 + 1):
        # left face, outward normal -x
        fx += rho[x0, y] * u[x0, y, 0] * u[x0, y, 0] + p(x0, y) - tau_xx(x0, y)
        # right face, outward normal +x
        fx -= rho[x1, y] * u[x1, y, 0] * u[x1, y, 0] + p(x1, y) - tau_xx(x1, y)
    for x in range(x0, x1 + 1):
        # bottom face, outward normal -y
        fx += rho[x, y0] * u[x, y0, 0] * u[x, y0, 1] - tau_xy(x, y0)
        # top face, outward normal +y
        fx -= rho[x, y1] * u[x, y1, 0] * u[x, y1, 1] - tau_xy(x, y1)
    return fx


def finite_difference_check(
    make_loss,
    tensors,
    h: float = 1e-5,
    max_coords: int = 40,
    rtol: float = 1e-5,
    atol: float = 1e-8,
    rng: np.random.Generator | None = None,
):
    """Central-difference gradient check against reverse-mode gradients.

    make_loss() must rebuild the graph from the tensors' current .data.
    Checks up to max_coords coordinates per tensor (all, when small).
    Returns the worst relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    loss = make_loss()
    for t in tensors:
        t.zero_grad()
    loss = make_loss()
    loss.backward()
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        if n <= max_coords:
            flat_indices = np.arange(n)
        else:
            flat_indices = rng.choice(n, size=max_coords, replace=False)
        flat = t.data.reshape(-1)
        for fi in flat_indices:
            orig = flat[fi]
            flat[fi] = orig + h
            lp = make_loss().item()
            flat[fi] = orig - h
            lm = make_loss().item()
            flat[fi] = orig
            fd = (lp - lm) / (2.0 * h)
            ad = grad.reshape(-1)[fi]
            err = abs(fd - ad)
            denom = max(abs(fd), abs(ad))
            if err > atol + rtol * denom:
                raise AssertionError(
                    f"gradient mismatch for {getattr(t, 'name', 'tensor')}[{fi}]: "
                    f"fd={fd:.9g} ad={ad:.9g} err={err:.3g}"
                )
            if denom > 1e-6:
                worst = max(worst, err / denom)
    return worst
