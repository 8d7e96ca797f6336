"""Jitted shadow/block kernel.

Same geometry as the numpy reference in :mod:`heliotower.solar`
(project neighbour mirror rectangles along the sun ray / the reflected ray
onto the mirror plane, clip against the mirror, accumulate areas), written
as scalar loops so numba can run all time samples in parallel.  Import is
optional; callers fall back to the numpy path when numba is missing.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_EPS_GRAZE = 1e-6
_EPS_SIDE = 1e-9


@njit(cache=True, fastmath=False)
def _clip_area(qx, qy, hh, hv):
    """Area of a convex quad clipped to [-hh, hh] x [-hv, hv]."""
    px = np.empty(12)
    py = np.empty(12)
    ox = np.empty(12)
    oy = np.empty(12)
    for k in range(4):
        px[k] = qx[k]
        py[k] = qy[k]
    cnt = 4
    for plane in range(4):
        if plane == 0:
            use_x, sgn, bnd = True, 1.0, hh
        elif plane == 1:
            use_x, sgn, bnd = True, -1.0, hh
        elif plane == 2:
            use_x, sgn, bnd = False, 1.0, hv
        else:
            use_x, sgn, bnd = False, -1.0, hv
        ocnt = 0
        for k in range(cnt):
            k2 = k + 1 if k + 1 < cnt else 0
            if use_x:
                c1 = sgn * px[k]
                c2 = sgn * px[k2]
            else:
                c1 = sgn * py[k]
                c2 = sgn * py[k2]
            in1 = c1 <= bnd
            in2 = c2 <= bnd
            if in1 and in2:
                ox[ocnt] = px[k2]
                oy[ocnt] = py[k2]
                ocnt += 1
            elif in1 or in2:
                t = (bnd - c1) / (c2 - c1)
                ix = px[k] + t * (px[k2] - px[k])
                iy = py[k] + t * (py[k2] - py[k])
                ox[ocnt] = ix
                oy[ocnt] = iy
                ocnt += 1
                if in2:
                    ox[ocnt] = px[k2]
                    oy[ocnt] = py[k2]
                    ocnt += 1
        if ocnt == 0:
            return 0.0
        for k in range(ocnt):
            px[k] = ox[k]
            py[k] = oy[k]
        cnt = ocnt
    area = 0.0
    for k in range(cnt):
        k2 = k + 1 if k + 1 < cnt else 0
        area += px[k] * py[k2] - px[k2] * py[k]
    return 0.5 * abs(area)


@njit(cache=True, fastmath=False)
def _frames(pos, beam, sun, normals, us, vs):
    n = pos.shape[0]
    for i in range(n):
        nx = beam[i, 0] + sun[0]
        ny = beam[i, 1] + sun[1]
        nz = beam[i, 2] + sun[2]
        nn = (nx * nx + ny * ny + nz * nz) ** 0.5
        if nn < 1e-12:
            nx, ny, nz = 0.0, 0.0, 1.0
        else:
            nx /= nn
            ny /= nn
            nz /= nn
        ux = -ny
        uy = nx
        un = (ux * ux + uy * uy) ** 0.5
        if un < 1e-12:
            ux, uy = 1.0, 0.0
        else:
            ux /= un
            uy /= un
        # v = n x u (u has no z component)
        vx = -nz * uy
        vy = nz * ux
        vz = nx * uy - ny * ux
        normals[i, 0] = nx
        normals[i, 1] = ny
        normals[i, 2] = nz
        us[i, 0] = ux
        us[i, 1] = uy
        us[i, 2] = 0.0
        vs[i, 0] = vx
        vs[i, 1] = vy
        vs[i, 2] = vz


@njit(cache=True, fastmath=False)
def _occl_pass(pos, normals, us, vs, pair_i, pair_j, dirs_sun, sun, beam,
               delta, dist2, diag2, hh, hv, acc):
    """Accumulate occluded mirror fractions for one ray family.

    dirs_sun selects the per-pair ray: the shared sun vector (shadowing) or
    the front mirror's receiver direction (blocking).
    """
    inv_area = 1.0 / (4.0 * hh * hv)
    qx = np.empty(4)
    qy = np.empty(4)
    for p in range(pair_i.shape[0]):
        i = pair_i[p]
        j = pair_j[p]
        if dirs_sun:
            dx, dy, dz = sun[0], sun[1], sun[2]
        else:
            dx, dy, dz = beam[i, 0], beam[i, 1], beam[i, 2]
        along = delta[p, 0] * dx + delta[p, 1] * dy + delta[p, 2] * dz
        if dist2[p] - along * along > diag2:
            continue
        nix = normals[i, 0]
        niy = normals[i, 1]
        niz = normals[i, 2]
        dn = dx * nix + dy * niy + dz * niz
        adn = dn if dn >= 0.0 else -dn
        if adn <= _EPS_GRAZE:
            continue
        tau_c = delta[p, 0] * nix + delta[p, 1] * niy + delta[p, 2] * niz
        if dn < 0.0:
            tau_c = -tau_c
        if tau_c < -_EPS_SIDE * adn:
            continue
        uix = us[i, 0]
        uiy = us[i, 1]
        uiz = us[i, 2]
        vix = vs[i, 0]
        viy = vs[i, 1]
        viz = vs[i, 2]
        xlo = 1e300
        xhi = -1e300
        ylo = 1e300
        yhi = -1e300
        for c in range(4):
            su = hh if c == 0 or c == 3 else -hh
            sv = hv if c <= 1 else -hv
            # corner of mirror j relative to mirror i's centre
            rx = delta[p, 0] + su * us[j, 0] + sv * vs[j, 0]
            ry = delta[p, 1] + su * us[j, 1] + sv * vs[j, 1]
            rz = delta[p, 2] + su * us[j, 2] + sv * vs[j, 2]
            tau = (rx * nix + ry * niy + rz * niz) / dn
            gx = rx - dx * tau
            gy = ry - dy * tau
            gz = rz - dz * tau
            xi = gx * uix + gy * uiy + gz * uiz
            eta = gx * vix + gy * viy + gz * viz
            qx[c] = xi
            qy[c] = eta
            if xi < xlo:
                xlo = xi
            if xi > xhi:
                xhi = xi
            if eta < ylo:
                ylo = eta
            if eta > yhi:
                yhi = eta
        if xlo >= hh or xhi <= -hh or ylo >= hv or yhi <= -hv:
            continue
        area = _clip_area(qx, qy, hh, hv)
        if area > 0.0:
            acc[i] += area * inv_area


@njit(cache=True, parallel=True, fastmath=False)
def shadow_block_all_samples(pos, beam, sun_vecs, pair_i, pair_j, delta, dist2,
                             bpair_i, bpair_j, bdelta, bdist2, diag2, l_h, l_v):
    """Shadow/block factors (n, T) for every heliostat and time sample."""
    n = pos.shape[0]
    t_count = sun_vecs.shape[0]
    hh = 0.5 * l_h
    hv = 0.5 * l_v
    out = np.empty((n, t_count))
    for t in prange(t_count):
        sun = sun_vecs[t]
        normals = np.empty((n, 3))
        us = np.empty((n, 3))
        vs = np.empty((n, 3))
        _frames(pos, beam, sun, normals, us, vs)
        acc = np.zeros(n)
        _occl_pass(pos, normals, us, vs, pair_i, pair_j, True, sun, beam,
                   delta, dist2, diag2, hh, hv, acc)
        _occl_pass(pos, normals, us, vs, bpair_i, bpair_j, False, sun, beam,
                   bdelta, bdist2, diag2, hh, hv, acc)
        for i in range(n):
            sb = 1.0 - acc[i]
            if sb < 0.0:
                sb = 0.0
            elif sb > 1.0:
                sb = 1.0
            out[i, t] = sb
    return out
