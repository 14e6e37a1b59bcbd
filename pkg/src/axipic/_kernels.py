"""Scalar hot loops for particle handling.

Everything here is written against plain ndarrays so the same code runs
jitted (numba, when importable) or as ordinary Python.  Mesh arrays are
passed in explicitly; nothing in this module touches the Mesh object.

Conventions shared with the rest of the package:
  * vector components are ordered (z, rho, phi), a right-handed cycle,
  * local edge l of a face traverses nodes (l, l+1 mod 3),
  * face_edge_sign flips traversal values onto canonical (low -> high) edges,
  * crossing out of a face through the zero of barycentric coordinate i
    means leaving across local edge (i+1) mod 3.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


@njit(cache=True)
def _bary(grad, cent, f, z, r):
    dz = z - cent[f, 0]
    dr = r - cent[f, 1]
    l0 = 1.0 / 3.0 + grad[f, 0, 0] * dz + grad[f, 0, 1] * dr
    l1 = 1.0 / 3.0 + grad[f, 1, 0] * dz + grad[f, 1, 1] * dr
    l2 = 1.0 / 3.0 + grad[f, 2, 0] * dz + grad[f, 2, 1] * dr
    return l0, l1, l2


@njit(cache=True)
def locate(grad, cent, neigh, z, r, hint, n_faces):
    """Barycentric walk from a hint face; -1 when the point is outside."""
    f = hint
    if f < 0 or f >= n_faces:
        f = 0
    for _ in range(4 * n_faces + 8):
        l0, l1, l2 = _bary(grad, cent, f, z, r)
        lmin = l0
        imin = 0
        if l1 < lmin:
            lmin = l1
            imin = 1
        if l2 < lmin:
            lmin = l2
            imin = 2
        if lmin >= -1e-12:
            return f
        nxt = neigh[f, (imin + 1) % 3]
        if nxt < 0:
            return -1
        f = nxt
    return -1


@njit(cache=True)
def gather(pos, face, e_full, d_face, b_face, h_full,
           grad, cent, neigh, eof, sign,
           inv_area, eps_phi_area, mu_z, mu_rho,
           n_faces, out_E, out_B):
    """Fields at particle positions; face hints are refreshed in place.

    e_full/h_full are full-mesh canonical edge values, d_face and b_face
    per-face values (b_face already time-averaged by the caller).  Lost
    particles (face -1) get zero fields.
    """
    lam = np.empty(3)
    for p in range(pos.shape[0]):
        f = locate(grad, cent, neigh, pos[p, 0], pos[p, 1], face[p], n_faces)
        face[p] = f
        if f < 0:
            for c in range(3):
                out_E[p, c] = 0.0
                out_B[p, c] = 0.0
            continue
        l0, l1, l2 = _bary(grad, cent, f, pos[p, 0], pos[p, 1])
        lam[0] = l0
        lam[1] = l1
        lam[2] = l2
        ez = 0.0
        er = 0.0
        hz = 0.0
        hr = 0.0
        for l in range(3):
            q = (l + 1) % 3
            s = sign[f, l]
            wz = s * (lam[l] * grad[f, q, 0] - lam[q] * grad[f, l, 0])
            wr = s * (lam[l] * grad[f, q, 1] - lam[q] * grad[f, l, 1])
            e = eof[f, l]
            ez += e_full[e] * wz
            er += e_full[e] * wr
            hz += h_full[e] * wz
            hr += h_full[e] * wr
        out_E[p, 0] = ez
        out_E[p, 1] = er
        out_E[p, 2] = d_face[f] / eps_phi_area[f]
        out_B[p, 0] = mu_z[f] * hz
        out_B[p, 1] = mu_rho[f] * hr
        out_B[p, 2] = b_face[f] * inv_area[f]


@njit(cache=True)
def push(vel, E, B, s_arr):
    """Implicit-midpoint rotation push: v+ solves the averaged Lorentz force.

    s_arr holds Q dt / m per particle.  Writing N = I + (s/2)[Bx], the
    update is v+ = N^-1 (N^T v- + s E) with the closed-form inverse
    (I + [cx])^-1 x = (x - c x x + c (c.x)) / (1 + |c|^2).
    """
    for p in range(vel.shape[0]):
        s = s_arr[p]
        cz = 0.5 * s * B[p, 0]
        cr = 0.5 * s * B[p, 1]
        cp = 0.5 * s * B[p, 2]
        vz = vel[p, 0]
        vr = vel[p, 1]
        vp = vel[p, 2]
        rz = vz - (cr * vp - cp * vr) + s * E[p, 0]
        rr = vr - (cp * vz - cz * vp) + s * E[p, 1]
        rp = vp - (cz * vr - cr * vz) + s * E[p, 2]
        cdotr = cz * rz + cr * rr + cp * rp
        denom = 1.0 + cz * cz + cr * cr + cp * cp
        vel[p, 0] = (rz - (cr * rp - cp * rr) + cz * cdotr) / denom
        vel[p, 1] = (rr - (cp * rz - cz * rp) + cr * cdotr) / denom
        vel[p, 2] = (rp - (cz * rr - cr * rz) + cp * cdotr) / denom


@njit(cache=True)
def _accumulate(eof, sign, f, ls0, ls1, ls2, le0, le1, le2, qdt, j_out):
    # Exact path integral of the edge basis along a straight in-face segment:
    # the midpoint value of a linear function times the linear increment.
    m0 = 0.5 * (ls0 + le0)
    m1 = 0.5 * (ls1 + le1)
    m2 = 0.5 * (ls2 + le2)
    d0 = le0 - ls0
    d1 = le1 - ls1
    d2 = le2 - ls2
    j_out[eof[f, 0]] += qdt * sign[f, 0] * (m0 * d1 - m1 * d0)
    j_out[eof[f, 1]] += qdt * sign[f, 1] * (m1 * d2 - m2 * d1)
    j_out[eof[f, 2]] += qdt * sign[f, 2] * (m2 * d0 - m0 * d2)


@njit(cache=True)
def deposit_segment(grad, cent, neigh, eof, sign, f, z0, r0, z1, r1, qdt, j_out):
    """Charge-conserving deposit of one straight segment, crossing faces.

    Splits the path at each face boundary and accumulates the Whitney
    circulation increments; returns the face containing the endpoint, or
    -1 if the path left the mesh (deposits stop at the boundary).
    """
    az = z0
    ar = r0
    for _ in range(256):
        la0, la1, la2 = _bary(grad, cent, f, az, ar)
        lb0, lb1, lb2 = _bary(grad, cent, f, z1, r1)
        tmin = 2.0
        imin = -1
        if lb0 < -1e-14 and la0 > lb0:
            t = la0 / (la0 - lb0)
            if t < tmin:
                tmin = t
                imin = 0
        if lb1 < -1e-14 and la1 > lb1:
            t = la1 / (la1 - lb1)
            if t < tmin:
                tmin = t
                imin = 1
        if lb2 < -1e-14 and la2 > lb2:
            t = la2 / (la2 - lb2)
            if t < tmin:
                tmin = t
                imin = 2
        if imin < 0:
            _accumulate(eof, sign, f, la0, la1, la2, lb0, lb1, lb2, qdt, j_out)
            return f
        if tmin < 0.0:
            tmin = 0.0
        lc0 = la0 + tmin * (lb0 - la0)
        lc1 = la1 + tmin * (lb1 - la1)
        lc2 = la2 + tmin * (lb2 - la2)
        _accumulate(eof, sign, f, la0, la1, la2, lc0, lc1, lc2, qdt, j_out)
        nxt = neigh[f, (imin + 1) % 3]
        if nxt < 0:
            return -1
        az = az + tmin * (z1 - az)
        ar = ar + tmin * (r1 - ar)
        f = nxt
    return f


@njit(cache=True)
def move(pos, vel, face, charge, dt,
         grad, cent, neigh, eof, sign,
         z_min, z_max, periodic, rho_wall, rho_reflect,
         n_faces, j_out, do_deposit):
    """Advance positions by dt with z wrap and rho reflections.

    The step is cut into straight sub-segments at every wall event; with
    do_deposit each sub-segment feeds the charge-conserving deposit into
    j_out (full edge layout), otherwise only the face hint is tracked.
    Reflections flip v_rho in place.  A particle whose walk leaves the mesh
    through an unhandled boundary is marked lost (face -1) and frozen.
    """
    for p in range(pos.shape[0]):
        f = face[p]
        if f < 0:
            continue
        z = pos[p, 0]
        r = pos[p, 1]
        vz = vel[p, 0]
        vr = vel[p, 1]
        remaining = dt
        qdt = charge[p] / dt
        for _ in range(16):
            tbest = remaining
            wall = 0
            if periodic:
                if vz > 0.0:
                    t = (z_max - z) / vz
                    if t < tbest:
                        tbest = t
                        wall = 1
                elif vz < 0.0:
                    t = (z_min - z) / vz
                    if t < tbest:
                        tbest = t
                        wall = 2
            if vr < 0.0:
                t = (rho_wall - r) / vr
                if t < tbest:
                    tbest = t
                    wall = 3
            elif vr > 0.0 and rho_reflect > rho_wall:
                t = (rho_reflect - r) / vr
                if t < tbest:
                    tbest = t
                    wall = 4
            z1 = z + tbest * vz
            r1 = r + tbest * vr
            if wall == 1:
                z1 = z_max
            elif wall == 2:
                z1 = z_min
            elif wall == 3:
                r1 = rho_wall
            elif wall == 4:
                r1 = rho_reflect
            if do_deposit:
                f = deposit_segment(grad, cent, neigh, eof, sign,
                                    f, z, r, z1, r1, qdt, j_out)
            else:
                f = locate(grad, cent, neigh, z1, r1, f, n_faces)
            z = z1
            r = r1
            remaining -= tbest
            if f < 0 or wall == 0 or remaining <= 0.0:
                break
            if wall == 1:
                z = z_min
                f = locate(grad, cent, neigh, z, r, f, n_faces)
            elif wall == 2:
                z = z_max
                f = locate(grad, cent, neigh, z, r, f, n_faces)
            else:
                vr = -vr
            if f < 0:
                break
        pos[p, 0] = z
        pos[p, 1] = r
        vel[p, 1] = vr
        face[p] = f


@njit(cache=True)
def _shape_value(z, r, zp, rp, inv_h, inv_alpha, m_order):
    uz = (z - zp) * inv_h
    if uz <= -1.0 or uz >= 1.0:
        return 0.0
    ur = (r - rp) * inv_h
    if ur <= -1.0 or ur >= 1.0:
        return 0.0
    pz = 1.0 - uz * uz
    pr = 1.0 - ur * ur
    vz = 1.0
    vr = 1.0
    for _ in range(m_order):
        vz *= pz
        vr *= pr
    return vz * vr * inv_alpha * inv_alpha


@njit(cache=True)
def _quad_triangle(ax, ay, bx, by, cx, cy, qp, qw,
                   zp, rp, inv_h, inv_alpha, m_order):
    area = 0.5 * abs((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))
    if area == 0.0:
        return 0.0
    total = 0.0
    for q in range(qp.shape[0]):
        zq = qp[q, 0] * ax + qp[q, 1] * bx + qp[q, 2] * cx
        rq = qp[q, 0] * ay + qp[q, 1] * by + qp[q, 2] * cy
        total += qw[q] * _shape_value(zq, rq, zp, rp, inv_h, inv_alpha, m_order)
    return area * total


@njit(cache=True)
def _clip_halfplane(src, nsrc, dst, axis, bound, keep_below):
    ndst = 0
    for i in range(nsrc):
        j = (i + 1) % nsrc
        ci = src[i, axis]
        cj = src[j, axis]
        if keep_below:
            ini = ci <= bound
            inj = cj <= bound
        else:
            ini = ci >= bound
            inj = cj >= bound
        if ini:
            dst[ndst, 0] = src[i, 0]
            dst[ndst, 1] = src[i, 1]
            ndst += 1
        if ini != inj:
            t = (bound - ci) / (cj - ci)
            dst[ndst, 0] = src[i, 0] + t * (src[j, 0] - src[i, 0])
            dst[ndst, 1] = src[i, 1] + t * (src[j, 1] - src[i, 1])
            ndst += 1
    return ndst


@njit(cache=True)
def ring_deposit(mid, vel, face, charge, tri, bbox, qp, qw,
                 alpha, h_support, m_order, j_out):
    """Azimuthal current deposit with the compact polynomial shape.

    For each particle the shape S (unit integral, square support of
    half-width h_support) is integrated exactly over every overlapped
    face: faces inside the support box use the quadrature directly; faces
    crossing its boundary are clipped to the box first, so the rule only
    ever sees the polynomial part of S.  j_out[k] accumulates
    Q v_phi * integral_k S dA (flux form, same layout as d).
    """
    inv_h = 1.0 / h_support
    inv_alpha = 1.0 / alpha
    poly = np.empty((16, 2))
    tmp = np.empty((16, 2))
    for p in range(mid.shape[0]):
        if face[p] < 0:
            continue
        qv = charge[p] * vel[p, 2]
        if qv == 0.0:
            continue
        zp = mid[p, 0]
        rp = mid[p, 1]
        zlo = zp - h_support
        zhi = zp + h_support
        rlo = rp - h_support
        rhi = rp + h_support
        for f in range(tri.shape[0]):
            if (bbox[f, 0] > zhi or bbox[f, 1] < zlo
                    or bbox[f, 2] > rhi or bbox[f, 3] < rlo):
                continue
            inside = True
            for v in range(3):
                tz = tri[f, v, 0]
                tr = tri[f, v, 1]
                if tz < zlo or tz > zhi or tr < rlo or tr > rhi:
                    inside = False
                    break
            if inside:
                j_out[f] += qv * _quad_triangle(
                    tri[f, 0, 0], tri[f, 0, 1], tri[f, 1, 0], tri[f, 1, 1],
                    tri[f, 2, 0], tri[f, 2, 1], qp, qw,
                    zp, rp, inv_h, inv_alpha, m_order)
                continue
            for v in range(3):
                poly[v, 0] = tri[f, v, 0]
                poly[v, 1] = tri[f, v, 1]
            n = 3
            n = _clip_halfplane(poly, n, tmp, 0, zlo, False)
            n = _clip_halfplane(tmp, n, poly, 0, zhi, True)
            if n < 3:
                continue
            n = _clip_halfplane(poly, n, tmp, 1, rlo, False)
            n = _clip_halfplane(tmp, n, poly, 1, rhi, True)
            if n < 3:
                continue
            total = 0.0
            for k in range(1, n - 1):
                total += _quad_triangle(
                    poly[0, 0], poly[0, 1], poly[k, 0], poly[k, 1],
                    poly[k + 1, 0], poly[k + 1, 1], qp, qw,
                    zp, rp, inv_h, inv_alpha, m_order)
            j_out[f] += qv * total
