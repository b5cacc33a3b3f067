"""Compiled hot loops for the tiled rasterizer.

Layout notes shared by all kernels:
  - splat arrays arrive depth-sorted front-to-back (ties already resolved by
    input index); tile lists therefore enumerate splats in blend order
  - screen covariance is packed as (a, b, c) for [[a, b], [b, c]]; `inv_*`
    arrays hold its inverse
  - pixel (ix, iy) samples the image plane exactly at (ix, iy)
  - parallelism is over tiles; a tile owns its pixels (forward) and its CSR
    slice of gradient slots (backward), so outputs are bitwise deterministic
    for any worker count
"""
import numpy as np
from numba import njit, prange

ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_CUTOFF = 1.0 / 255.0


@njit(parallel=True, cache=True)
def project_kernel(centers, quats, scales, rot, trans, fx, fy, cx, cy,
                   width, height, z_near, dilation):
    """Camera transform + EWA screen covariance for a splat batch.

    Returns screen centers, depth, packed covariance, 3-sigma radius, and the
    cull mask (z_near and screen-bbox tests).
    """
    n = centers.shape[0]
    sx = np.zeros(n, dtype=np.float64)
    sy = np.zeros(n, dtype=np.float64)
    depth = np.zeros(n, dtype=np.float64)
    cov_a = np.zeros(n, dtype=np.float64)
    cov_b = np.zeros(n, dtype=np.float64)
    cov_c = np.zeros(n, dtype=np.float64)
    radius = np.zeros(n, dtype=np.float64)
    keep = np.zeros(n, dtype=np.bool_)
    for i in prange(n):
        px = rot[0, 0] * centers[i, 0] + rot[0, 1] * centers[i, 1] + rot[0, 2] * centers[i, 2] + trans[0]
        py = rot[1, 0] * centers[i, 0] + rot[1, 1] * centers[i, 1] + rot[1, 2] * centers[i, 2] + trans[1]
        pz = rot[2, 0] * centers[i, 0] + rot[2, 1] * centers[i, 1] + rot[2, 2] * centers[i, 2] + trans[2]
        if pz <= z_near:
            continue

        qw, qx, qy, qz = quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3]
        qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw /= qn
        qx /= qn
        qy /= qn
        qz /= qn
        r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
        r01 = 2.0 * (qx * qy - qw * qz)
        r02 = 2.0 * (qx * qz + qw * qy)
        r10 = 2.0 * (qx * qy + qw * qz)
        r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
        r12 = 2.0 * (qy * qz - qw * qx)
        r20 = 2.0 * (qx * qz - qw * qy)
        r21 = 2.0 * (qy * qz + qw * qx)
        r22 = 1.0 - 2.0 * (qx * qx + qy * qy)

        # U = R_splat @ T^T; camera-frame covariance = U^T diag(s^2) U
        u00 = r00 * rot[0, 0] + r01 * rot[0, 1] + r02 * rot[0, 2]
        u01 = r00 * rot[1, 0] + r01 * rot[1, 1] + r02 * rot[1, 2]
        u02 = r00 * rot[2, 0] + r01 * rot[2, 1] + r02 * rot[2, 2]
        u10 = r10 * rot[0, 0] + r11 * rot[0, 1] + r12 * rot[0, 2]
        u11 = r10 * rot[1, 0] + r11 * rot[1, 1] + r12 * rot[1, 2]
        u12 = r10 * rot[2, 0] + r11 * rot[2, 1] + r12 * rot[2, 2]
        u20 = r20 * rot[0, 0] + r21 * rot[0, 1] + r22 * rot[0, 2]
        u21 = r20 * rot[1, 0] + r21 * rot[1, 1] + r22 * rot[1, 2]
        u22 = r20 * rot[2, 0] + r21 * rot[2, 1] + r22 * rot[2, 2]
        d0 = scales[i, 0] * scales[i, 0]
        d1 = scales[i, 1] * scales[i, 1]
        d2 = scales[i, 2] * scales[i, 2]
        s00 = d0 * u00 * u00 + d1 * u10 * u10 + d2 * u20 * u20
        s01 = d0 * u00 * u01 + d1 * u10 * u11 + d2 * u20 * u21
        s02 = d0 * u00 * u02 + d1 * u10 * u12 + d2 * u20 * u22
        s11 = d0 * u01 * u01 + d1 * u11 * u11 + d2 * u21 * u21
        s12 = d0 * u01 * u02 + d1 * u11 * u12 + d2 * u21 * u22
        s22 = d0 * u02 * u02 + d1 * u12 * u12 + d2 * u22 * u22

        jx = fx / pz
        jy = fy / pz
        jxz = -fx * px / (pz * pz)
        jyz = -fy * py / (pz * pz)
        a = jx * jx * s00 + 2.0 * jx * jxz * s02 + jxz * jxz * s22 + dilation
        b = jx * jy * s01 + jx * jyz * s02 + jxz * jy * s12 + jxz * jyz * s22
        c = jy * jy * s11 + 2.0 * jy * jyz * s12 + jyz * jyz * s22 + dilation

        mid = 0.5 * (a + c)
        gap = np.sqrt(max(0.25 * (a - c) * (a - c) + b * b, 0.0))
        rad = 3.0 * np.sqrt(max(mid + gap, 0.0))
        csx = jx * px + cx
        csy = jy * py + cy
        if csx + rad < 0.0 or csx - rad > width - 1.0:
            continue
        if csy + rad < 0.0 or csy - rad > height - 1.0:
            continue
        sx[i] = csx
        sy[i] = csy
        depth[i] = pz
        cov_a[i] = a
        cov_b[i] = b
        cov_c[i] = c
        radius[i] = rad
        keep[i] = True
    return sx, sy, depth, cov_a, cov_b, cov_c, radius, keep


@njit(cache=True)
def bin_tiles(sx, sy, radius, tile, ntx, nty):
    """CSR tile lists for depth-sorted splats.

    Splats are appended in iteration order, so each tile's list stays
    front-to-back. Returns (offsets, ids) with offsets length ntx*nty + 1.
    """
    n = sx.shape[0]
    tx0 = np.empty(n, dtype=np.int64)
    tx1 = np.empty(n, dtype=np.int64)
    ty0 = np.empty(n, dtype=np.int64)
    ty1 = np.empty(n, dtype=np.int64)
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    ftile = float(tile)
    for i in range(n):
        x0 = int(np.floor((sx[i] - radius[i]) / ftile))
        x1 = int(np.floor((sx[i] + radius[i]) / ftile))
        y0 = int(np.floor((sy[i] - radius[i]) / ftile))
        y1 = int(np.floor((sy[i] + radius[i]) / ftile))
        tx0[i] = max(x0, 0)
        tx1[i] = min(x1, ntx - 1)
        ty0[i] = max(y0, 0)
        ty1[i] = min(y1, nty - 1)
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    cursor = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for i in range(n):
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                t = ty * ntx + tx
                ids[cursor[t]] = i
                cursor[t] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def forward_kernel(width, height, tile, ntx, nty, offsets, ids,
                   sx, sy, radius, inv_a, inv_b, inv_c, opac, attr,
                   alpha_max, terminate, out, trans):
    """Front-to-back blend of 3-channel attributes; fills out and trans.

    Splat-major sweep: each CSR entry touches only its own cutoff-radius
    bounding box (padded one pixel against boundary rounding). Per pixel the
    blend order is still the list's depth order, and every pixel outside the
    radius sits below the alpha cutoff, so results are identical to a full
    per-pixel scan. out must arrive zeroed and trans all-ones; a pixel whose
    transmittance fell below the cutoff is skipped when terminate is set,
    which matches breaking out of a per-pixel loop.
    """
    for t in prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        x_end = min((tx + 1) * tile, width)
        y_end = min((ty + 1) * tile, height)
        for e in range(offsets[t], offsets[t + 1]):
            s = ids[e]
            rad = radius[s] + 1.0
            rr = rad * rad
            mx = sx[s]
            my = sy[s]
            ia = inv_a[s]
            ib = inv_b[s]
            ic = inv_c[s]
            op = opac[s]
            a0 = attr[s, 0]
            a1 = attr[s, 1]
            a2 = attr[s, 2]
            px0 = max(tx * tile, int(np.ceil(mx - rad)))
            px1 = min(x_end - 1, int(np.floor(mx + rad)))
            py0 = max(ty * tile, int(np.ceil(my - rad)))
            py1 = min(y_end - 1, int(np.floor(my + rad)))
            for py in range(py0, py1 + 1):
                dy = py - my
                for px in range(px0, px1 + 1):
                    tr = trans[py, px]
                    if terminate and tr < TRANSMITTANCE_CUTOFF:
                        continue
                    dx = px - mx
                    if dx * dx + dy * dy > rr:
                        continue
                    q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                    alpha = op * np.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < ALPHA_CUTOFF:
                        continue
                    w = tr * alpha
                    out[py, px, 0] += w * a0
                    out[py, px, 1] += w * a1
                    out[py, px, 2] += w * a2
                    trans[py, px] = tr * (1.0 - alpha)


@njit(parallel=True, cache=True)
def backward_kernel(width, height, tile, ntx, nty, offsets, ids,
                    sx, sy, inv_a, inv_b, inv_c, opac, attr,
                    alpha_max, terminate, mode, background, upstream,
                    g_mu, g_q, g_opac, g_attr):
    """Per-pixel replay of the forward blend, accumulating screen-space grads.

    mode: 0 rgb (background composited), 1 normal (upstream pulled through the
    per-pixel renormalization), 2 depth. Gradients land in per-CSR-entry slots
    (g_* indexed like ids); the caller reduces entries per splat.
    """
    for t in prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        x_end = min((tx + 1) * tile, width)
        y_end = min((ty + 1) * tile, height)
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(ty * tile, y_end):
            for px in range(tx * tile, x_end):
                # forward replay: accumulated attribute, final transmittance,
                # index of the last blended entry
                tr = 1.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                e_last = start - 1
                for e in range(start, end):
                    s = ids[e]
                    dx = px - sx[s]
                    dy = py - sy[s]
                    q = inv_a[s] * dx * dx + 2.0 * inv_b[s] * dx * dy + inv_c[s] * dy * dy
                    alpha = opac[s] * np.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < ALPHA_CUTOFF:
                        continue
                    w = tr * alpha
                    n0 += w * attr[s, 0]
                    n1 += w * attr[s, 1]
                    n2 += w * attr[s, 2]
                    tr *= 1.0 - alpha
                    e_last = e
                    if terminate and tr < TRANSMITTANCE_CUTOFF:
                        break
                t_fin = tr

                u0 = upstream[py, px, 0]
                u1 = upstream[py, px, 1]
                u2 = upstream[py, px, 2]
                if mode == 1:
                    nn = np.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
                    if nn > 1e-12:
                        dot = (n0 * u0 + n1 * u1 + n2 * u2) / (nn * nn * nn)
                        u0 = u0 / nn - n0 * dot
                        u1 = u1 / nn - n1 * dot
                        u2 = u2 / nn - n2 * dot
                d_tfin = 0.0
                if mode == 0:
                    d_tfin = u0 * background[0] + u1 * background[1] + u2 * background[2]
                if u0 == 0.0 and u1 == 0.0 and u2 == 0.0:
                    continue

                # reverse sweep: reconstruct T_k from the back, keep the
                # suffix sum S = sum_{j>k} T_j alpha_j a_j
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                t_next = t_fin
                for e in range(e_last, start - 1, -1):
                    s = ids[e]
                    dx = px - sx[s]
                    dy = py - sy[s]
                    q = inv_a[s] * dx * dx + 2.0 * inv_b[s] * dx * dy + inv_c[s] * dy * dy
                    g = np.exp(-0.5 * q)
                    raw = opac[s] * g
                    clamped = raw > alpha_max
                    alpha = alpha_max if clamped else raw
                    if alpha < ALPHA_CUTOFF:
                        continue
                    one_m = 1.0 - alpha
                    t_k = t_next / one_m
                    w = t_k * alpha

                    g_attr[e, 0] += u0 * w
                    g_attr[e, 1] += u1 * w
                    g_attr[e, 2] += u2 * w

                    d_alpha = (u0 * (t_k * attr[s, 0] - s0 / one_m)
                               + u1 * (t_k * attr[s, 1] - s1 / one_m)
                               + u2 * (t_k * attr[s, 2] - s2 / one_m)
                               - d_tfin * t_fin / one_m)
                    if not clamped:
                        g_opac[e] += d_alpha * g
                        d_q = -0.5 * opac[s] * g * d_alpha
                        g_q[e, 0] += d_q * dx * dx
                        g_q[e, 1] += d_q * 2.0 * dx * dy
                        g_q[e, 2] += d_q * dy * dy
                        ddx = d_q * 2.0 * (inv_a[s] * dx + inv_b[s] * dy)
                        ddy = d_q * 2.0 * (inv_b[s] * dx + inv_c[s] * dy)
                        g_mu[e, 0] -= ddx
                        g_mu[e, 1] -= ddy

                    s0 += w * attr[s, 0]
                    s1 += w * attr[s, 1]
                    s2 += w * attr[s, 2]
                    t_next = t_k
