"""Numba kernels backing the geometry, cost, deformation and engine modules.

Everything here is deterministic given explicit uint64 stream states: no numpy
global RNG, no thread-dependent reductions. Parallel loops only ever write to
the slot(s) owned by their pixel, so results are bit-identical across thread
counts. The SplitMix64 generator mirrors rng.py and the two are lockstep-tested.

Conventions:
  - images are float32 (H, W) grayscale in [0, 1]
  - hypotheses are float64: depth (H, W) plus normal (H, W, 3) in the
    reference camera frame
  - a pixel's viewing ray is Kinv @ (x, y, 1), i.e. z-depth parametrization
  - plane-induced homographies are per-plane: one 3x3 per (hypothesis, view)
"""

import math

import numpy as np
from numba import njit, prange

F64 = np.float64

# --- SplitMix64 ------------------------------------------------------------

_U64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_U64_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def sm_mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _U64_MIX1
    z = (z ^ (z >> np.uint64(27))) * _U64_MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def sm_next(state):
    state = state + _U64_GAMMA
    return state, sm_mix64(state)


@njit(cache=True)
def sm_derive2(seed, k1, k2):
    s = sm_mix64(np.uint64(seed))
    s = sm_mix64(s ^ sm_mix64(np.uint64(k1) + _U64_GAMMA))
    s = sm_mix64(s ^ sm_mix64(np.uint64(k2) + _U64_GAMMA))
    return s


@njit(cache=True)
def sm_derive3(seed, k1, k2, k3):
    s = sm_derive2(seed, k1, k2)
    return sm_mix64(s ^ sm_mix64(np.uint64(k3) + _U64_GAMMA))


@njit(cache=True)
def sm_uniform(state):
    state, z = sm_next(state)
    return state, (z >> np.uint64(11)) * (2.0 ** -53)


@njit(cache=True)
def sm_randint(state, n):
    state, z = sm_next(state)
    return state, int(z % np.uint64(n))


# --- Small geometry helpers -------------------------------------------------


@njit(cache=True)
def ray_dir(fx, fy, cx, cy, px, py):
    """Un-normalized viewing ray Kinv @ (px, py, 1), z component is 1."""
    return (px - cx) / fx, (py - cy) / fy, 1.0


@njit(cache=True)
def homography_plane(Hb, fxr, fyr, cxr, cyr, fxs, fys, cxs, cys,
                     Rrel, trel, nx, ny, nz, px, py, d):
    """Fill Hb (3,3) with the plane-induced homography for the plane with
    normal n anchored at reference pixel (px, py) at depth d.

    Returns False when the plane passes through the reference camera center
    (denominator below 1e-12), leaving Hb undefined.
    """
    rx, ry, rz = ray_dir(fxr, fyr, cxr, cyr, px, py)
    den = d * (nx * rx + ny * ry + nz * rz)
    if abs(den) < 1e-12:
        return False
    # M = Rrel + outer(trel, n) / den
    m00 = Rrel[0, 0] + trel[0] * nx / den
    m01 = Rrel[0, 1] + trel[0] * ny / den
    m02 = Rrel[0, 2] + trel[0] * nz / den
    m10 = Rrel[1, 0] + trel[1] * nx / den
    m11 = Rrel[1, 1] + trel[1] * ny / den
    m12 = Rrel[1, 2] + trel[1] * nz / den
    m20 = Rrel[2, 0] + trel[2] * nx / den
    m21 = Rrel[2, 1] + trel[2] * ny / den
    m22 = Rrel[2, 2] + trel[2] * nz / den
    # A = M @ Kinv_ref
    a00 = m00 / fxr
    a10 = m10 / fxr
    a20 = m20 / fxr
    a01 = m01 / fyr
    a11 = m11 / fyr
    a21 = m21 / fyr
    a02 = -cxr / fxr * m00 - cyr / fyr * m01 + m02
    a12 = -cxr / fxr * m10 - cyr / fyr * m11 + m12
    a22 = -cxr / fxr * m20 - cyr / fyr * m21 + m22
    # H = K_src @ A
    Hb[0, 0] = fxs * a00 + cxs * a20
    Hb[0, 1] = fxs * a01 + cxs * a21
    Hb[0, 2] = fxs * a02 + cxs * a22
    Hb[1, 0] = fys * a10 + cys * a20
    Hb[1, 1] = fys * a11 + cys * a21
    Hb[1, 2] = fys * a12 + cys * a22
    Hb[2, 0] = a20
    Hb[2, 1] = a21
    Hb[2, 2] = a22
    return True


@njit(cache=True)
def warp_point(Hb, x, y):
    """Apply homography, returning (u, v, ok). ok=False at infinity."""
    w = Hb[2, 0] * x + Hb[2, 1] * y + Hb[2, 2]
    if abs(w) < 1e-12:
        return 0.0, 0.0, False
    u = (Hb[0, 0] * x + Hb[0, 1] * y + Hb[0, 2]) / w
    v = (Hb[1, 0] * x + Hb[1, 1] * y + Hb[1, 2]) / w
    return u, v, True


@njit(cache=True)
def bilerp(img, x, y):
    """Bilinear sample; caller guarantees 0 <= x <= W-1, 0 <= y <= H-1."""
    h, w = img.shape
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    if x0 < 0:
        x0 = 0
    if y0 < 0:
        y0 = 0
    fx = x - x0
    fy = y - y0
    v00 = F64(img[y0, x0])
    v01 = F64(img[y0, x0 + 1])
    v10 = F64(img[y0 + 1, x0])
    v11 = F64(img[y0 + 1, x0 + 1])
    return (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy


@njit(cache=True)
def transfer_depth(nx, ny, nz, dq, rqx, rqy, rqz, rpx, rpy, rpz):
    """Depth at pixel p implied by the plane (n, depth dq) anchored at pixel q.

    rq / rp are the two viewing rays. Returns -1.0 when the plane is
    (near-)parallel to p's ray.
    """
    den = nx * rpx + ny * rpy + nz * rpz
    if abs(den) < 1e-12:
        return -1.0
    num = dq * (nx * rqx + ny * rqy + nz * rqz)
    return num / den


# --- Random hypotheses ------------------------------------------------------


@njit(cache=True)
def sample_facing_normal(state, rx, ry, rz):
    """Area-uniform normal on the hemisphere around -ray. Returns state, n."""
    rn = math.sqrt(rx * rx + ry * ry + rz * rz)
    ax = -rx / rn
    ay = -ry / rn
    az = -rz / rn
    state, u1 = sm_uniform(state)
    state, u2 = sm_uniform(state)
    ct = u1
    if ct < 1e-6:
        ct = 1e-6
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    phi = 2.0 * math.pi * u2
    # orthonormal basis around the axis
    if abs(ax) < 0.9:
        bx, by, bz = 1.0, 0.0, 0.0
    else:
        bx, by, bz = 0.0, 1.0, 0.0
    t1x = ay * bz - az * by
    t1y = az * bx - ax * bz
    t1z = ax * by - ay * bx
    tn = math.sqrt(t1x * t1x + t1y * t1y + t1z * t1z)
    t1x /= tn
    t1y /= tn
    t1z /= tn
    t2x = ay * t1z - az * t1y
    t2y = az * t1x - ax * t1z
    t2z = ax * t1y - ay * t1x
    ca = math.cos(phi)
    sa = math.sin(phi)
    nx = st * (ca * t1x + sa * t2x) + ct * ax
    ny = st * (ca * t1y + sa * t2y) + ct * ay
    nz = st * (ca * t1z + sa * t2z) + ct * az
    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
    return state, nx / nn, ny / nn, nz / nn


@njit(cache=True)
def perturb_normal(state, nx, ny, nz, angle_scale, rx, ry, rz):
    """Rotate n by a random axis-angle (angle <= angle_scale), keep it facing."""
    state, u1 = sm_uniform(state)
    state, u2 = sm_uniform(state)
    state, u3 = sm_uniform(state)
    az = 2.0 * u1 - 1.0
    ph = 2.0 * math.pi * u2
    sz = math.sqrt(max(0.0, 1.0 - az * az))
    axx = sz * math.cos(ph)
    axy = sz * math.sin(ph)
    axz = az
    ang = u3 * angle_scale
    c = math.cos(ang)
    s = math.sin(ang)
    # Rodrigues
    dot = axx * nx + axy * ny + axz * nz
    cx = axy * nz - axz * ny
    cy = axz * nx - axx * nz
    cz = axx * ny - axy * nx
    ox = nx * c + cx * s + axx * dot * (1.0 - c)
    oy = ny * c + cy * s + axy * dot * (1.0 - c)
    oz = nz * c + cz * s + axz * dot * (1.0 - c)
    rn = math.sqrt(rx * rx + ry * ry + rz * rz)
    ux, uy, uz = rx / rn, ry / rn, rz / rn
    f = ox * ux + oy * uy + oz * uz
    if f > -1e-9:
        # mirror across the plane orthogonal to the ray
        ox -= 2.0 * f * ux
        oy -= 2.0 * f * uy
        oz -= 2.0 * f * uz
        if ox * ux + oy * uy + oz * uz > -1e-9:
            ox, oy, oz = -ux, -uy, -uz
    nn = math.sqrt(ox * ox + oy * oy + oz * oz)
    return state, ox / nn, oy / nn, oz / nn


# --- Weighted NCC (Eq.-2 style cost) ----------------------------------------

_VAR_EPS = 1e-18


@njit(cache=True)
def _ncc_from_pairs(ws_, xs_, ys_, n):
    """Stable two-pass weighted NCC cost from collected sample pairs."""
    sw = 0.0
    swx = 0.0
    swy = 0.0
    for k in range(n):
        sw += ws_[k]
        swx += ws_[k] * xs_[k]
        swy += ws_[k] * ys_[k]
    if sw <= 0.0:
        return 2.0
    mx = swx / sw
    my = swy / sw
    vx = 0.0
    vy = 0.0
    cov = 0.0
    for k in range(n):
        ax = xs_[k] - mx
        ay = ys_[k] - my
        vx += ws_[k] * ax * ax
        vy += ws_[k] * ay * ay
        cov += ws_[k] * ax * ay
    vx /= sw
    vy /= sw
    cov /= sw
    if vx <= _VAR_EPS or vy <= _VAR_EPS:
        return 2.0
    c = 1.0 - cov / math.sqrt(vx * vy)
    if c < 0.0:
        c = 0.0
    if c > 2.0:
        c = 2.0
    return c


@njit(cache=True)
def wncc(ref, src, cxp, cyp, Hb, odx, ody, noff, spw, sigma_c):
    """Bilaterally weighted NCC cost in [0, 2] for one patch/homography.

    Reference samples at (cxp+odx, cyp+ody); source samples warped through Hb.
    spw holds the precomputed spatial weight per offset; the color weight
    exp(-(I_k - I_center)^2 / (2 sigma_c^2)) is evaluated on the reference.
    Out-of-bounds samples on either side return the worst cost 2.0, as does a
    zero-variance (ambiguous) patch.
    """
    h, w = ref.shape
    hs, ws = src.shape
    if cxp < 0.0 or cyp < 0.0 or cxp > w - 1.0 or cyp > h - 1.0:
        return 2.0
    ic = bilerp(ref, cxp, cyp)
    inv2s = 1.0 / (2.0 * sigma_c * sigma_c)
    ws_ = np.empty(noff)
    xs_ = np.empty(noff)
    ys_ = np.empty(noff)
    for k in range(noff):
        rx = cxp + odx[k]
        ry = cyp + ody[k]
        if rx < 0.0 or ry < 0.0 or rx > w - 1.0 or ry > h - 1.0:
            return 2.0
        u, v, ok = warp_point(Hb, rx, ry)
        if not ok or u < 0.0 or v < 0.0 or u > ws - 1.0 or v > hs - 1.0:
            return 2.0
        x = bilerp(ref, rx, ry)
        dcol = x - ic
        ws_[k] = spw[k] * math.exp(-dcol * dcol * inv2s)
        xs_[k] = x
        ys_[k] = bilerp(src, u, v)
    return _ncc_from_pairs(ws_, xs_, ys_, noff)


@njit(cache=True)
def wncc_clip(ref, src, cxp, cyp, Hb, odx, ody, noff, spw, sigma_c):
    """wncc variant that silently drops reference-out-of-bounds offsets
    (border pixels); needs at least 3 surviving samples."""
    h, w = ref.shape
    hs, ws = src.shape
    if cxp < 0.0 or cyp < 0.0 or cxp > w - 1.0 or cyp > h - 1.0:
        return 2.0
    ic = bilerp(ref, cxp, cyp)
    inv2s = 1.0 / (2.0 * sigma_c * sigma_c)
    ws_ = np.empty(noff)
    xs_ = np.empty(noff)
    ys_ = np.empty(noff)
    nused = 0
    for k in range(noff):
        rx = cxp + odx[k]
        ry = cyp + ody[k]
        if rx < 0.0 or ry < 0.0 or rx > w - 1.0 or ry > h - 1.0:
            continue
        u, v, ok = warp_point(Hb, rx, ry)
        if not ok or u < 0.0 or v < 0.0 or u > ws - 1.0 or v > hs - 1.0:
            return 2.0
        x = bilerp(ref, rx, ry)
        dcol = x - ic
        ws_[nused] = spw[k] * math.exp(-dcol * dcol * inv2s)
        xs_[nused] = x
        ys_[nused] = bilerp(src, u, v)
        nused += 1
    if nused < 3:
        return 2.0
    return _ncc_from_pairs(ws_, xs_, ys_, nused)


@njit(cache=True)
def wncc_cached(src, cxp, cyp, Hb, odx, ody, noff, cw, cx_, sw, mx, vx):
    """wncc with the reference-side moments precomputed (cw = weights,
    cx_ = reference samples, sw / mx / vx = their weighted moments).

    Accumulates around the first source sample to keep the one-pass source
    moments well conditioned without allocating in the hot path.
    """
    hs, ws = src.shape
    if sw <= 0.0 or vx <= _VAR_EPS or noff < 1:
        return 2.0
    u, v, ok = warp_point(Hb, cxp + odx[0], cyp + ody[0])
    if not ok or u < 0.0 or v < 0.0 or u > ws - 1.0 or v > hs - 1.0:
        return 2.0
    y0 = bilerp(src, u, v)
    sy1 = 0.0
    syy1 = 0.0
    sxy1 = 0.0
    for k in range(noff):
        if k == 0:
            y = y0
        else:
            u, v, ok = warp_point(Hb, cxp + odx[k], cyp + ody[k])
            if not ok or u < 0.0 or v < 0.0 or u > ws - 1.0 or v > hs - 1.0:
                return 2.0
            y = bilerp(src, u, v)
        wk = cw[k]
        dy1 = y - y0
        sy1 += wk * dy1
        syy1 += wk * dy1 * dy1
        sxy1 += wk * (cx_[k] - mx) * dy1  # sum(w*(x-mx)) == 0, so shift by y0 cancels
    my1 = sy1 / sw
    vy = syy1 / sw - my1 * my1
    if vy <= _VAR_EPS:
        return 2.0
    c = 1.0 - (sxy1 / sw) / math.sqrt(vx * vy)
    if c < 0.0:
        c = 0.0
    if c > 2.0:
        c = 2.0
    return c


@njit(cache=True)
def ref_moments(ref, cxp, cyp, odx, ody, noff, spw, sigma_c, cw, cx_):
    """Fill cw / cx_ with reference-side weights and samples; return
    (ok, sw, mx, vx) with two-pass (stable) moments. ok=False when any
    offset leaves the image."""
    h, w = ref.shape
    if cxp < 0.0 or cyp < 0.0 or cxp > w - 1.0 or cyp > h - 1.0:
        return False, 0.0, 0.0, 0.0
    ic = bilerp(ref, cxp, cyp)
    inv2s = 1.0 / (2.0 * sigma_c * sigma_c)
    sw = 0.0
    swx = 0.0
    for k in range(noff):
        rx = cxp + odx[k]
        ry = cyp + ody[k]
        if rx < 0.0 or ry < 0.0 or rx > w - 1.0 or ry > h - 1.0:
            return False, 0.0, 0.0, 0.0
        x = bilerp(ref, rx, ry)
        dcol = x - ic
        wk = spw[k] * math.exp(-dcol * dcol * inv2s)
        cw[k] = wk
        cx_[k] = x
        sw += wk
        swx += wk * x
    if sw <= 0.0:
        return False, 0.0, 0.0, 0.0
    mx = swx / sw
    vx = 0.0
    for k in range(noff):
        ax = cx_[k] - mx
        vx += cw[k] * ax * ax
    vx /= sw
    return True, sw, mx, vx


# --- Boundary segment traversal ----------------------------------------------


@njit(cache=True)
def segment_hits(bnd, x0, y0, x1, y1):
    """True when the open segment (x0,y0)->(x1,y1) crosses a boundary pixel.

    Pixels are unit squares centered on integer coordinates. The start pixel
    is excluded, the end pixel included. Exact corner crossings conservatively
    test both side squares (so a diagonal wall blocks a diagonal segment).
    """
    h, w = bnd.shape
    dx = float(x1 - x0)
    dy = float(y1 - y0)
    x = x0
    y = y0
    step_x = 1 if dx > 0.0 else -1
    step_y = 1 if dy > 0.0 else -1
    if dx != 0.0:
        t_dx = abs(1.0 / dx)
        t_mx = 0.5 * t_dx
    else:
        t_dx = 1e30
        t_mx = 1e30
    if dy != 0.0:
        t_dy = abs(1.0 / dy)
        t_my = 0.5 * t_dy
    else:
        t_dy = 1e30
        t_my = 1e30
    while True:
        if t_mx < t_my:
            t = t_mx
            if t > 1.0:
                return False
            x += step_x
            t_mx += t_dx
        elif t_my < t_mx:
            t = t_my
            if t > 1.0:
                return False
            y += step_y
            t_my += t_dy
        else:
            t = t_mx
            if t > 1.0:
                return False
            # corner crossing: conservatively test both side squares
            sx = x + step_x
            sy = y + step_y
            if 0 <= sx < w and 0 <= y < h and bnd[y, sx]:
                return True
            if 0 <= x < w and 0 <= sy < h and bnd[sy, x]:
                return True
            x += step_x
            y += step_y
            t_mx += t_dx
            t_my += t_dy
        if 0 <= x < w and 0 <= y < h and bnd[y, x]:
            return True
        if x == x1 and y == y1:
            return False


# --- Spoke search / equidistribution -----------------------------------------


@njit(cache=True)
def walk_ray(rel, bnd, px, py, ang, max_r):
    """March one ray from (px,py); returns (bx, by, kind) where kind is
    0=reliable, 1=depth edge, 2=image border / radius exhausted."""
    h, w = rel.shape
    ca = math.cos(ang)
    sa = math.sin(ang)
    lx = px
    ly = py
    for r in range(1, max_r + 1):
        xx = int(round(px + r * ca))
        yy = int(round(py + r * sa))
        if xx == lx and yy == ly:
            continue
        if xx < 0 or yy < 0 or xx >= w or yy >= h:
            return lx, ly, 2
        if bnd[yy, xx]:
            return xx, yy, 1
        if rel[yy, xx]:
            return xx, yy, 0
        lx = xx
        ly = yy
    return lx, ly, 2


@njit(cache=True)
def fan_walk(rel, bnd, px, py, angs, n_rays, max_r, bx, by, kind, cnts):
    """Walk all rays and fill terminator arrays plus per-sector counts.

    Sector i sits between ray i and ray i+1 (cyclic); its reliable count is
    the L1 distance between the two terminators when both are reliable, else 0.
    """
    for i in range(n_rays):
        x, y, k = walk_ray(rel, bnd, px, py, angs[i], max_r)
        bx[i] = x
        by[i] = y
        kind[i] = k
    for i in range(n_rays):
        j = (i + 1) % n_rays
        if kind[i] == 0 and kind[j] == 0:
            cnts[i] = F64(abs(bx[i] - bx[j]) + abs(by[i] - by[j]))
        else:
            cnts[i] = 0.0


@njit(cache=True)
def equalize_angles(angs, cnts, n_rays, out):
    """One Eq.-7 style update: place ray k where the cumulative reliable mass
    (measured from ray 0's angle) reaches k * dbar, interpolating inside the
    sector that spans the target. Rays land inside the mass support, so empty
    sectors collapse. Returns False when total mass is zero."""
    total = 0.0
    for i in range(n_rays):
        total += cnts[i]
    if total <= 0.0:
        for i in range(n_rays):
            out[i] = angs[i]
        return False
    dbar = total / n_rays
    for k in range(n_rays):
        target = k * dbar
        cum = 0.0
        x = 0
        while x < n_rays:
            if cnts[x] > 0.0 and cum + cnts[x] > target:
                break
            cum += cnts[x]
            x += 1
        if x >= n_rays:
            x = n_rays - 1
            while x > 0 and cnts[x] <= 0.0:
                x -= 1
            cum = total - cnts[x]
        a0 = angs[x]
        if x + 1 < n_rays:
            a1 = angs[x + 1]
        else:
            a1 = angs[0] + 2.0 * math.pi
        if a1 < a0:
            a1 += 2.0 * math.pi
        frac = (target - cum) / cnts[x]
        out[k] = a0 + frac * (a1 - a0)
    return True


# --- RANSAC plane ------------------------------------------------------------


@njit(cache=True)
def _plane_from3(pts, i, j, k):
    ax = pts[j, 0] - pts[i, 0]
    ay = pts[j, 1] - pts[i, 1]
    az = pts[j, 2] - pts[i, 2]
    bx = pts[k, 0] - pts[i, 0]
    by = pts[k, 1] - pts[i, 1]
    bz = pts[k, 2] - pts[i, 2]
    nx = ay * bz - az * by
    ny = az * bx - ax * bz
    nz = ax * by - ay * bx
    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
    if nn < 1e-12:
        return 0.0, 0.0, 0.0, 0.0, False
    nx /= nn
    ny /= nn
    nz /= nn
    d = nx * pts[i, 0] + ny * pts[i, 1] + nz * pts[i, 2]
    return nx, ny, nz, d, True


@njit(cache=True)
def _count_inliers(pts, n, nx, ny, nz, d, eps):
    cnt = 0
    for t in range(n):
        dist = abs(nx * pts[t, 0] + ny * pts[t, 1] + nz * pts[t, 2] - d)
        if dist < eps:
            cnt += 1
    return cnt


@njit(cache=True)
def ransac_plane(pts, n, eps, trials, state, flags):
    """Best-of-trials 3-point plane maximizing inliers (|dist| < eps).

    Enumerates all 3-subsets in lexicographic order when that is cheaper than
    the trial budget, making small instances exact. Fills `flags` for the best
    plane and returns (nx, ny, nz, d, count). n must be >= 3.
    """
    best_cnt = -1
    bx = 0.0
    by = 0.0
    bz = 0.0
    bd = 0.0
    total = n * (n - 1) * (n - 2) // 6
    if total <= trials:
        for i in range(n - 2):
            for j in range(i + 1, n - 1):
                for k in range(j + 1, n):
                    nx, ny, nz, d, ok = _plane_from3(pts, i, j, k)
                    if not ok:
                        continue
                    cnt = _count_inliers(pts, n, nx, ny, nz, d, eps)
                    if cnt > best_cnt:
                        best_cnt = cnt
                        bx, by, bz, bd = nx, ny, nz, d
    else:
        for _ in range(trials):
            state, i = sm_randint(state, n)
            state, j = sm_randint(state, n)
            state, k = sm_randint(state, n)
            if i == j or j == k or i == k:
                continue
            nx, ny, nz, d, ok = _plane_from3(pts, i, j, k)
            if not ok:
                continue
            cnt = _count_inliers(pts, n, nx, ny, nz, d, eps)
            if cnt > best_cnt:
                best_cnt = cnt
                bx, by, bz, bd = nx, ny, nz, d
    if best_cnt < 0:
        # all triples degenerate: accept every point (they are collinear)
        for t in range(n):
            flags[t] = 1
        return 0.0, 0.0, 0.0, 0.0, n
    for t in range(n):
        dist = abs(bx * pts[t, 0] + by * pts[t, 1] + bz * pts[t, 2] - bd)
        flags[t] = 1 if dist < eps else 0
    return bx, by, bz, bd, best_cnt


# --- DBSCAN ------------------------------------------------------------------


@njit(cache=True)
def dbscan_labels(xy, n, gamma, eta, labels):
    """Density clustering on 2-D points; every point ends up in a cluster.

    Core points (>= eta neighbors within gamma, self excluded) merge when
    within gamma of each other. Non-core points join the nearest core's
    cluster (coordinate-lexicographic tie break) or become singletons.
    Labels are 0..C-1 in order of first appearance; returns C.
    """
    g2 = gamma * gamma
    ncnt = np.zeros(n, dtype=np.int32)
    for i in range(n):
        for j in range(i + 1, n):
            dx = xy[i, 0] - xy[j, 0]
            dy = xy[i, 1] - xy[j, 1]
            if dx * dx + dy * dy <= g2:
                ncnt[i] += 1
                ncnt[j] += 1
    core = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        if ncnt[i] >= eta:
            core[i] = 1
    parent = np.empty(n, dtype=np.int32)
    for i in range(n):
        parent[i] = i
    for i in range(n):
        if not core[i]:
            continue
        for j in range(i + 1, n):
            if not core[j]:
                continue
            dx = xy[i, 0] - xy[j, 0]
            dy = xy[i, 1] - xy[j, 1]
            if dx * dx + dy * dy <= g2:
                ri = i
                while parent[ri] != ri:
                    ri = parent[ri]
                rj = j
                while parent[rj] != rj:
                    rj = parent[rj]
                if ri < rj:
                    parent[rj] = ri
                elif rj < ri:
                    parent[ri] = rj
    root = np.empty(n, dtype=np.int32)
    for i in range(n):
        r = i
        while parent[r] != r:
            r = parent[r]
        root[i] = r
    attach = np.empty(n, dtype=np.int32)
    for i in range(n):
        if core[i]:
            attach[i] = root[i]
            continue
        best = -1
        bd = 1e30
        bxc = 1e30
        byc = 1e30
        for j in range(n):
            if not core[j]:
                continue
            dx = xy[i, 0] - xy[j, 0]
            dy = xy[i, 1] - xy[j, 1]
            d2 = dx * dx + dy * dy
            if d2 > g2:
                continue
            if d2 < bd or (d2 == bd and (xy[j, 1] < byc or (xy[j, 1] == byc and xy[j, 0] < bxc))):
                bd = d2
                best = root[j]
                bxc = xy[j, 0]
                byc = xy[j, 1]
        if best >= 0:
            attach[i] = best
        else:
            attach[i] = -1 - i  # singleton marker
    nlab = 0
    remap = np.full(2 * n + 1, -1, dtype=np.int32)
    for i in range(n):
        key = attach[i] + n  # shift singleton markers into range
        if remap[key] < 0:
            remap[key] = nlab
            nlab += 1
        labels[i] = remap[key]
    return nlab


# --- Sub-patch sizing ---------------------------------------------------------


@njit(cache=True)
def round_to_odd(x):
    """Nearest odd integer (ties toward the larger), clamped to >= 3."""
    lo = 2 * int(math.floor((x - 1.0) / 2.0)) + 1
    hi = lo + 2
    v = lo if (x - lo) < (hi - x) else hi
    if v < 3:
        v = 3
    return v


@njit(cache=True)
def samples_per_anchor(k):
    """round(9/k) half-up, clamped to >= 1."""
    v = int(math.floor(9.0 / k + 0.5))
    if v < 1:
        v = 1
    return v


# --- Wedge scan for anchor quadrupling ----------------------------------------


@njit(cache=True)
def _wedge_scan_shell(rel, bnd, px, py, lo, hi, a0, span, odx, ody, oang, d2s,
                      quality, qfloor, state):
    """Scan one shell's angle-sorted slot range [lo, hi); updates the running
    state tuple (best_d2, best_ang, best_x, best_y, fb_q, fb_x, fb_y, hit)."""
    h, w = rel.shape
    two_pi = 2.0 * math.pi
    best_d2, best_ang, best_x, best_y, fb_q, fb_x, fb_y, hit = state
    for idx in range(lo, hi):
        rel_ang = (oang[idx] - a0) % two_pi
        if rel_ang >= span:
            continue
        x = px + odx[idx]
        y = py + ody[idx]
        if x < 0 or y < 0 or x >= w or y >= h:
            continue
        if bnd[y, x] or not rel[y, x]:
            continue
        hit = True
        if quality[y, x] < qfloor:
            if quality[y, x] > fb_q:
                fb_q = quality[y, x]
                fb_x = x
                fb_y = y
            continue
        key_d2 = d2s[idx]
        key_ang = oang[idx]
        if key_d2 < best_d2 or (key_d2 == best_d2 and key_ang < best_ang):
            best_d2 = key_d2
            best_ang = key_ang
            best_x = x
            best_y = y
    return best_d2, best_ang, best_x, best_y, fb_q, fb_x, fb_y, hit


@njit(cache=True)
def wedge_anchor(rel, bnd, px, py, a0, span, odx, ody, oang, d2s,
                 shell_start, n_shells, quality, qfloor):
    """Nearest reliable, non-boundary, edge-confined pixel whose offset angle
    lies in [a0, a0+span) and whose patch quality (central-window texture
    variance) clears qfloor. Shells are angle-sorted, so each wedge touches
    only its angular slice via binary search; scanning stops a fixed margin
    past the first reliable hit. When nothing clears the quality bar the
    best weaker pixel (confinement-checked once) stands in.
    Returns (x, y, found)."""
    two_pi = 2.0 * math.pi
    a_lo = a0 % two_pi
    a_hi = a_lo + span
    fb_x = 0
    fb_y = 0
    fb_q = -1.0
    stop_shell = n_shells
    for s in range(1, n_shells + 1):
        if s > stop_shell:
            break
        lo = shell_start[s]
        hi = shell_start[s + 1]
        if lo >= hi:
            continue
        state = (1e300, 1e300, 0, 0, fb_q, fb_x, fb_y, False)
        # slot range(s) for the angular window, possibly wrapping 2*pi
        l1 = lo + np.searchsorted(oang[lo:hi], a_lo)
        h1 = lo + np.searchsorted(oang[lo:hi], min(a_hi, two_pi))
        state = _wedge_scan_shell(rel, bnd, px, py, l1, h1, a0, span,
                                  odx, ody, oang, d2s, quality, qfloor, state)
        if a_hi > two_pi:
            h2 = lo + np.searchsorted(oang[lo:hi], a_hi - two_pi)
            state = _wedge_scan_shell(rel, bnd, px, py, lo, h2, a0, span,
                                      odx, ody, oang, d2s, quality, qfloor,
                                      state)
        best_d2, best_ang, best_x, best_y, fb_q, fb_x, fb_y, hit = state
        if hit and stop_shell == n_shells:
            stop_shell = min(s + 16, n_shells)
        if best_d2 < 1e300:
            if not segment_hits(bnd, px, py, best_x, best_y):
                return best_x, best_y, True
    if fb_q > 0.0 and not segment_hits(bnd, px, py, fb_x, fb_y):
        return fb_x, fb_y, True
    return 0, 0, False


@njit(cache=True)
def merge_clusters_to_cap(xy, n, labels, n_clusters, cap):
    """Merge the two nearest-centroid clusters until at most cap remain.

    Ties break toward smaller cluster indices. Labels are compacted to
    0..C-1 preserving first appearance; returns the new cluster count.
    """
    while n_clusters > cap:
        cx = np.zeros(n_clusters)
        cy = np.zeros(n_clusters)
        cnt = np.zeros(n_clusters, dtype=np.int64)
        for i in range(n):
            l = labels[i]
            cx[l] += xy[i, 0]
            cy[l] += xy[i, 1]
            cnt[l] += 1
        for l in range(n_clusters):
            if cnt[l] > 0:
                cx[l] /= cnt[l]
                cy[l] /= cnt[l]
        bi = -1
        bj = -1
        bd = 1e300
        for i in range(n_clusters):
            for j in range(i + 1, n_clusters):
                dx = cx[i] - cx[j]
                dy = cy[i] - cy[j]
                d2 = dx * dx + dy * dy
                if d2 < bd:
                    bd = d2
                    bi = i
                    bj = j
        for i in range(n):
            if labels[i] == bj:
                labels[i] = bi
        # compact labels, preserving first-appearance order
        remap = np.full(n_clusters, -1, dtype=np.int32)
        nxt = 0
        for i in range(n):
            if remap[labels[i]] < 0:
                remap[labels[i]] = nxt
                nxt += 1
            labels[i] = remap[labels[i]]
        n_clusters = nxt
    return n_clusters


@njit(cache=True)
def ref_sums(ref, cxp, cyp, odx, ody, noff, sigma_c, cw, cx_):
    """Reference-side raw moments for pooled (cluster) NCC: fills cw / cx_
    with color weights and samples, returns (ok, sum_w, sum_wx, sum_wxx).
    Spatial weights are uniform inside optimized sub-patches."""
    h, w = ref.shape
    if cxp < 0.0 or cyp < 0.0 or cxp > w - 1.0 or cyp > h - 1.0:
        return False, 0.0, 0.0, 0.0
    ic = bilerp(ref, cxp, cyp)
    inv2s = 1.0 / (2.0 * sigma_c * sigma_c)
    sw = 0.0
    swx = 0.0
    swxx = 0.0
    for k in range(noff):
        rx = cxp + odx[k]
        ry = cyp + ody[k]
        if rx < 0.0 or ry < 0.0 or rx > w - 1.0 or ry > h - 1.0:
            return False, 0.0, 0.0, 0.0
        x = bilerp(ref, rx, ry)
        dcol = x - ic
        wk = math.exp(-dcol * dcol * inv2s)
        cw[k] = wk
        cx_[k] = x
        sw += wk
        swx += wk * x
        swxx += wk * x * x
    if sw <= 0.0:
        return False, 0.0, 0.0, 0.0
    return True, sw, swx, swxx
