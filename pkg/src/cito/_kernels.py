"""Compiled inner loops for the planar arm/box simulator.

Everything here works on flat float64 parameter vectors so that numba can
compile a single specialization. The public, typed wrappers live in
:mod:`cito.planar_dynamics`.

Arm parameter layout (``ARM_*`` offsets):
    lengths[3], masses[3], inertias[3], damping[3], torque_limits[3], ee_offset[2]

Box parameter layout (``BOX_*`` offsets):
    half_extent, mass, yaw_inertia, mu_table, mu_contact, k_pen, d_pen, v_reg, gravity
"""

import math

import numpy as np
from numba import njit

ARM_L = 0
ARM_M = 3
ARM_I = 6
ARM_D = 9
ARM_UMAX = 12
ARM_EE = 15
ARM_SIZE = 17

BOX_H = 0
BOX_M = 1
BOX_IZ = 2
BOX_MU_TABLE = 3
BOX_MU_CONTACT = 4
BOX_KPEN = 5
BOX_DPEN = 6
BOX_VREG = 7
BOX_G = 8
BOX_SIZE = 9

# contact model codes shared with contact_models.ModelVariant
MODEL_CCCM = 0
MODEL_SCM = 1
MODEL_VSCM = 2

# torsional friction radius of a uniformly loaded square, in units of half extent:
# mean distance from centre = h * (sqrt(2) + asinh(1)) / 3
SQUARE_TORSION_RADIUS = (math.sqrt(2.0) + math.asinh(1.0)) / 3.0

# per control step record columns
REC_T = 0
REC_Q = 1
REC_QD = 4
REC_BOX = 7
REC_BOXV = 10
REC_PHI = 13
REC_GAMMA = 14
REC_FN = 15
REC_F = 16
REC_EEV = 18
REC_SIZE = 20

# checkpoint row: 12 internal state entries, then the box position origin
CHK_SIZE = 14


@njit(cache=True, nogil=True)
def smooth_force(k, c, phi):
    """Exponential contact force ``k * exp(-(c/k) * phi)``; exactly 0 for k == 0."""
    if k == 0.0:
        return 0.0
    return k * math.exp(-(c / k) * phi)


@njit(cache=True, nogil=True)
def smooth_force_array(k, c, phi, out):
    for i in range(out.shape[0]):
        out[i] = smooth_force(k[i], c, phi[i])


@njit(cache=True, nogil=True)
def arm_dynamics(arm, q, qd, M, C):
    """Fill the mass matrix ``M`` and the velocity-dependent bias ``C`` (incl. damping)."""
    th0 = q[0]
    th1 = q[0] + q[1]
    th2 = q[0] + q[1] + q[2]
    w0 = qd[0]
    w1 = qd[0] + qd[1]
    w2 = qd[0] + qd[1] + qd[2]
    c = (math.cos(th0), math.cos(th1), math.cos(th2))
    s = (math.sin(th0), math.sin(th1), math.sin(th2))
    w = (w0, w1, w2)
    for a in range(3):
        C[a] = arm[ARM_D + a] * qd[a]
        for b in range(3):
            M[a, b] = 0.0
    # Jv[i][:, j] = sum_{m=j}^{i-1} l_m eperp(th_m) + lc_i eperp(th_i), for j <= i
    Jx = np.empty(3)
    Jy = np.empty(3)
    for i in range(3):
        mi = arm[ARM_M + i]
        lci = 0.5 * arm[ARM_L + i]
        for j in range(i + 1):
            jx = -lci * s[i]
            jy = lci * c[i]
            for m in range(j, i):
                jx -= arm[ARM_L + m] * s[m]
                jy += arm[ARM_L + m] * c[m]
            Jx[j] = jx
            Jy[j] = jy
        # centre-of-mass acceleration at zero joint acceleration
        ax = -lci * w[i] * w[i] * c[i]
        ay = -lci * w[i] * w[i] * s[i]
        for m in range(i):
            ax -= arm[ARM_L + m] * w[m] * w[m] * c[m]
            ay -= arm[ARM_L + m] * w[m] * w[m] * s[m]
        Ii = arm[ARM_I + i]
        for a in range(i + 1):
            C[a] += mi * (Jx[a] * ax + Jy[a] * ay)
            for b in range(i + 1):
                M[a, b] += mi * (Jx[a] * Jx[b] + Jy[a] * Jy[b]) + Ii


@njit(cache=True, nogil=True)
def ee_kinematics(arm, q, qd, p, v, J):
    """End-effector point position ``p``, velocity ``v`` and 2x3 Jacobian ``J``."""
    th = (q[0], q[0] + q[1], q[0] + q[1] + q[2])
    ox = arm[ARM_EE]
    oy = arm[ARM_EE + 1]
    c2 = math.cos(th[2])
    s2 = math.sin(th[2])
    # offset rotated by the last link, and its derivative w.r.t. the last angle
    offx = c2 * ox - s2 * oy
    offy = s2 * ox + c2 * oy
    doffx = -s2 * ox - c2 * oy
    doffy = c2 * ox - s2 * oy
    px = offx
    py = offy
    for m in range(3):
        px += arm[ARM_L + m] * math.cos(th[m])
        py += arm[ARM_L + m] * math.sin(th[m])
    p[0] = px
    p[1] = py
    for j in range(3):
        jx = doffx
        jy = doffy
        for m in range(j, 3):
            jx -= arm[ARM_L + m] * math.sin(th[m])
            jy += arm[ARM_L + m] * math.cos(th[m])
        J[0, j] = jx
        J[1, j] = jy
    v[0] = J[0, 0] * qd[0] + J[0, 1] * qd[1] + J[0, 2] * qd[2]
    v[1] = J[1, 0] * qd[0] + J[1, 1] * qd[1] + J[1, 2] * qd[2]


@njit(cache=True, nogil=True)
def box_sdf(h, bx, by, yaw, px, py, out):
    """Signed distance from point (px, py) to a square box.

    ``out`` receives (phi, nx, ny, wbx, wby): the distance, the unit normal
    (box outward, world frame) and the closest point on the box boundary.
    """
    cy = math.cos(yaw)
    sy = math.sin(yaw)
    rx = px - bx
    ry = py - by
    # point in box frame
    dx = cy * rx + sy * ry
    dy = -sy * rx + cy * ry
    qx = abs(dx) - h
    qy = abs(dy) - h
    sx = 1.0 if dx >= 0.0 else -1.0
    sgy = 1.0 if dy >= 0.0 else -1.0
    ex = max(qx, 0.0)
    ey = max(qy, 0.0)
    outside = math.sqrt(ex * ex + ey * ey)
    if outside > 0.0:
        phi = outside
        lnx = sx * ex / outside
        lny = sgy * ey / outside
        wx = dx - lnx * outside
        wy = dy - lny * outside
    else:
        phi = max(qx, qy)
        # choose the face: larger q wins; ties go to the larger |d| then to x
        use_x = True
        if qy > qx:
            use_x = False
        elif qy == qx and abs(dy) > abs(dx):
            use_x = False
        if use_x:
            lnx = sx
            lny = 0.0
            wx = sx * h
            wy = dy
        else:
            lnx = 0.0
            lny = sgy
            wx = dx
            wy = sgy * h
    out[0] = phi
    out[1] = cy * lnx - sy * lny
    out[2] = sy * lnx + cy * lny
    out[3] = bx + cy * wx - sy * wy
    out[4] = by + sy * wx + cy * wy


@njit(cache=True, nogil=True)
def solve3(M, b, x):
    """Solve the 3x3 SPD system ``M x = b`` by Cholesky."""
    l00 = math.sqrt(M[0, 0])
    l10 = M[1, 0] / l00
    l20 = M[2, 0] / l00
    l11 = math.sqrt(M[1, 1] - l10 * l10)
    l21 = (M[2, 1] - l20 * l10) / l11
    l22 = math.sqrt(M[2, 2] - l20 * l20 - l21 * l21)
    y0 = b[0] / l00
    y1 = (b[1] - l10 * y0) / l11
    y2 = (b[2] - l20 * y0 - l21 * y1) / l22
    x[2] = y2 / l22
    x[1] = (y1 - l21 * x[2]) / l11
    x[0] = (y0 - l10 * x[1] - l20 * x[2]) / l00


@njit(cache=True, nogil=True)
def implicit_friction(vt, A, B, v_reg):
    """Solve ``f = A * tanh((vt - B f) / v_reg)`` for f (backward-Euler friction).

    The residual is strictly increasing in f and the root lies in [-A, A], so a
    bracketed Newton iteration converges unconditionally.
    """
    if A <= 0.0:
        return 0.0
    lo = -A
    hi = A
    # exact in the linear (sticking) regime, saturates correctly when sliding
    f = A * math.tanh(vt / (v_reg + A * B))
    tol = 1e-15 * A
    for _ in range(60):
        th = math.tanh((vt - B * f) / v_reg)
        g = f - A * th
        if g == 0.0:
            break
        if g > 0.0:
            hi = f
        else:
            lo = f
        delta = g / (1.0 + A * B * (1.0 - th * th) / v_reg)
        fn = f - delta
        if abs(delta) <= tol:
            f = fn
            break
        if fn <= lo or fn >= hi:
            fn = 0.5 * (lo + hi)
        f = fn
    return f


@njit(cache=True, nogil=True)
def contact_normal_force(box, phi, phidot):
    """Penalty normal force magnitude (non-negative) for penetration ``-phi``."""
    if phi >= 0.0:
        return 0.0
    fn = box[BOX_KPEN] * (-phi) - box[BOX_DPEN] * phidot
    return max(fn, 0.0)


@njit(cache=True, nogil=True)
def step_core(arm, box, x, u, model, force_param, c, dt, compensate, out_info, M, J, W, ox=0.0, oy=0.0):
    """Advance the world state vector ``x`` (in place) by one substep.

    ``x`` = (q[3], qd[3], box_x, box_y, box_yaw, box_vx, box_vy, box_w).
    For ``model == MODEL_CCCM`` the virtual force magnitude is ``force_param``;
    otherwise ``force_param`` is the stiffness fed to :func:`smooth_force`.
    ``out_info`` receives (phi, nx, ny, fn, fax, fay, gamma): quantities at the
    start of the substep, with (fax, fay) the actual contact force on the box.
    ``M`` (3x3), ``J`` (2x3) and ``W`` (>= 9x5) are scratch buffers.
    The box position in ``x`` is measured from the point (``ox``, ``oy``) of
    the arm base frame; the rollout uses the initial box position so that
    small box displacements keep full floating point precision.
    """
    q = x[0:3]
    qd = x[3:6]
    C = W[0, 0:3]
    arm_dynamics(arm, q, qd, M, C)
    p = W[1, 0:2]
    v = W[2, 0:2]
    ee_kinematics(arm, q, qd, p, v, J)
    sd = W[3, 0:5]
    box_sdf(box[BOX_H], x[6], x[7], x[8], p[0] - ox, p[1] - oy, sd)
    phi = sd[0]
    nx = sd[1]
    ny = sd[2]
    rx = sd[3] - x[6]
    ry = sd[4] - x[7]
    bvx = x[9]
    bvy = x[10]
    bw = x[11]
    if model == MODEL_CCCM:
        gamma = force_param
    else:
        gamma = smooth_force(force_param, c, phi)

    # actual (penalty) contact, normal part explicit
    relx = v[0] - (bvx - bw * ry)
    rely = v[1] - (bvy + bw * rx)
    phidot = nx * relx + ny * rely
    fn = contact_normal_force(box, phi, phidot)

    # tau = u + C_hat - Jc^T (gamma n); the virtual reaction Jc^T (gamma n) acts
    # on the arm and cancels the compensation term, so it is summed first.
    gen = W[4, 0:3]
    for a in range(3):
        ua = min(max(u[a], -arm[ARM_UMAX + a]), arm[ARM_UMAX + a])
        jn = J[0, a] * nx + J[1, a] * ny
        virt = -jn * gamma + jn * gamma
        chat = C[a] if compensate else 0.0
        gen[a] = (ua + (chat - C[a])) + virt + jn * fn
    acc = W[5, 0:3]
    solve3(M, gen, acc)
    qd_new = W[6, 0:3]
    for a in range(3):
        qd_new[a] = qd[a] + dt * acc[a]

    # box: virtual force along -n plus actual normal force, both at the witness point
    m = box[BOX_M]
    Iz = box[BOX_IZ]
    fax = -fn * nx
    fay = -fn * ny
    fbx = -gamma * nx + fax
    fby = -gamma * ny + fay
    tz = rx * fby - ry * fbx
    vbx = bvx + dt * fbx / m
    vby = bvy + dt * fby / m
    wb = bw + dt * tz / Iz

    # contact friction, implicit along the tangent
    if fn > 0.0 and box[BOX_MU_CONTACT] > 0.0:
        tx = -ny
        ty = nx
        veex = J[0, 0] * qd_new[0] + J[0, 1] * qd_new[1] + J[0, 2] * qd_new[2]
        veey = J[1, 0] * qd_new[0] + J[1, 1] * qd_new[1] + J[1, 2] * qd_new[2]
        vt = tx * (veex - (vbx - wb * ry)) + ty * (veey - (vby + wb * rx))
        jt = W[7, 0:3]
        for a in range(3):
            jt[a] = J[0, a] * tx + J[1, a] * ty
        minv_jt = W[8, 0:3]
        solve3(M, jt, minv_jt)
        rt = rx * ty - ry * tx
        w_eff = (jt[0] * minv_jt[0] + jt[1] * minv_jt[1] + jt[2] * minv_jt[2]) + 1.0 / m + rt * rt / Iz
        ft = implicit_friction(vt, box[BOX_MU_CONTACT] * fn, dt * w_eff, box[BOX_VREG])
        for a in range(3):
            qd_new[a] -= dt * ft * minv_jt[a]
        vbx += dt * ft * tx / m
        vby += dt * ft * ty / m
        wb += dt * ft * rt / Iz
        fax += ft * tx
        fay += ft * ty

    # table friction on the box, implicit
    g = box[BOX_G]
    mu_t = box[BOX_MU_TABLE]
    v_reg = box[BOX_VREG]
    speed = math.sqrt(vbx * vbx + vby * vby)
    if speed > 0.0 and mu_t > 0.0:
        # |v_new| + dt mu g tanh(|v_new| / v_reg) = |v_trial|
        f_mag = implicit_friction(speed, mu_t * g, dt, v_reg)
        scale = (speed - dt * f_mag) / speed
        vbx *= scale
        vby *= scale
    if wb != 0.0 and mu_t > 0.0:
        r_eff = SQUARE_TORSION_RADIUS * box[BOX_H]
        # angular velocity measured as rim speed r_eff * w
        tau_max = mu_t * m * g * r_eff
        rim = wb * r_eff
        f_rim = implicit_friction(rim, tau_max / r_eff, dt * r_eff * r_eff / Iz, v_reg)
        wb -= dt * f_rim * r_eff / Iz

    for a in range(3):
        x[3 + a] = qd_new[a]
        x[a] = q[a] + dt * qd_new[a]
    x[9] = vbx
    x[10] = vby
    x[11] = wb
    x[6] += dt * vbx
    x[7] += dt * vby
    x[8] += dt * wb

    out_info[0] = phi
    out_info[1] = nx
    out_info[2] = ny
    out_info[3] = fn
    out_info[4] = fax
    out_info[5] = fay
    out_info[6] = gamma


@njit(cache=True, nogil=True)
def is_finite_state(x):
    for a in range(x.shape[0]):
        if not math.isfinite(x[a]):
            return False
    return True


@njit(cache=True, nogil=True)
def rollout_core(arm, box, x0, t0, U, model, gamma_dec, k_dec, c, substeps, dt, compensate, rec, chk, start):
    """Zero-order-hold rollout over control steps ``start .. U.shape[0] - 1``.

    The virtual force is the decision value ``gamma_dec[l]`` for CCCM and is
    re-evaluated from the current distance at every substep for the smooth
    models (``k_dec[l]`` is the stiffness for step l). ``rec`` receives one
    end-of-step row per control step (``REC_*`` columns).

    ``chk`` has ``N + 1`` rows; row l holds the internal state at the start of
    step l, with the box position measured from the initial box position,
    which ``chk[0, 6:8]`` keeps. For ``start == 0`` the state comes from
    ``x0`` (world frame) and every row is filled. For ``start > 0`` rows
    ``0 .. start`` must already hold a previous rollout's checkpoints and the
    run continues from row ``start``, bit for bit as if it had never stopped;
    ``x0`` is then ignored.

    Returns -1 on success, otherwise the index of the control step whose
    state went non-finite.
    """
    N = U.shape[0]
    if start == 0:
        x = x0.copy()
        ox = x0[6]
        oy = x0[7]
        x[6] = 0.0
        x[7] = 0.0
    else:
        x = chk[start].copy()
        ox = chk[0, 12]
        oy = chk[0, 13]
    info = np.empty(7)
    sd = np.empty(5)
    p = np.empty(2)
    v = np.empty(2)
    J = np.empty((2, 3))
    Ms = np.empty((3, 3))
    Js = np.empty((2, 3))
    W = np.empty((9, 5))
    for l in range(start, N):
        for a in range(12):
            chk[l, a] = x[a]
        chk[l, 12] = ox
        chk[l, 13] = oy
        u = U[l]
        param = gamma_dec[l] if model == MODEL_CCCM else k_dec[l]
        for s in range(substeps):
            step_core(arm, box, x, u, model, param, c, dt, compensate, info, Ms, Js, W, ox, oy)
        if not is_finite_state(x):
            return l
        # end-of-step record
        ee_kinematics(arm, x[0:3], x[3:6], p, v, J)
        box_sdf(box[BOX_H], x[6], x[7], x[8], p[0] - ox, p[1] - oy, sd)
        phi = sd[0]
        if model == MODEL_CCCM:
            gam = gamma_dec[l]
        else:
            gam = smooth_force(k_dec[l], c, phi)
        rec[l, REC_T] = t0 + ((l + 1) * substeps) * dt
        for a in range(6):
            rec[l, REC_Q + a] = x[a]
        for a in range(6):
            rec[l, REC_BOX + a] = x[6 + a]
        rec[l, REC_BOX] += ox
        rec[l, REC_BOX + 1] += oy
        rec[l, REC_PHI] = phi
        rec[l, REC_GAMMA] = gam
        # actual contact force on the box during the last substep of the period
        rec[l, REC_FN] = info[3]
        rec[l, REC_F] = info[4]
        rec[l, REC_F + 1] = info[5]
        rec[l, REC_EEV] = v[0]
        rec[l, REC_EEV + 1] = v[1]
        if not math.isfinite(gam) or not math.isfinite(phi):
            return l
    for a in range(12):
        chk[N, a] = x[a]
    chk[N, 12] = ox
    chk[N, 13] = oy
    return -1
