"""Per-sample closed-loop kernel compiled with numba.

One call advances the loop over a block of samples. Everything stateful
lives in arrays owned by :class:`stmlab.loop.Loop` so the kernel can be
resumed chunk by chunk between Python-side state machines.
"""
import math

import numpy as np
from numba import njit

# scalar parameter slots
P_KI = 0
P_WC = 1
P_T = 2
P_CLAMP = 3
P_REF = 4  # ln setpoint (volts-equivalent after preamp gain)
P_FBMODE = 5  # 0: ln |preamp|, 1: ln |lock-in fundamental|
P_FBSCALE = 6
P_FLOOR = 7  # R * I_min
P_CLOSED = 8
P_ZCOARSE = 9
P_DTHETA = 10  # modulation phase increment per sample (rad)
P_CAP = 11
P_ADC = 12
P_ISTOP = 13  # stop when |I| exceeds this (<= 0 disables)
P_A = 14
P_R = 15
P_LITHO = 16
P_TAU_D = 17
P_CONDF = 18
P_PHIF = 19
N_PARAM = 20

# state slots
S_ACC = 0
S_EPREV = 1
S_U = 2
S_FB = 3
S_THETA = 4
S_CLIPS = 5
S_NEVENT = 6
N_STATE = 7

# record columns
R_U = 0
R_Y1 = 1
R_Z = 2
R_GAP = 3
R_I = 4
R_V = 5
R_VF = 6
R_FB = 7
R_E = 8
R_BIAS = 9
R_THETA = 10
N_REC = 11  # followed by (X, Q) per tracked harmonic

STATUS_OK = 0
STATUS_CRASH = 1
STATUS_OUT_OF_BOUNDS = 2
STATUS_CURRENT_TRIP = 3

GAP_K = 1.025
TWO_PI = 2.0 * math.pi


@njit(cache=True)
def _sos_step(sos, zi, x):
    for k in range(sos.shape[0]):
        b0 = sos[k, 0]
        y = b0 * x + zi[k, 0]
        zi[k, 0] = sos[k, 1] * x - sos[k, 4] * y + zi[k, 1]
        zi[k, 1] = sos[k, 2] * x - sos[k, 5] * y
        x = y
    return x


@njit(cache=True)
def run_chunk(
    p, st, xs, ys, vdc, vm, u1, u2, noise,
    height, phi, conduct, kind, v_desorb, dwell,
    hp_sos, hp_zi, ga_sos, ga_zi, nt_sos, nt_zi,
    harm, li_sos, li_zi, cal_re, cal_im,
    rec, events,
):
    n = xs.shape[0]
    ki = p[P_KI]
    wc = p[P_WC]
    T = p[P_T]
    clamp = p[P_CLAMP]
    ref = p[P_REF]
    mode = int(p[P_FBMODE])
    fbscale = p[P_FBSCALE]
    floor = p[P_FLOOR]
    closed = p[P_CLOSED] > 0.5
    zc = p[P_ZCOARSE]
    dth = p[P_DTHETA]
    cap = p[P_CAP]
    adc = p[P_ADC]
    istop = p[P_ISTOP]
    a = p[P_A]
    litho = p[P_LITHO] > 0.5
    omega = dth / T
    rows = height.shape[0]
    cols = height.shape[1]
    K = conduct.shape[2]
    nh = harm.shape[0]
    has_noise = noise.shape[0] == n
    maxev = events.shape[0]

    acc = st[S_ACC]
    eprev = st[S_EPREV]
    u = st[S_U]
    fb = st[S_FB]
    theta = st[S_THETA]

    for t in range(n):
        # controller sees last sample's feedback (one-sample loop delay)
        e = ref + u1[t] - fb
        if closed:
            acc_new = acc + ki * T * 0.5 * (e + eprev)
            un = acc_new + ki * e / wc
            if un > clamp:
                u = clamp
            elif un < -clamp:
                u = -clamp
            else:
                u = un
                acc = acc_new
        else:
            acc = u
        eprev = e
        y1 = u + u2[t]
        z = _sos_step(hp_sos, hp_zi, y1)

        # surface under the tip
        gx = xs[t] / a
        gy = ys[t] / a
        if gx < -1e-9 or gy < -1e-9 or gx > cols - 1 + 1e-9 or gy > rows - 1 + 1e-9:
            st[S_ACC] = acc
            st[S_EPREV] = eprev
            st[S_U] = u
            st[S_FB] = fb
            st[S_THETA] = theta
            return STATUS_OUT_OF_BOUNDS, t
        j0 = int(math.floor(gx))
        i0 = int(math.floor(gy))
        if j0 > cols - 2:
            j0 = cols - 2
        if i0 > rows - 2:
            i0 = rows - 2
        if j0 < 0:
            j0 = 0
        if i0 < 0:
            i0 = 0
        j1 = min(j0 + 1, cols - 1)
        i1 = min(i0 + 1, rows - 1)
        fx = gx - j0 if j1 > j0 else 0.0
        fy = gy - i0 if i1 > i0 else 0.0
        fx = min(max(fx, 0.0), 1.0)
        fy = min(max(fy, 0.0), 1.0)
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        h = w00 * height[i0, j0] + w01 * height[i0, j1] + w10 * height[i1, j0] + w11 * height[i1, j1]
        ph = w00 * phi[i0, j0] + w01 * phi[i0, j1] + w10 * phi[i1, j0] + w11 * phi[i1, j1]

        gap = zc - z - h
        sn = math.sin(theta)
        cs = math.cos(theta)
        V = vdc[t] + vm[t] * sn
        L = 0.0
        for k in range(K - 1, -1, -1):
            c = (w00 * conduct[i0, j0, k] + w01 * conduct[i0, j1, k]
                 + w10 * conduct[i1, j0, k] + w11 * conduct[i1, j1, k])
            L = L * V + c
        itun = L * math.exp(-GAP_K * gap * math.sqrt(ph))
        itot = itun + cap * vm[t] * omega * cs

        v = _sos_step(ga_sos, ga_zi, itot)
        if has_noise:
            v += noise[t]
        if v > adc:
            v = adc
            st[S_CLIPS] += 1
        elif v < -adc:
            v = -adc
            st[S_CLIPS] += 1

        # lock-in on the raw preamp output
        for q in range(nh):
            hq = harm[q]
            sh = math.sin(hq * theta)
            chq = math.cos(hq * theta)
            xi = _sos_step(li_sos, li_zi[2 * q], v * sh) * 2.0
            xq = _sos_step(li_sos, li_zi[2 * q + 1], v * chq) * 2.0
            rec[t, N_REC + 2 * q] = xi * cal_re[q] - xq * cal_im[q]
            rec[t, N_REC + 2 * q + 1] = xi * cal_im[q] + xq * cal_re[q]

        vf = _sos_step(nt_sos, nt_zi, v)
        if mode == 0:
            mag = abs(vf)
        else:
            mag = abs(rec[t, N_REC]) * fbscale
        if mag < floor:
            mag = floor
        fb_new = math.log(mag)

        rec[t, R_U] = u
        rec[t, R_Y1] = y1
        rec[t, R_Z] = z
        rec[t, R_GAP] = gap
        rec[t, R_I] = itun
        rec[t, R_V] = v
        rec[t, R_VF] = vf
        rec[t, R_FB] = fb
        rec[t, R_E] = e
        rec[t, R_BIAS] = V
        rec[t, R_THETA] = theta
        fb = fb_new

        theta += dth
        if theta >= TWO_PI:
            theta -= TWO_PI

        if litho:
            ni = int(math.floor(gy + 0.5))
            nj = int(math.floor(gx + 0.5))
            ni = min(max(ni, 0), rows - 1)
            nj = min(max(nj, 0), cols - 1)
            if kind[ni, nj] == 0 and abs(V) >= v_desorb[ni, nj]:
                dwell[ni, nj] += T
                if dwell[ni, nj] >= p[P_TAU_D]:
                    kind[ni, nj] = 1
                    phi[ni, nj] *= p[P_PHIF]
                    for k in range(K):
                        conduct[ni, nj, k] *= p[P_CONDF]
                    ne = int(st[S_NEVENT])
                    if ne < maxev:
                        events[ne, 0] = t
                        events[ne, 1] = ni
                        events[ne, 2] = nj
                    st[S_NEVENT] = ne + 1

        if gap < 0.0 or (istop > 0.0 and abs(itun) > istop):
            st[S_ACC] = acc
            st[S_EPREV] = eprev
            st[S_U] = u
            st[S_FB] = fb
            st[S_THETA] = theta
            if gap < 0.0:
                return STATUS_CRASH, t + 1
            return STATUS_CURRENT_TRIP, t + 1

    st[S_ACC] = acc
    st[S_EPREV] = eprev
    st[S_U] = u
    st[S_FB] = fb
    st[S_THETA] = theta
    return STATUS_OK, n
