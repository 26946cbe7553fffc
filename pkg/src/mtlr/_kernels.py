"""Hot numerical kernels for the solvers.

Every function here is compiled with numba ``@njit`` unless the environment
variable ``MTLR_DISABLE_NUMBA`` is set to ``1``/``true``/``yes``/``on``, in
which case the same code runs as plain numpy/Python. The two paths compute
identical quantities; the flag exists for debugging and for the kernel
benchmark under ``benchmarks/``.

Conventions: all arrays are float64 and C-contiguous; per-task data is
stacked along axis 0; eigenvalues are sorted nonincreasing. Summations use
a fixed task order so results do not depend on thread or worker counts.
"""

from __future__ import annotations

import os

import numpy as np


def _flag_disabled() -> bool:
    return os.environ.get("MTLR_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


NUMBA_ENABLED = not _flag_disabled()
if NUMBA_ENABLED:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:

    def hot(fn):
        return _njit(cache=True, fastmath=False)(fn)

else:

    def hot(fn):
        return fn


@hot
def _quad_form(s, v):
    # v' s v for symmetric s, clamped at zero
    d = v.shape[0]
    acc = 0.0
    for i in range(d):
        row = 0.0
        for j in range(d):
            row += s[i, j] * v[j]
        acc += row * v[i]
    return max(acc, 0.0)


@hot
def batch_seminorm_sq(sigmas, diffs):
    """Per-task values diffs_j' sigma_j diffs_j, clamped at zero."""
    m = sigmas.shape[0]
    out = np.empty(m)
    for j in range(m):
        out[j] = _quad_form(sigmas[j], diffs[j])
    return out


# ---------------------------------------------------------------------------
# Matrix-weighted linear solver: Huber-IRLS on the center-reduced objective.
#
# With the task blocks eliminated in closed form (whitened block soft
# threshold), the joint objective reduces to
#     G(u) = sum_j w_j * (f_j(ols_j) + Huber_{lam_j}(r_j(u)))
# where r_j(u)^2 = a_j - 2 t_j'u + u' S_j u in the common-range basis. Each
# IRLS pass solves the exact quadratic majorizer of G, so G is nonincreasing
# and the iteration converges to the global minimizer of the joint problem.
# ---------------------------------------------------------------------------


@hot
def linear_center_irls(sig_u, t_u, a, f_ols, lambdas, weights, u0, rel_tol, max_iters):
    """Minimize the center-reduced matrix-weighted objective.

    sig_u : (m, r, r) per-task second moments in the common-range basis
    t_u   : (m, r) per-task sigma_j @ ols_j in the basis
    a     : (m,) per-task ols_j' sigma_j ols_j
    f_ols : (m,) per-task loss at the unregularized solution

    Returns (u, obj_hist, iters, converged); obj_hist[:iters+1] holds the
    exact joint objective after each center pass.
    """
    m, r = t_u.shape
    obj_hist = np.empty(max_iters + 1)
    u = u0.copy()
    base = 0.0
    for j in range(m):
        base += weights[j] * f_ols[j]
    if r == 0:
        obj_hist[0] = base
        return u, obj_hist, 0, True

    h = np.empty(m)
    mat = np.empty((r, r))
    rhs = np.empty(r)

    pen = 0.0
    for j in range(m):
        su = np.dot(sig_u[j], u)
        rsq = a[j] - 2.0 * np.dot(t_u[j], u) + np.dot(u, su)
        rj = np.sqrt(max(rsq, 0.0))
        lj = lambdas[j]
        if lj <= 0.0:
            h[j] = 0.0
        elif rj <= lj:
            pen += weights[j] * 0.5 * rj * rj
            h[j] = weights[j]
        else:
            pen += weights[j] * (lj * rj - 0.5 * lj * lj)
            h[j] = weights[j] * lj / rj
    obj = base + pen
    obj_hist[0] = obj

    iters = 0
    converged = False
    for it in range(max_iters):
        # quadratic majorizer solve
        for p in range(r):
            rhs[p] = 0.0
            for q in range(r):
                mat[p, q] = 0.0
        active = False
        for j in range(m):
            hj = h[j]
            if hj <= 0.0:
                continue
            active = True
            for p in range(r):
                rhs[p] += hj * t_u[j, p]
                for q in range(r):
                    mat[p, q] += hj * sig_u[j, p, q]
        if not active:
            converged = True
            break
        tr = 0.0
        for p in range(r):
            tr += mat[p, p]
        jitter = 1e-13 * tr / r + 1e-300
        for p in range(r):
            mat[p, p] += jitter
        u_new = np.linalg.solve(mat, rhs)

        new_obj = 0.0
        for j in range(m):
            su = np.dot(sig_u[j], u_new)
            rsq = a[j] - 2.0 * np.dot(t_u[j], u_new) + np.dot(u_new, su)
            rj = np.sqrt(max(rsq, 0.0))
            lj = lambdas[j]
            if lj <= 0.0:
                h[j] = 0.0
            elif rj <= lj:
                new_obj += weights[j] * 0.5 * rj * rj
                h[j] = weights[j]
            else:
                new_obj += weights[j] * (lj * rj - 0.5 * lj * lj)
                h[j] = weights[j] * lj / rj
        new_obj += base
        iters = it + 1
        if new_obj > obj:
            # float-level stagnation; keep the previous center
            obj_hist[iters] = obj
            converged = True
            break
        u = u_new
        obj_hist[iters] = new_obj
        if obj - new_obj <= rel_tol * (1.0 + abs(obj)):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    return u, obj_hist, iters, converged


# ---------------------------------------------------------------------------
# Weiszfeld center update for the penalty term sum_j c_j ||theta_j - beta||_j
# (the block update used inside the GLM solver and exposed as an operation).
# ---------------------------------------------------------------------------


@hot
def weiszfeld_center(sig_u, t_u, a, coefs, eps, u0, rel_tol, max_inner):
    """Smoothed Weiszfeld iteration for the matrix-weighted median.

    sig_u, t_u, a are as in :func:`linear_center_irls` but built from the
    current task parameters instead of the unregularized solutions; coefs
    holds w_j * lam_j. Returns (u, inner_iters).
    """
    m, r = t_u.shape
    u = u0.copy()
    if r == 0:
        return u, 0
    mat = np.empty((r, r))
    rhs = np.empty(r)
    iters = 0
    for it in range(max_inner):
        for p in range(r):
            rhs[p] = 0.0
            for q in range(r):
                mat[p, q] = 0.0
        for j in range(m):
            if coefs[j] <= 0.0:
                continue
            su = np.dot(sig_u[j], u)
            rsq = a[j] - 2.0 * np.dot(t_u[j], u) + np.dot(u, su)
            denom = np.sqrt(max(rsq, 0.0) + eps * eps)
            if denom < 1e-300:
                denom = 1e-300
            cj = coefs[j] / denom
            for p in range(r):
                rhs[p] += cj * t_u[j, p]
                for q in range(r):
                    mat[p, q] += cj * sig_u[j, p, q]
        tr = 0.0
        for p in range(r):
            tr += mat[p, p]
        if tr <= 0.0:
            break
        jitter = 1e-13 * tr / r + 1e-300
        for p in range(r):
            mat[p, p] += jitter
        u_new = np.linalg.solve(mat, rhs)
        iters = it + 1
        delta = 0.0
        scale = 1.0
        for p in range(r):
            delta = max(delta, abs(u_new[p] - u[p]))
            scale = max(scale, abs(u_new[p]))
        u = u_new
        if delta <= rel_tol * scale:
            break
    return u, iters


# ---------------------------------------------------------------------------
# ARMUL linear solver: L-BFGS on the center-reduced objective with exact
# per-task block solves via a secular equation in each task's eigenbasis.
# ---------------------------------------------------------------------------


@hot
def _armul_task_env(svals, g, lam, v_out):
    """Exact block solve of min_v 0.5 sum s v^2 + g'v + lam ||v||.

    Works in a task's eigenbasis. Fills v_out and returns (env_extra, r)
    where env_extra = 0.5 sum s v^2 + g'v + lam*r is the objective change
    relative to v = 0 and r = ||v||.
    """
    d = svals.shape[0]
    gn = 0.0
    for k in range(d):
        gn += g[k] * g[k]
    gn = np.sqrt(gn)
    if lam <= 0.0:
        # unregularized: minimize over the positive-eigenvalue coordinates
        smax = 0.0
        for k in range(d):
            if svals[k] > smax:
                smax = svals[k]
        cut = 1e-10 * smax
        extra = 0.0
        rr = 0.0
        for k in range(d):
            if svals[k] > cut:
                v_out[k] = -g[k] / svals[k]
                extra += 0.5 * svals[k] * v_out[k] * v_out[k] + g[k] * v_out[k]
                rr += v_out[k] * v_out[k]
            else:
                v_out[k] = 0.0
        return extra, np.sqrt(rr)
    if gn <= lam:
        for k in range(d):
            v_out[k] = 0.0
        return 0.0, 0.0
    # bracket the radius: rho(r)/r is strictly decreasing with limit < 1
    hi = 1.0
    for _ in range(600):
        rho = 0.0
        for k in range(d):
            denom = svals[k] + lam / hi
            val = g[k] / denom
            rho += val * val
        if np.sqrt(rho) <= hi:
            break
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= 0.0:
            break
        rho = 0.0
        for k in range(d):
            denom = svals[k] + lam / mid
            val = g[k] / denom
            rho += val * val
        if np.sqrt(rho) > mid:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17 * hi:
            break
    r = 0.5 * (lo + hi)
    extra = 0.0
    rr = 0.0
    for k in range(d):
        v_out[k] = -g[k] / (svals[k] + lam / r)
        extra += 0.5 * svals[k] * v_out[k] * v_out[k] + g[k] * v_out[k]
        rr += v_out[k] * v_out[k]
    r = np.sqrt(rr)
    return extra + lam * r, r


@hot
def armul_reduced_value_grad(eigvals, eigvecs, b_eig, f_beta0, lambdas, weights, beta, grad_out):
    """Reduced ARMUL objective G(beta) and its gradient.

    eigvals  : (m, d) per-task eigenvalues (nonincreasing)
    eigvecs  : (m, d, d) matching eigenvectors (columns)
    b_eig    : (m, d) per-task (X'Y/n) rotated into the eigenbasis
    f_beta0  : (m,) per-task loss constant 0.5*||Y||^2/n

    G(beta) = sum_j w_j min_theta (f_j(theta) + lam_j ||theta - beta||_2).
    The gradient is the envelope gradient; it is continuous because the
    block minimizer is unique.
    """
    m, d = b_eig.shape
    for i in range(d):
        grad_out[i] = 0.0
    g = np.empty(d)
    v = np.empty(d)
    total = 0.0
    for j in range(m):
        q = eigvecs[j]
        bt = np.dot(beta, q)  # beta in this task's eigenbasis
        fb = f_beta0[j]
        for k in range(d):
            fb += 0.5 * eigvals[j, k] * bt[k] * bt[k] - b_eig[j, k] * bt[k]
            g[k] = eigvals[j, k] * bt[k] - b_eig[j, k]
        extra, r = _armul_task_env(eigvals[j], g, lambdas[j], v)
        total += weights[j] * (fb + extra)
        if r > 0.0:
            # d env / d beta = -lam * Q v / r
            coef = -weights[j] * lambdas[j] / r
            for i in range(d):
                acc = 0.0
                for k in range(d):
                    acc += q[i, k] * v[k]
                grad_out[i] += coef * acc
        else:
            # snapped block: envelope equals the raw loss locally
            for i in range(d):
                acc = 0.0
                for k in range(d):
                    acc += q[i, k] * g[k]
                grad_out[i] += weights[j] * acc
    return total


@hot
def armul_center_lbfgs(eigvals, eigvecs, b_eig, f_beta0, lambdas, weights, beta0, rel_tol, max_iters):
    """Minimize the reduced ARMUL objective by L-BFGS with backtracking.

    Returns (beta, obj_hist, iters, converged). obj_hist[:iters+1] is the
    exact objective after each accepted step and is nonincreasing.
    """
    d = beta0.shape[0]
    mem = 8
    s_hist = np.zeros((mem, d))
    y_hist = np.zeros((mem, d))
    rho = np.zeros(mem)
    alpha = np.zeros(mem)
    n_hist = 0
    head = 0

    beta = beta0.copy()
    grad = np.empty(d)
    grad_new = np.empty(d)
    direction = np.empty(d)
    beta_try = np.empty(d)
    obj_hist = np.empty(max_iters + 1)
    obj = armul_reduced_value_grad(eigvals, eigvecs, b_eig, f_beta0, lambdas, weights, beta, grad)
    obj_hist[0] = obj
    iters = 0
    converged = False
    for it in range(max_iters):
        gn2 = 0.0
        for i in range(d):
            gn2 += grad[i] * grad[i]
        if gn2 <= 1e-30 * (1.0 + abs(obj)):
            converged = True
            break
        # two-loop recursion for the quasi-Newton direction
        for i in range(d):
            direction[i] = grad[i]
        for hh in range(n_hist):
            idx = (head - 1 - hh) % mem
            av = rho[idx] * np.dot(s_hist[idx], direction)
            alpha[idx] = av
            for i in range(d):
                direction[i] -= av * y_hist[idx, i]
        if n_hist > 0:
            last = (head - 1) % mem
            ys = np.dot(s_hist[last], y_hist[last])
            yy = np.dot(y_hist[last], y_hist[last])
            if yy > 0.0:
                scale = ys / yy
                for i in range(d):
                    direction[i] *= scale
        for hh in range(n_hist):
            idx = (head - n_hist + hh) % mem
            bcoef = rho[idx] * np.dot(y_hist[idx], direction)
            for i in range(d):
                direction[i] += s_hist[idx, i] * (alpha[idx] - bcoef)
        # backtracking line search along -direction; fall back to -grad
        accepted = False
        new_obj = obj
        for attempt in range(2):
            if attempt == 1:
                for i in range(d):
                    direction[i] = grad[i]
            dec = 0.0
            for i in range(d):
                dec += grad[i] * direction[i]
            if dec <= 0.0:
                continue
            step = 1.0
            for _ in range(70):
                for i in range(d):
                    beta_try[i] = beta[i] - step * direction[i]
                new_obj = armul_reduced_value_grad(
                    eigvals, eigvecs, b_eig, f_beta0, lambdas, weights, beta_try, grad_new
                )
                if new_obj <= obj - 1e-4 * step * dec:
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        iters = it + 1
        if not accepted or new_obj > obj:
            obj_hist[iters] = obj
            converged = True
            break
        # curvature-pair update
        sy = 0.0
        snorm = 0.0
        ynorm = 0.0
        for i in range(d):
            sdelta = beta_try[i] - beta[i]
            ydelta = grad_new[i] - grad[i]
            s_hist[head, i] = sdelta
            y_hist[head, i] = ydelta
            sy += sdelta * ydelta
            snorm += sdelta * sdelta
            ynorm += ydelta * ydelta
        if sy > 1e-12 * np.sqrt(snorm * ynorm) + 1e-300:
            rho[head] = 1.0 / sy
            head = (head + 1) % mem
            if n_hist < mem:
                n_hist += 1
        for i in range(d):
            beta[i] = beta_try[i]
            grad[i] = grad_new[i]
        obj_hist[iters] = new_obj
        if obj - new_obj <= rel_tol * (1.0 + abs(obj)):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    return beta, obj_hist, iters, converged


@hot
def armul_block_solve(eigvals, eigvecs, b_eig, lambdas, beta, thetas_out):
    """Exact ARMUL block minimizers at a fixed center; fills thetas_out."""
    m, d = b_eig.shape
    g = np.empty(d)
    v = np.empty(d)
    for j in range(m):
        q = eigvecs[j]
        bt = np.dot(beta, q)
        for k in range(d):
            g[k] = eigvals[j, k] * bt[k] - b_eig[j, k]
        _armul_task_env(eigvals[j], g, lambdas[j], v)
        for i in range(d):
            acc = 0.0
            for k in range(d):
                acc += q[i, k] * v[k]
            thetas_out[j, i] = beta[i] + acc
    return 0


# ---------------------------------------------------------------------------
# GLM kernels (logistic family).
# ---------------------------------------------------------------------------


@hot
def logistic_value_grad(x, xt, y, theta, grad_out):
    """Mean negative log-likelihood and gradient for logistic regression."""
    n = x.shape[0]
    d = x.shape[1]
    z = np.dot(x, theta)
    val = 0.0
    resid = np.empty(n)
    for i in range(n):
        zi = z[i]
        if zi > 0.0:
            val += zi + np.log1p(np.exp(-zi)) - y[i] * zi
            mz = 1.0 / (1.0 + np.exp(-zi))
        else:
            val += np.log1p(np.exp(zi)) - y[i] * zi
            ez = np.exp(zi)
            mz = ez / (1.0 + ez)
        resid[i] = mz - y[i]
    gv = np.dot(xt, resid)
    for k in range(d):
        grad_out[k] = gv[k] / n
    return val / n


@hot
def _project_ball(theta, xi):
    nrm = 0.0
    for i in range(theta.shape[0]):
        nrm += theta[i] * theta[i]
    nrm = np.sqrt(nrm)
    if nrm > xi and nrm > 0.0:
        scale = xi / nrm
        for i in range(theta.shape[0]):
            theta[i] *= scale
    return theta


@hot
def glm_theta_step(x, xt, y, pen, pen_opn, sig_opn, beta, lam, eps, xi, theta0, max_iter, rel_tol):
    """Ball-constrained block solve for one GLM task.

    Minimizes f(theta) + lam * sqrt((theta-beta)' pen (theta-beta) + eps^2)
    over ||theta||_2 <= xi by monotone projected gradient with spectral
    (Barzilai-Borwein) steps and halving backtracking, then snaps to beta
    whenever beta attains an exact objective at least as good (the
    invariant-region case). Returns (theta, iters, converged, kkt_resid).
    """
    d = theta0.shape[0]
    eps_eff = eps if eps > 0.0 else 1e-12
    theta = theta0.copy()
    _project_ball(theta, xi)

    grad_f = np.empty(d)
    grad = np.empty(d)
    grad_new = np.empty(d)
    gf_new = np.empty(d)
    dev = np.empty(d)
    theta_new = np.empty(d)

    fv = logistic_value_grad(x, xt, y, theta, grad_f)
    for i in range(d):
        dev[i] = theta[i] - beta[i]
    pv = np.dot(pen, dev)
    s = np.sqrt(max(np.dot(dev, pv), 0.0) + eps_eff * eps_eff)
    fval = fv + lam * s
    for i in range(d):
        grad[i] = grad_f[i] + lam * pv[i] / s
    pv_new = pv.copy()
    s_new = s

    lip = 0.25 * sig_opn + lam * pen_opn / max(eps_eff, s)
    step = 1.0 / max(lip, 1e-12)
    iters = 0
    converged = False
    stall = 0
    for it in range(max_iter):
        accepted = False
        new_val = fval
        for _ in range(80):
            move2 = 0.0
            for i in range(d):
                theta_new[i] = theta[i] - step * grad[i]
            _project_ball(theta_new, xi)
            for i in range(d):
                move2 += (theta_new[i] - theta[i]) ** 2
            if move2 <= 1e-32 * (1.0 + np.dot(theta, theta)):
                break
            nv = logistic_value_grad(x, xt, y, theta_new, gf_new)
            for i in range(d):
                dev[i] = theta_new[i] - beta[i]
            pv_new = np.dot(pen, dev)
            s_new = np.sqrt(max(np.dot(dev, pv_new), 0.0) + eps_eff * eps_eff)
            new_val = nv + lam * s_new
            if new_val <= fval - 1e-4 * move2 / step:
                accepted = True
                break
            step *= 0.5
        iters = it + 1
        if not accepted:
            converged = True
            break
        # BB step from the accepted move
        sty = 0.0
        ss = 0.0
        for i in range(d):
            grad_new[i] = gf_new[i] + lam * pv_new[i] / s_new
            sd = theta_new[i] - theta[i]
            yd = grad_new[i] - grad[i]
            sty += sd * yd
            ss += sd * sd
        if sty > 1e-300:
            step = min(max(ss / sty, 1e-12), 1e12)
        else:
            step = min(step * 2.0, 1e12)
        gap = fval - new_val
        for i in range(d):
            theta[i] = theta_new[i]
            grad[i] = grad_new[i]
        fval = new_val
        if gap <= rel_tol * (1.0 + abs(fval)):
            stall += 1
            if stall >= 2:
                converged = True
                break
        else:
            stall = 0

    # exact-objective snap to the center (invariant region)
    nrm_b = 0.0
    for i in range(d):
        nrm_b += beta[i] * beta[i]
    if np.sqrt(nrm_b) <= xi * (1.0 + 1e-12):
        fb = logistic_value_grad(x, xt, y, beta, gf_new)
        for i in range(d):
            dev[i] = theta[i] - beta[i]
        pv2 = np.dot(pen, dev)
        exact_here = logistic_value_grad(x, xt, y, theta, gf_new) + lam * np.sqrt(
            max(np.dot(dev, pv2), 0.0)
        )
        if fb <= exact_here:
            for i in range(d):
                theta[i] = beta[i]
            _project_ball(theta, xi)

    # KKT residual of the smoothed problem at the returned point
    logistic_value_grad(x, xt, y, theta, grad_f)
    for i in range(d):
        dev[i] = theta[i] - beta[i]
    pv3 = np.dot(pen, dev)
    s3 = np.sqrt(max(np.dot(dev, pv3), 0.0) + eps_eff * eps_eff)
    tprobe = 1.0 / max(0.25 * sig_opn + lam * pen_opn / s3, 1e-12)
    kkt = 0.0
    for i in range(d):
        theta_new[i] = theta[i] - tprobe * (grad_f[i] + lam * pv3[i] / s3)
    _project_ball(theta_new, xi)
    for i in range(d):
        resid_i = abs(theta_new[i] - theta[i]) / tprobe
        if resid_i > kkt:
            kkt = resid_i
    return theta, iters, converged, kkt
