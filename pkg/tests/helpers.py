"""Shared builders and independent reference computations for the tests."""
import numpy as np

from flowslam.spline_flow import AffineRows, SplineRows, TriangularFlow, Whitening


def random_flow(dim=3, num_bins=4, hidden=(8,), rng=0, bound=3.0, scale=0.5, affine=False):
    """A flow with random whitening and random (non-identity) rows."""
    rng = np.random.default_rng(rng)
    if affine:
        rows = AffineRows(dim, {"lower": rng.normal(size=(dim, dim)), "log_scale": 0.3 * rng.normal(size=dim),
                                "shift": rng.normal(size=dim)})
    else:
        rows = SplineRows(dim, num_bins, hidden, bound, rng=rng)
        for k, v in rows.params.items():
            rows.params[k] = v + scale * rng.normal(size=v.shape)
    chol = np.tril(0.3 * rng.normal(size=(dim, dim)), -1) + np.diag(rng.uniform(0.5, 2.0, dim))
    white = Whitening(np.zeros(dim), rng.normal(size=dim), chol, np.zeros(dim, bool))
    return TriangularFlow(white, rows)


def numeric_jacobian(fun, x, eps=1e-6):
    x = np.asarray(x, float)
    cols = []
    for k in range(len(x)):
        d = np.zeros_like(x)
        d[k] = eps
        cols.append((fun(x + d) - fun(x - d)) / (2 * eps))
    return np.stack(cols, axis=1)


def numeric_param_gradient(fun, params, eps=1e-6):
    """Central differences of ``fun()`` with respect to every entry of ``params``."""
    out = {}
    for key, val in params.items():
        g = np.zeros_like(val)
        flat, gflat = val.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fun()
            flat[i] = old - eps
            down = fun()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out[key] = g
    return out


def relative_error(a: dict, b: dict) -> float:
    va = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    vb = np.concatenate([np.ravel(b[k]) for k in sorted(b)])
    return float(np.linalg.norm(va - vb) / max(np.linalg.norm(vb), 1e-12))


def gaussian_chain_smoother(num_poses, prior_mean, prior_cov, steps, step_cov, end_prior=None):
    """Closed-form posterior of a linear chain x_{k+1} = x_k + u_k + noise.

    Builds the joint information matrix and solves it directly, so it is
    independent of any elimination ordering. ``end_prior`` is an optional
    ``(mean, cov)`` prior on the last state.
    """
    d = len(prior_mean)
    n = num_poses * d
    lam = np.zeros((n, n))
    eta = np.zeros(n)
    pinv = np.linalg.inv(prior_cov)
    lam[:d, :d] += pinv
    eta[:d] += pinv @ prior_mean
    sinv = np.linalg.inv(step_cov)
    for k, u in enumerate(steps):
        i, j = slice(k * d, (k + 1) * d), slice((k + 1) * d, (k + 2) * d)
        lam[i, i] += sinv
        lam[j, j] += sinv
        lam[i, j] -= sinv
        lam[j, i] -= sinv
        eta[i] -= sinv @ u
        eta[j] += sinv @ u
    if end_prior is not None:
        m, c = end_prior
        einv = np.linalg.inv(c)
        lam[-d:, -d:] += einv
        eta[-d:] += einv @ np.asarray(m, float)
    cov = np.linalg.inv(lam)
    return cov @ eta, cov


def laplace_posterior(graph, x0, step=1e-5):
    """Mode and inverse negative Hessian of ``graph.log_density``.

    The mode is found with BFGS from ``x0``; the Hessian comes from central
    differences. Columns follow the graph's variable order.
    """
    from scipy import optimize

    names = list(graph.variables)
    dims = [graph.variables[v].dims for v in names]

    def unpack(x):
        x = np.atleast_2d(x)
        out, c = {}, 0
        for v, d in zip(names, dims):
            out[v] = x[:, c:c + d]
            c += d
        return out

    def nlp(x):
        return -float(graph.log_density(unpack(x))[0])

    res = optimize.minimize(nlp, np.asarray(x0, float), method="BFGS", options={"gtol": 1e-10})
    mode = res.x
    n = len(mode)
    hess = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            e_i, e_j = np.eye(n)[i] * step, np.eye(n)[j] * step
            hess[i, j] = hess[j, i] = (nlp(mode + e_i + e_j) - nlp(mode + e_i - e_j)
                                       - nlp(mode - e_i + e_j) + nlp(mode - e_i - e_j)) / (4 * step * step)
    return mode, np.linalg.inv(hess)
