"""Independent reference computations shared by the tests."""
import math

import numpy as np
import torch


def central_difference_grad(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` (float64), one coordinate at a time."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + eps
            hi = float(f(x))
            flat[k] = old - eps
            lo = float(f(x))
            flat[k] = old
            gflat[k] = (hi - lo) / (2 * eps)
    return g


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float((a - b).norm())
    den = max(float(a.norm()), float(b.norm()), 1e-12)
    return num / den


def abs_cosines_loop(kernels):
    """Per layer, a plain-python list of |cos| over pairs i < j."""
    out = []
    for k in kernels:
        rows = [np.asarray(r, dtype=np.float64).ravel() for r in k]
        vals = []
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                ni, nj = np.linalg.norm(rows[i]), np.linalg.norm(rows[j])
                vals.append(0.0 if ni == 0 or nj == 0 else abs(rows[i] @ rows[j]) / (ni * nj))
        out.append(vals)
    return out


def brute_force_tc(mu, sigma, z):
    """Exact TC sample average when the whole dataset is the batch.

    q(z) = (1/N) sum_n q(z | x_n) with N = B, evaluated with explicit loops.
    """
    mu, sigma, z = (np.asarray(t, dtype=np.float64) for t in (mu, sigma, z))
    N, d = mu.shape

    def log_normal(x, m, s):
        return -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)

    total = 0.0
    for i in range(N):
        joint = [sum(log_normal(z[i, j], mu[n, j], sigma[n, j]) for j in range(d)) for n in range(N)]
        log_qz = np.logaddexp.reduce(joint) - math.log(N)
        log_marg = 0.0
        for j in range(d):
            terms = [log_normal(z[i, j], mu[n, j], sigma[n, j]) for n in range(N)]
            log_marg += np.logaddexp.reduce(terms) - math.log(N)
        total += log_qz - log_marg
    return total / N
