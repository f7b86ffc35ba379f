"""Independent oracles shared by the test modules."""

import math

import numpy as np
import torch


def central_differences(f, x: torch.Tensor, h: float = 1e-6, max_entries: int | None = None, seed: int = 0):
    """Central finite-difference gradient of scalar ``f`` w.r.t. ``x`` (float64).

    Returns ``(indices, numeric)``; with ``max_entries`` only a random subset
    of flat indices is probed.
    """
    flat = x.data.view(-1)
    n = flat.numel()
    if max_entries is None or max_entries >= n:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(seed).choice(n, size=max_entries, replace=False)
    out = np.empty(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            out[k] = (fp - fm) / (2 * h)
    return idx, out


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck_module(loss_fn, tensors, max_entries=40, h=1e-6):
    """Relative error (norm-wise, over all probed entries of ``tensors``)
    between autograd and central finite differences.

    Entries whose true gradient is exactly zero (e.g. biases cancelled by a
    following normalisation) would make per-tensor ratios meaningless, so
    the comparison is made on the concatenated vector.
    """
    for p in tensors:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic, numeric = [], []
    for j, p in enumerate(tensors):
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        flat = grad.detach().reshape(-1).numpy().copy()
        idx, num = central_differences(loss_fn, p, h=h, max_entries=max_entries, seed=j)
        analytic.append(flat[idx])
        numeric.append(num)
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


class ReferenceDDPM:
    """Textbook constant-resolution DDPM written from scratch with Python floats."""

    def __init__(self, betas):
        self.betas = [float(b) for b in betas]
        self.alpha_bar = [1.0]
        for b in self.betas:
            self.alpha_bar.append(self.alpha_bar[-1] * (1.0 - b))

    def q_sample(self, x0, t, eps):
        ab = self.alpha_bar[t]
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps

    def posterior(self, t):
        b = self.betas[t - 1]
        ab, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        coef_x0 = math.sqrt(ab_prev) * b / (1.0 - ab)
        coef_xt = math.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
        var = (1.0 - ab_prev) / (1.0 - ab) * b
        return coef_x0, coef_xt, var

    def p_step(self, x_t, x0_hat, t, eps):
        c0, ct, var = self.posterior(t)
        mean = c0 * x0_hat + ct * x_t
        return mean if t == 1 else mean + math.sqrt(var) * eps
