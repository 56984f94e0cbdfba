"""Brute-force reference implementations, kept independent of the library code paths."""

from __future__ import annotations

import cmath
import math

import numpy as np
import torch


def peaks_bruteforce(d: np.ndarray, phi_prime: float = 0.5, phi_zero: float = 0.01,
                     near: float = 0.8, floor: float = 1e-12):
    """Return (chi, q_sig, q_near, fallback) as sets of (x, y) by explicit scanning."""
    h, w = d.shape
    chi = set()
    for i in range(h):
        for j in range(w):
            best = max(d[a, b] for a in range(max(0, i - 1), min(h, i + 2))
                       for b in range(max(0, j - 1), min(w, j + 2)))
            if d[i, j] == best:
                chi.add((j, i))
    top = max(d[i, j] for i in range(h) for j in range(w))
    phi = phi_prime * top
    sig = {(x, y) for (x, y) in chi if d[y, x] >= phi}
    nt = {(j, i) for i in range(h) for j in range(w) if near * phi <= d[i, j] < phi}
    fallback = top <= floor or not sig
    if fallback:
        k = max(1, math.floor(phi_zero * h * w))
        flat = [(-d[i, j], i * w + j) for i in range(h) for j in range(w)]
        flat.sort()
        sig = {(idx % w, idx // w) for _, idx in flat[:k]}
        nt -= sig
    return chi, sig, nt, fallback


def isolation_bruteforce(points: set) -> float:
    pts = list(points)
    if not pts:
        return 1.0
    iso = 0
    for p in pts:
        if not any(q != p and max(abs(q[0] - p[0]), abs(q[1] - p[1])) <= 2 for q in pts):
            iso += 1
    return iso / len(pts)


def naive_dft2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    acc += x[m, n] * cmath.exp(-2j * math.pi * (u * m / h + v * n / w))
            out[u, v] = acc
    return out


def freq_naive(delta: np.ndarray) -> float:
    """delta: (C, H, W)."""
    vals = []
    for ch in delta:
        mag = np.abs(naive_dft2(ch))
        vals.append((mag.sum() - mag[0, 0]) / (mag.size - 1))
    return float(np.mean(vals))


def tv_loops(delta: np.ndarray) -> float:
    vals = []
    for ch in delta:
        h, w = ch.shape
        s = 0.0
        for i in range(h):
            for j in range(w - 1):
                s += abs(ch[i, j + 1] - ch[i, j])
        for i in range(h - 1):
            for j in range(w):
                s += abs(ch[i + 1, j] - ch[i, j])
        vals.append(s / (h * w))
    return float(np.mean(vals))


def prominence_bruteforce(d: np.ndarray, mask: np.ndarray) -> float:
    h, w = d.shape
    vals = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            nb = [d[a, b] for a in range(max(0, i - 1), min(h, i + 2))
                  for b in range(max(0, j - 1), min(w, j + 2)) if (a, b) != (i, j)]
            vals.append(d[i, j] - max(nb))
    return float(np.mean(vals))


def ssim_constant(a: float, b: float) -> float:
    """SSIM of two constant images with values a, b in [0, 1] (zero variances)."""
    c1 = (0.01 * 255) ** 2
    ma, mb = a * 255, b * 255
    return (2 * ma * mb + c1) / (ma ** 2 + mb ** 2 + c1)


def central_difference(fn, x: torch.Tensor, index: tuple, h: float = 1e-6) -> float:
    xp = x.detach().clone()
    xm = x.detach().clone()
    xp[index] += h
    xm[index] -= h
    return (float(fn(xp)) - float(fn(xm))) / (2 * h)


def gradcheck_points(fn, x: torch.Tensor, n: int = 10, rtol: float = 1e-3, atol: float = 1e-6,
                     seed: int = 0, skip=None, h: float = 1e-6) -> tuple[int, list]:
    """Compare autograd to central differences at ``n`` random coordinates.

    ``skip(x, index)`` returns True for coordinates near a kink. Returns
    (number checked, list of failures).
    """
    x = x.detach().clone().double().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    rng = np.random.default_rng(seed)
    flat = rng.permutation(x.numel())
    checked, failures = 0, []
    for f in flat:
        if checked >= n:
            break
        index = np.unravel_index(int(f), tuple(x.shape))
        if skip is not None and skip(x.detach(), index):
            continue
        fd = central_difference(fn, x, index, h)
        an = float(grad[index])
        checked += 1
        if abs(an - fd) > max(atol, rtol * max(abs(an), abs(fd))):
            failures.append((index, an, fd))
    return checked, failures
