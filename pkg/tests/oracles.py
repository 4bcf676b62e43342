"""Brute-force reference computations shared by unit and acceptance tests."""

import itertools

import numpy as np

from tdmr_lab.pdnp import _pack, gaussian_metric


def all_sequences(n):
    return np.array(list(itertools.product([-1, 1], repeat=n)), dtype=np.float64)


def map_llrs(seqs, metric, apriori):
    """Exact per-bit APP LLRs from total log-likelihoods of every candidate sequence."""
    m = metric + (0 if apriori is None else seqs @ np.ravel(apriori) / 2)
    out = np.empty(seqs.shape[1])
    for j in range(seqs.shape[1]):
        out[j] = np.logaddexp.reduce(m[seqs[:, j] > 0]) - np.logaddexp.reduce(m[seqs[:, j] < 0])
    return out


def pr1d_map(y, mask, sigma, apriori, pre, post):
    N = len(y)
    seqs = all_sequences(N)
    full = np.hstack([np.tile(pre, (len(seqs), 1)), seqs, np.tile(post, (len(seqs), 1))])
    mu = sum(mask[j] * full[:, 1 + j:1 + j + N] for j in range(3))
    return map_llrs(seqs, -np.sum((y - mu) ** 2, axis=1) / (2 * sigma**2), apriori)


def pr2d_observe(U, mask):
    """Noiseless inner-row outputs for a (5, N + 4) frame whose columns run -2 .. N + 1."""
    N = U.shape[1] - 4
    out = np.zeros((3, N))
    for t in range(3):
        for k in range(N):
            out[t, k] = np.sum(mask * U[t:t + 3, k + 1:k + 4])
    return out


def pr2d_map(z, mask, sigma, U, apriori):
    """``U`` is the (5, N + 4) frame; its inner N columns of rows 1-3 are enumerated."""
    N = z.shape[1]
    seqs = all_sequences(3 * N)
    sig = np.broadcast_to(sigma, (3,))[:, None]
    metric = np.empty(len(seqs))
    V = U.astype(np.float64).copy()
    for i, c in enumerate(seqs):
        V[1:4, 2:N + 2] = c.reshape(3, N)
        metric[i] = -np.sum((z - pr2d_observe(V, mask)) ** 2 / (2 * sig**2))
    return map_llrs(seqs, metric, apriori).reshape(3, N)


def pdnp1d_loglik(full, y, model, S):
    """Total log metric of one full bit sequence (``S`` known bits in front)."""
    c, d, N = model.causal, model.lag, len(y)
    n = {}
    for k in range(d, N + d):
        n[k] = y[k - d] - sum(c[m] * full[S + k - m] for m in range(model.I + 1))
    tot = 0.0
    for k in range(d, N + d):
        p = int(_pack((full[S + k - model.M:S + k + model.delta + 1] > 0).astype(int)))
        e = n[k] - sum(model.coeffs[p, i - 1] * n.get(k - i, 0.0) for i in range(1, model.L + 1))
        tot += gaussian_metric(e, model.sigma[p])
    return tot


def pdnp1d_map(y, model, apriori, pre, post):
    seqs = all_sequences(len(y))
    S = model.memory
    metric = np.array([pdnp1d_loglik(np.concatenate([pre, c, post]), y, model, S) for c in seqs])
    return map_llrs(seqs, metric, apriori)


def pdnp2d_loglik(full, y, model, S):
    N = y.shape[1]
    cols = (full[0] > 0) + 2 * (full[1] > 0)
    n = {}
    for k in range(N):
        p = int(_pack(cols[S + k - model.J:S + k + model.I + 1].astype(int), 4))
        n[k] = (y[:, k] - model.targets[p], p)
    tot = 0.0
    for k in range(N):
        nk, p = n[k]
        e = nk - model.P[p, 0] @ nk
        e = e - sum(model.P[p, i] @ (n[k - i][0] if k - i >= 0 else np.zeros(2))
                    for i in range(1, model.Np + 1))
        tot += np.sum(gaussian_metric(e, model.lam[p]))
    return tot


def pdnp2d_map(y, model, apriori, pre, post):
    N = y.shape[1]
    seqs = all_sequences(2 * N)
    S = model.memory
    metric = np.array([pdnp2d_loglik(np.concatenate([pre, c.reshape(2, N), post], axis=1), y, model, S)
                       for c in seqs])
    return map_llrs(seqs, metric, apriori).reshape(2, N)


def triple_convolution(a, b, c):
    """O(41^3) sum onto the 121-bin grid."""
    i, j, k = np.meshgrid(np.arange(len(a)), np.arange(len(b)), np.arange(len(c)), indexing="ij")
    terms = a[:, None, None] * b[None, :, None] * c[None, None, :]
    return np.bincount((i + j + k).ravel(), weights=terms.ravel(), minlength=len(a) + len(b) + len(c) - 2)


def plant_pdnp1d(rng, N, coeffs, sigma, mask):
    """Bits and centred equalizer output with AR noise driven by the (u_{k-1}, u_k) pattern.

    Returns ``(y, u)`` where ``y[k - d]`` carries the noise sample ``n_k``.
    """
    u = rng.choice([-1.0, 1.0], N)
    b = (u > 0).astype(int)
    pat = np.zeros(N, dtype=int)
    pat[1:] = 2 * b[:-1] + b[1:]
    w = rng.standard_normal(N)
    L = coeffs.shape[1]
    n = np.zeros(N)
    for k in range(L, N):
        p = pat[k]
        n[k] = coeffs[p] @ n[k - L:k][::-1] + sigma[p] * w[k]
    c = np.asarray(mask)[::-1]
    z = sum(c[m] * np.concatenate([np.zeros(m), u[:N - m]]) for m in range(len(c))) + n
    d = len(mask) // 2
    y = np.append(z[d:], np.zeros(d))
    return y, u


def plant_pdnp2d(rng, N, targets, P1, Lo, lam):
    """Two-track readings ``targets[column] + n_k`` with vector AR(1) noise.

    ``n_k = P1[p] n_{k-1} + Lo[p] (lam[p] * w_k)`` for the current column pattern ``p``.
    """
    u = rng.choice([-1.0, 1.0], (2, N))
    cols = (u[0] > 0) + 2 * (u[1] > 0)
    w = rng.standard_normal((N, 2))
    n = np.zeros((N, 2))
    for k in range(1, N):
        p = cols[k]
        n[k] = P1[p] @ n[k - 1] + Lo[p] @ (lam[p] * w[k])
    return (targets[cols] + n).T, u
