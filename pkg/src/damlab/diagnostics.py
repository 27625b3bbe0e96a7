"""Split R-hat and effective sample size for MCMC output."""

import numpy as np


def _split(chains):
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    n = chains.shape[1] // 2
    return np.concatenate([chains[:, :n], chains[:, chains.shape[1] - n :]], axis=0)


def split_rhat(chains) -> float:
    """Potential scale reduction on half-chains.

    Constant input (no within- or between-chain spread) returns exactly 1.
    """
    c = _split(chains)
    m, n = c.shape
    if m < 2 or n < 2:
        raise ValueError("need at least two chains with two draws per half")
    W = np.mean(np.var(c, axis=1, ddof=1))
    B = n * np.var(np.mean(c, axis=1), ddof=1)
    if W == 0:
        return 1.0 if B == 0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x):
    n = len(x)
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov


def ess(chains) -> float:
    """Bulk effective sample size with Geyer's initial monotone sequence."""
    c = np.asarray(chains, dtype=float)
    m, n = c.shape
    acov = np.array([_autocov(ch) for ch in c])
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus += np.var(c.mean(axis=1), ddof=1)
    if var_plus == 0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pairwise sums, truncated at the first negative pair and forced monotone
    tau = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        tau += pair
        prev = pair
        t += 2
    tau = 2 * tau - 1.0
    return float(m * n / max(tau, 1.0 / np.log10(m * n)))
