"""Pure numpy chain kernels; the fallback for the compiled ``_ckernels``."""
import numpy as np


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def forward_backward(node, edge):
    """Log-space sum-product on a chain.

    Returns ``(node_marginals, edge_marginals, log_partition)``.
    """
    n, k = node.shape
    alpha = np.empty((n, k))
    beta = np.zeros((n, k))
    alpha[0] = node[0]
    for i in range(n - 1):
        alpha[i + 1] = node[i + 1] + _lse(alpha[i][:, None] + edge[i], axis=0)
    for i in range(n - 2, -1, -1):
        beta[i] = _lse(edge[i] + (node[i + 1] + beta[i + 1])[None, :], axis=1)
    m = alpha[-1].max()
    log_z = float(m + np.log(np.exp(alpha[-1] - m).sum()))
    node_marg = np.exp(alpha + beta - log_z)
    edge_marg = np.exp(
        alpha[:-1, :, None] + edge + (node[1:] + beta[1:])[:, None, :] - log_z
    )
    return node_marg, edge_marg, log_z


def viterbi(node, edge):
    """Max-product decode; ties go to the lowest state index."""
    n, k = node.shape
    back = np.zeros((n, k), dtype=np.intp)
    delta = node[0].copy()
    for i in range(n - 1):
        cand = delta[:, None] + edge[i]
        back[i + 1] = np.argmax(cand, axis=0)
        delta = node[i + 1] + cand[back[i + 1], np.arange(k)]
    y = np.empty(n, dtype=np.intp)
    y[-1] = int(np.argmax(delta))
    for i in range(n - 1, 0, -1):
        y[i - 1] = back[i, y[i]]
    return y, float(delta[y[-1]])
