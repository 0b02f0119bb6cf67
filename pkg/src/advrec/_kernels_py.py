"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def bpr_accumulate(P, Q, users, pos, neg, l2, gP, gQ):
    pu = P[users].astype(np.float64)
    qi = Q[pos].astype(np.float64)
    qj = Q[neg].astype(np.float64)
    x = np.einsum("nk,nk->n", pu, qi - qj)
    loss = float(np.logaddexp(0.0, -x).sum())
    # g = -sigmoid(-x), written to avoid overflow for large |x|
    g = -np.exp(-np.logaddexp(0.0, x))[:, None]
    np.add.at(gP, users, (g * (qi - qj) + 2.0 * l2 * pu).astype(gP.dtype))
    np.add.at(gQ, pos, (g * pu + 2.0 * l2 * qi).astype(gQ.dtype))
    np.add.at(gQ, neg, (-g * pu + 2.0 * l2 * qj).astype(gQ.dtype))
    if l2 != 0.0:
        loss += l2 * float((pu * pu).sum() + (qi * qi).sum() + (qj * qj).sum())
    return loss


def adagrad_rows(param, accum, grad, rows, lr, eps):
    g = grad.astype(np.float64)
    acc = (accum[rows] + g * g).astype(accum.dtype)
    accum[rows] = acc
    step = lr * g / (np.sqrt(acc.astype(np.float64)) + eps)
    param[rows] = (param[rows] - step).astype(param.dtype)
