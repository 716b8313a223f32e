"""Sequential skip-gram negative-sampling kernel (word2vec style), compiled with numba."""

import numpy as np
from numba import njit

MAX_EXP = 6.0


@njit(cache=True)
def _sigmoid(x):
    if x > MAX_EXP:
        x = MAX_EXP
    elif x < -MAX_EXP:
        x = -MAX_EXP
    return 1.0 / (1.0 + np.exp(-x))


@njit(cache=True, fastmath=True)
def sgns_train(tokens, offsets, syn0, syn1, noise_table, window, negatives, epochs, lr0, seed):
    """Train ``syn0``/``syn1`` in place; return mean pair loss per epoch.

    Each center token predicts every token within a window shrunk by a
    random amount in ``[0, window)``, against ``negatives`` draws from
    ``noise_table`` (node ids repeated in proportion to the noise distribution). The learning rate decays linearly to ``1e-4 * lr0``.
    """
    np.random.seed(seed)
    dim = syn0.shape[1]
    n_tok = tokens.shape[0]
    n_sent = offsets.shape[0] - 1
    total = epochs * n_tok
    processed = 0
    losses = np.zeros(epochs)
    neu1e = np.zeros(dim)
    for ep in range(epochs):
        loss_sum = 0.0
        n_pairs = 0
        for s in range(n_sent):
            a = offsets[s]
            b = offsets[s + 1]
            for pos in range(a, b):
                frac = 1.0 - processed / total
                lr = lr0 * (frac if frac > 1e-4 else 1e-4)
                processed += 1
                center = tokens[pos]
                w = window - np.random.randint(0, window)
                lo = pos - w if pos - w > a else a
                hi = pos + w + 1 if pos + w + 1 < b else b
                for cpos in range(lo, hi):
                    if cpos == pos:
                        continue
                    ctx = tokens[cpos]
                    h = syn0[center]
                    neu1e[:] = 0.0
                    for d in range(negatives + 1):
                        if d == 0:
                            target = ctx
                            label = 1.0
                        else:
                            target = noise_table[np.random.randint(0, noise_table.shape[0])]
                            if target == ctx:
                                continue
                            label = 0.0
                        o = syn1[target]
                        f = 0.0
                        for k in range(dim):
                            f += h[k] * o[k]
                        sig = _sigmoid(f)
                        if label > 0:
                            loss_sum -= np.log(sig + 1e-12)
                        else:
                            loss_sum -= np.log(1.0 - sig + 1e-12)
                        g = (label - sig) * lr
                        for k in range(dim):
                            neu1e[k] += g * o[k]
                            o[k] += g * h[k]
                    for k in range(dim):
                        h[k] += neu1e[k]
                    n_pairs += 1
        losses[ep] = loss_sum / n_pairs if n_pairs > 0 else 0.0
    return losses
