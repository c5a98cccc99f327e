"""Brute-force oracles and a finite-difference checker shared by the tests."""

import numpy as np

from awmf.tensor import Parameter, Tape


def fd_check(build_loss, params, n_checks=20, h=1e-6, rng=None):
    """Largest relative error between tape gradients and central differences.

    ``build_loss()`` must return a scalar Tensor computed from ``params``.
    Up to ``n_checks`` coordinates are sampled across all parameters.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}
    coords = [(p, i) for p in params for i in range(p.size)]
    picks = rng.choice(len(coords), size=min(n_checks, len(coords)), replace=False)
    worst = 0.0
    for j in picks:
        p, i = coords[j]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = build_loss().item()
        flat[i] = orig - h
        down = build_loss().item()
        flat[i] = orig
        num = (up - down) / (2 * h)
        ana = analytic[id(p)].reshape(-1)[i]
        # floor: biases feeding batch norm have exactly zero gradient, and
        # dividing round-off by ~0 would report a meaningless relative error
        err = abs(num - ana) / max(abs(num), abs(ana), 1e-3)
        worst = max(worst, err)
    return worst


def param(rng, shape, name="p", scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, name)


def conv_oracle(x, k, b=None, stride=1, pad=(0, 0, 0, 0), mode="constant"):
    """Plain-loop cross-correlation."""
    t, bo, l, r = pad
    xp = np.pad(x, ((0, 0), (0, 0), (t, bo), (l, r)), mode=mode) if any(pad) else x
    n, c, h, w = xp.shape
    f, _, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for a in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[a, ci, i * stride + u, j * stride + v] * k[o, ci, u, v]
                    out[a, o, i, j] = s + (0.0 if b is None else b[o])
    return out


def pool_oracle(x, window, stride):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    for u in range(window):
                        for v in range(window):
                            best = max(best, x[a, ci, i * stride + u, j * stride + v])
                    out[a, ci, i, j] = best
    return out


def confusion_oracle(pred, gt, m):
    cm = np.zeros((m, m), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != 255:
            cm[g, p] += 1
    return cm


def scores_oracle(cm):
    m = cm.shape[0]
    tp = [cm[c, c] for c in range(m)]
    fp = [sum(cm[r, c] for r in range(m)) - cm[c, c] for c in range(m)]
    fn = [sum(cm[c, r] for r in range(m)) - cm[c, c] for c in range(m)]
    total = sum(tp) + sum(fp)
    op = sum(tp) / total
    pcs = [tp[c] / (tp[c] + fp[c]) for c in range(m) if tp[c] + fp[c] > 0]
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) for c in range(m) if tp[c] + fp[c] + fn[c] > 0]
    return op, sum(pcs) / len(pcs), sum(ious) / len(ious)


def dice_oracle(y, t):
    m = y.shape[0]
    vals = []
    for c in range(m):
        tc = float(t[c].sum())
        if tc == 0:
            continue
        inter = 0.0
        ys = 0.0
        for v, tv in zip(y[c].ravel(), t[c].ravel()):
            inter += v * tv
            ys += v
        vals.append(2 * inter / (ys + tc))
    return sum(vals) / len(vals)
