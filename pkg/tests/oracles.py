"""Scalar-loop reference implementations, written with ``math`` and lists only.

Nothing here imports the package: these are the independent oracles the
vectorised code is checked against.
"""

import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def norm(a):
    return math.sqrt(dot(a, a))


def cos(a, b):
    c = dot(a, b) / (norm(a) * norm(b))
    return max(-1.0, min(1.0, c))


def softmax(scores, tau=1.0):
    top = max(scores)
    e = [math.exp((s - top) / tau) for s in scores]
    total = sum(e)
    return [v / total for v in e]


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def jsd(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def simclr(z, z_aug, tau):
    """Mean over anchors of the (2n-1)-way instance discrimination loss."""
    n = len(z)
    pool = list(z) + list(z_aug)
    total = 0.0
    for i in range(n):
        num = math.exp(cos(z[i], z_aug[i]) / tau)
        den = 0.0
        for k, other in enumerate(pool):
            if k != i:
                den += math.exp(cos(z[i], other) / tau)
        total += -math.log(num / den)
    return total / n


def relation(anchor, refs, tau):
    return softmax([cos(anchor, r) for r in refs], tau)


def relational(z, z_aug, refs, tau):
    """Mean over anchors of JSD between the two views' relation vectors."""
    return sum(jsd(relation(a, refs, tau), relation(b, refs, tau))
               for a, b in zip(z, z_aug)) / len(z)


def global_contrastive(zl, zg_aug, zg, tau, include_positive=False):
    n = len(zl)
    total = 0.0
    for i in range(n):
        num = math.exp(cos(zl[i], zg_aug[i]) / tau)
        den = 0.0
        for k in range(n):
            if k != i:
                den += math.exp(cos(zl[i], zl[k]) / tau)
                den += math.exp(cos(zl[i], zg[k]) / tau)
        if include_positive:
            den += num
        total += -math.log(num / den)
    return total / n


def byol(pred, target):
    total = 0.0
    for p, t in zip(pred, target):
        np_, nt = norm(p), norm(t)
        total += sum((a / np_ - b / nt) ** 2 for a, b in zip(p, t))
    return total / len(pred)


# -- a tiny MLP forward, for the end-to-end objective --------------------------


def linear(x, w, b):
    """x: list of rows; w: nested list (fan_in x fan_out); b: list or None."""
    out = []
    for row in x:
        y = []
        for j in range(len(w[0])):
            acc = sum(row[i] * w[i][j] for i in range(len(row)))
            y.append(acc + (b[j] if b is not None else 0.0))
        out.append(y)
    return out


def mlp(x, layers):
    """layers: list of (w, b); ReLU between layers, none after the last."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = [[max(0.0, v) for v in row] for row in x]
    return x


def fedx_objective(backbone, head, teacher, x, x_aug, x_ref, tau):
    """Local contrastive + local relational + global contrastive + global relational."""
    z, z_aug, z_ref = mlp(x, backbone), mlp(x_aug, backbone), mlp(x_ref, backbone)
    zl, zl_aug = mlp(z, head), mlp(z_aug, head)
    zg, zg_aug, zg_ref = mlp(x, teacher), mlp(x_aug, teacher), mlp(x_ref, teacher)
    return (simclr(z, z_aug, tau) + relational(z, z_aug, z_ref, tau)
            + global_contrastive(zl, zg_aug, zg, tau) + relational(zl, zl_aug, zg_ref, tau))
