"""Scalar-loop reference implementations used as independent test oracles.

Everything here uses plain Python floats and loops on purpose; none of it
calls into the package.
"""

import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def vnorm(a):
    return math.sqrt(sum(x * x for x in a))


def softmax_row(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def class_probabilities(Z, W, tau):
    out = []
    for z in Z:
        out.append(softmax_row([dot(z, w) / (vnorm(z) * vnorm(w)) / tau for w in W]))
    return out


def ce(probs, labels):
    return sum(-math.log(p[y]) for p, y in zip(probs, labels)) / len(labels)


def tpcl(Z, W, labels, tau):
    C, N = len(W), len(Z)
    total = 0.0
    for c in range(C):
        denom = sum(math.exp(dot(W[c], Z[j]) / (vnorm(W[c]) * vnorm(Z[j])) / tau) for j in range(N))
        for i in range(N):
            if labels[i] != c:
                continue
            num = math.exp(dot(W[c], Z[i]) / (vnorm(W[c]) * vnorm(Z[i])) / tau)
            total += -math.log(num / denom)
    return total / C


def tpcl_from_cosines(cos, labels, tau):
    """Same formula when the cosine matrix [N][C] is given directly."""
    N, C = len(cos), len(cos[0])
    total = 0.0
    for c in range(C):
        denom = sum(math.exp(cos[j][c] / tau) for j in range(N))
        for i in range(N):
            if labels[i] == c:
                total += -math.log(math.exp(cos[i][c] / tau) / denom)
    return total / C


def div(W):
    s = 0.0
    for m in range(len(W)):
        for n in range(len(W)):
            if m != n:
                s += math.exp(-sum((a - b) ** 2 for a, b in zip(W[m], W[n])))
    return math.log(s)


def aggregate_prompts(query, head_w, head_b, components):
    """alpha_m = sum_d q_d W[d][m] + b[m]; out[l][k] = sum_m alpha_m P[m][l][k]."""
    M = len(components)
    alpha = [sum(query[d] * head_w[d][m] for d in range(len(query))) + head_b[m] for m in range(M)]
    L, D = len(components[0]), len(components[0][0])
    out = [[0.0] * D for _ in range(L)]
    for m in range(M):
        for l in range(L):
            for k in range(D):
                out[l][k] += alpha[m] * components[m][l][k]
    return out, alpha


def herding(features, k):
    n = len(features)
    dim = len(features[0])
    mu = [sum(f[d] for f in features) / n for d in range(dim)]
    chosen = []
    for _ in range(min(k, n)):
        best, best_d = None, math.inf
        for j in range(n):
            if j in chosen:
                continue
            pts = [features[i] for i in chosen] + [features[j]]
            mean = [sum(p[d] for p in pts) / len(pts) for d in range(dim)]
            dist = math.sqrt(sum((mu[d] - mean[d]) ** 2 for d in range(dim)))
            if dist < best_d:
                best, best_d = j, dist
        chosen.append(best)
    return chosen


def forgetting(rows):
    T = len(rows)
    F = [0.0]
    for t in range(2, T + 1):
        acc = 0.0
        for tau in range(1, t):
            best = -math.inf
            for tp in range(1, t):
                if tp >= tau:
                    best = max(best, rows[tp - 1][tau - 1] - rows[t - 1][tau - 1])
            acc += best
        F.append(acc / (t - 1))
    return F, sum(F) / T


def drift(snap_t, snap_prev):
    ds = []
    for c in snap_prev:
        ds.append(math.sqrt(sum((a - b) ** 2 for a, b in zip(snap_t[c], snap_prev[c]))))
    return sum(ds) / len(ds)


def diversity(snap):
    keys = list(snap)
    ds = []
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            ds.append(math.sqrt(sum((a - b) ** 2 for a, b in zip(snap[keys[i]], snap[keys[j]]))))
    return sum(ds) / len(ds)


def unit(v):
    n = vnorm(v)
    return [x / n for x in v]
