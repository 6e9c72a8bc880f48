"""Slow, straight-line reference implementations used as test oracles."""
import math

import numpy as np


def inverse_map_render(classes, pose, res=0.5, extent=500.0, n=200):
    """Walk every output pixel through explicit metric frames into the map."""
    out = np.zeros((n, n), np.uint8)
    c = n // 2 + 0.5
    ct, st = math.cos(pose.theta), math.sin(pose.theta)
    for i in range(n):
        ye = (c - (i + 0.5)) * res
        for j in range(n):
            xe = (j + 0.5 - c) * res
            xw = pose.x + ct * xe - st * ye
            yw = pose.y + st * xe + ct * ye
            col = math.floor(xw / res)
            row = math.floor((extent - yw) / res)
            if 0 <= row < classes.shape[0] and 0 <= col < classes.shape[1]:
                out[i, j] = classes[row, col]
    return out


def brute_pool(means):
    g0, g1, d = means.shape
    out = np.zeros_like(means)
    for r in range(g0):
        for c in range(g1):
            acc, k = np.zeros(d), 0
            for rr in range(r - 1, r + 2):
                for cc in range(c - 1, c + 2):
                    if 0 <= rr < g0 and 0 <= cc < g1:
                        acc += means[rr, cc]
                        k += 1
            out[r, c] = acc / k
    return out


def naive_logits(query, base, p):
    """Single-sample cross-attention written one token, one head, one cell at a time."""
    t, d = query.shape
    n = base.shape[0]
    mean = [sum(base[i][k] for i in range(n)) / n for k in range(d)]
    xb = []
    for i in range(n):
        row = [base[i][k] - mean[k] for k in range(d)]
        norm = math.sqrt(sum(v * v for v in row))
        row = [v / norm for v in row] if norm > 1e-12 else [0.0] * d
        xb.append([row[k] + p.base_pos[i][k] for k in range(d)])
    xq = [[query[j][k] + p.query_pos[j][k] for k in range(d)] for j in range(t)]
    heads = p.heads
    dh = d // heads
    pooled = np.zeros(d)
    for j in range(t):
        concat = np.zeros(d)
        for h in range(heads):
            cols = range(h * dh, (h + 1) * dh)
            qv = [sum(xq[j][a] * p.w_q[a][c] for a in range(d)) for c in cols]
            scores, values = [], []
            for i in range(n):
                kv = [sum(xb[i][a] * p.w_k[a][c] for a in range(d)) for c in cols]
                values.append([sum(xb[i][a] * p.w_v[a][c] for a in range(d)) for c in cols])
                scores.append(sum(x * y for x, y in zip(qv, kv)) / math.sqrt(dh))
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for c_i, c in enumerate(cols):
                concat[c] = sum(w[i] / z * values[i][c_i] for i in range(n))
        pooled += concat @ p.w_o
    pooled /= t
    return pooled @ p.w_head + p.b_head


def gradient_check(seed, b=2, t=16, n=16, d=16, heads=4, lam=1.0, per_tensor=24, h=1e-5):
    """Relative error between analytic and central-difference parameter gradients.

    Entries are sampled per tensor; the error is ``|g_a - g_n| / max(|g_a|, |g_n|)``
    over the sampled vector.
    """
    from mapreloc.retrieval import PARAM_ORDER, RetrievalParams, backward, batch_loss, forward

    rng = np.random.default_rng(seed)
    p = RetrievalParams.init(t, n, d, heads, seed)
    p.b_head = rng.normal(0, 0.1, n)
    q = rng.normal(size=(b, t, d))
    base = rng.normal(size=(b, n, d))
    y = np.zeros((b, n))
    y[np.arange(b), rng.integers(0, n, b)] = 1.0
    soft = rng.random((b, n))
    soft /= soft.sum(axis=1, keepdims=True)

    def total(pp):
        z, _ = forward(q, base, pp)
        return batch_loss(z, y, soft, lam).total

    z, cache = forward(q, base, p)
    grads = backward(batch_loss(z, y, soft, lam).grad, cache, p)
    ga, gn = [], []
    for name in PARAM_ORDER:
        arr = getattr(p, name)
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = total(p)
            flat[i] = old - h
            dn = total(p)
            flat[i] = old
            gn.append((up - dn) / (2 * h))
            ga.append(getattr(grads, name).reshape(-1)[i])
    ga, gn = np.array(ga), np.array(gn)
    return float(np.linalg.norm(ga - gn) / max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-300))


def random_homography(rng, jitter=0.05, perspective=1e-4):
    """A well-conditioned near-similarity acting on a 600 px frame."""
    a = rng.uniform(-math.pi, math.pi)
    s = rng.uniform(0.9, 1.1)
    h = np.array([[s * math.cos(a), -s * math.sin(a), rng.uniform(200, 400)],
                  [s * math.sin(a), s * math.cos(a), rng.uniform(200, 400)],
                  [0.0, 0.0, 1.0]])
    h[:2, :2] += rng.normal(0, jitter, (2, 2))
    h[2, :2] = rng.normal(0, perspective, 2) if perspective else 0.0
    return h


def project(h, pts):
    p = np.c_[pts, np.ones(len(pts))] @ h.T
    return p[:, :2] / p[:, 2:]


def contaminated_matches(seed, n=100, inlier_fraction=0.6, noise_px=0.25):
    """Correspondences under a known similarity with uniform outliers mixed in."""
    rng = np.random.default_rng(seed)
    h = random_homography(rng, jitter=0.0, perspective=0.0)
    src = rng.uniform(-200, 200, (n, 2))
    dst = project(h, src)
    k = int(round(n * inlier_fraction))
    dst[:k] += rng.normal(0, noise_px, (k, 2))
    dst[k:] = rng.uniform(0, 600, (n - k, 2))
    truth = np.zeros(n, bool)
    truth[:k] = True
    perm = rng.permutation(n)
    return h, src[perm], dst[perm], truth[perm]


def query_to_patch(pose, origin, res=0.5, extent=500.0, n=200):
    """Exact continuous-pixel homography from an observation into a map patch."""
    c = n // 2 + 0.5
    ct, st = math.cos(pose.theta), math.sin(pose.theta)
    # query pixel -> ego metres -> world metres -> map pixel -> patch pixel
    to_ego = np.array([[res, 0, -c * res], [0, -res, c * res], [0, 0, 1]])
    to_world = np.array([[ct, -st, pose.x], [st, ct, pose.y], [0, 0, 1]])
    to_map = np.array([[1 / res, 0, 0], [0, -1 / res, extent / res], [0, 0, 1]])
    to_patch = np.array([[1, 0, -origin[0]], [0, 1, -origin[1]], [0, 0, 1]])
    return to_patch @ to_map @ to_world @ to_ego


def ransac_trial(seed):
    """True when RANSAC on a 60/40 mix lands within 0.5 px on every true inlier
    and keeps at least 55 of them."""
    from mapreloc.finealign import RansacConfig, ransac_homography

    h, src, dst, truth = contaminated_matches(seed)
    res = ransac_homography((src, dst), RansacConfig(), rng_seed=seed)
    inl = src[truth]
    err = np.linalg.norm(project(res.homography.matrix, inl) - project(h, inl), axis=1)
    return bool(err.max() < 0.5 and int((res.inliers & truth).sum()) >= 55)
