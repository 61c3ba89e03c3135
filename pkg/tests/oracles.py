"""Independent reference implementations used by the tests.

Everything here is deliberately naive: plain Python loops, no calls into
drstage, so agreement with the package is meaningful.
"""
import itertools
import math


def matmul(a, b):
    n, m, p = len(a), len(b), len(b[0])
    return [[sum(a[i][k] * b[k][j] for k in range(m)) for j in range(p)] for i in range(n)]


def head_reduce(blocks, how):
    heads = len(blocks)
    s = len(blocks[0])
    out = [[0.0] * s for _ in range(s)]
    for i in range(s):
        for j in range(s):
            vals = [blocks[h][i][j] for h in range(heads)]
            out[i][j] = max(vals) if how == "max" else sum(vals) / heads
    return out


def zero_smallest(mat, fraction):
    s = len(mat)
    k = math.floor(fraction * s * s)
    entries = sorted(((mat[i][j], i * s + j) for i in range(s) for j in range(s)), key=lambda t: t[0])
    out = [row[:] for row in mat]
    for _, flat in entries[:k]:
        out[flat // s][flat % s] = 0.0
    return out


def l1_rows(mat):
    out = []
    for row in mat:
        norm = sum(abs(v) for v in row)
        out.append([v / norm for v in row] if norm > 0 else [0.0] * len(row))
    return out


def rollout(attentions, gradients, drop=0.1, how="max", use_grad=True, weight_first=False):
    """Straight-line accumulation over blocks; inputs are nested lists or
    arrays shaped ``depth x heads x s x s``. Returns the CLS patch weights
    as a flat list (row-major over the patch grid)."""
    s = len(attentions[0][0])

    def weighted(b, apply):
        if not apply:
            return [[list(map(float, row)) for row in head] for head in attentions[b]]
        return [
            [[float(attentions[b][h][i][j]) * float(gradients[b][h][i][j]) for j in range(s)] for i in range(s)]
            for h in range(len(attentions[b]))
        ]

    acc = l1_rows(head_reduce(weighted(0, use_grad and weight_first), how))
    for b in range(1, len(attentions)):
        m = zero_smallest(head_reduce(weighted(b, use_grad), how), drop)
        u = [[0.5 * (m[i][j] + (1.0 if i == j else 0.0)) for j in range(s)] for i in range(s)]
        acc = l1_rows(matmul(u, acc))
    return [0.5 * (acc[0][t] + acc[t][0]) for t in range(1, s)]


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def linear_kappa(cm):
    k = len(cm)
    total = sum(sum(r) for r in cm)
    rows = [sum(cm[i]) / total for i in range(k)]
    cols = [sum(cm[i][j] for i in range(k)) / total for j in range(k)]
    num = 0.0
    den = 0.0
    for i in range(k):
        for j in range(k):
            w = abs(i - j) / (k - 1)
            num += w * cm[i][j] / total
            den += w * rows[i] * cols[j]
    return 1.0 - num / den


def midranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mwu_enumerated(a, b):
    """U for ``a`` and the two-sided permutation p by listing every way to
    choose which pooled positions belong to the first sample."""
    pooled = list(a) + list(b)
    n1, n = len(a), len(pooled)
    r = midranks(pooled)
    centre = n1 * (n + 1) / 2.0
    obs = sum(r[:n1])
    dev = abs(obs - centre)
    hits = total = 0
    for idx in itertools.combinations(range(n), n1):
        total += 1
        if abs(sum(r[i] for i in idx) - centre) >= dev - 1e-9:
            hits += 1
    return obs - n1 * (n1 + 1) / 2.0, hits / total


def vit_param_count(image, patch, dim, depth, mlp_ratio, hidden, layer_scale=True):
    tokens = (image // patch) ** 2 + 1
    mlp = int(dim * mlp_ratio)
    embed = 3 * patch * patch * dim + dim + dim + tokens * dim  # conv, bias, cls, positions
    block = (
        2 * dim  # norm1
        + 3 * dim * dim + 3 * dim  # qkv
        + dim * dim + dim  # proj
        + 2 * dim  # norm2
        + dim * mlp + mlp  # fc1
        + mlp * dim + dim  # fc2
        + (2 * dim if layer_scale else 0)
    )
    final_norm = 2 * dim
    head = dim * hidden + hidden + hidden + 1
    return embed + depth * block + final_norm + head


def bilinear_half_pixel(src, out_h, out_w):
    """Half-pixel-centre bilinear resize of a 2-D list, edge-clamped."""
    h, w = len(src), len(src[0])
    out = [[0.0] * out_w for _ in range(out_h)]
    for i in range(out_h):
        y = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        ty = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            tx = x - x0
            top = src[y0][x0] * (1 - tx) + src[y0][x1] * tx
            bot = src[y1][x0] * (1 - tx) + src[y1][x1] * tx
            out[i][j] = top * (1 - ty) + bot * ty
    return out


def random_trace_arrays(rng, heads, s, depth, signed=True):
    """Softmax-normalized attention blocks and Gaussian (or positive)
    gradient blocks, each ``heads x s x s``."""
    atts, grads = [], []
    for _ in range(depth):
        logits = rng.normal(scale=2.0, size=(heads, s, s))
        e = [[[math.exp(v) for v in row] for row in head] for head in logits]
        atts.append([[[v / sum(row) for v in row] for row in head] for head in e])
        g = rng.normal(size=(heads, s, s))
        grads.append(g if signed else abs(g))
    return atts, grads
