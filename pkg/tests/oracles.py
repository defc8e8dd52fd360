"""Independent numpy re-derivations used as test oracles.

Nothing here calls into the package's op implementations.
"""

import numpy as np


def naive_conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0), groups=1):
    n, cin, t, h, wd = x.shape
    cout, cpg, kt, kh, kw = w.shape
    pt, ph, pw = padding
    st_, sh, sw = stride
    xp = np.zeros((n, cin, t + 2 * pt, h + 2 * ph, wd + 2 * pw))
    xp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd] = x
    to = (t + 2 * pt - kt) // st_ + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    opg = cout // groups
    out = np.zeros((n, cout, to, ho, wo))
    for i in range(n):
        for o in range(cout):
            g = o // opg
            for a in range(to):
                for y in range(ho):
                    for z in range(wo):
                        s = 0.0 if b is None else b[o]
                        for c in range(cpg):
                            for u in range(kt):
                                for v in range(kh):
                                    for q in range(kw):
                                        s += w[o, c, u, v, q] * xp[i, g * cpg + c, a * st_ + u, y * sh + v, z * sw + q]
                        out[i, o, a, y, z] = s
    return out


def pool_pairs(x):
    t = x.shape[2]
    return np.stack([np.maximum(x[:, :, 2 * s], x[:, :, 2 * s + 1]) for s in range(t // 2)], axis=2)


def split_heads(x, heads):
    """[N, C, T, H, W] -> [N, n, T, (C/n)*H*W] by explicit indexing."""
    n, c, t, h, w = x.shape
    cph = c // heads
    out = np.empty((n, heads, t, cph * h * w))
    for b in range(n):
        for k in range(heads):
            for s in range(t):
                out[b, k, s] = x[b, k * cph:(k + 1) * cph, s].reshape(-1)
    return out


def merge_heads(y, channels, h, w):
    n, heads, t, _ = y.shape
    cph = channels // heads
    out = np.empty((n, channels, t, h, w))
    for b in range(n):
        for k in range(heads):
            for s in range(t):
                out[b, k * cph:(k + 1) * cph, s] = y[b, k, s].reshape(cph, h, w)
    return out


def softmax_rows(z):
    out = np.empty_like(z)
    flat = z.reshape(-1, z.shape[-1])
    res = out.reshape(-1, z.shape[-1])
    for i, row in enumerate(flat):
        e = np.exp(row - row.max())
        res[i] = e / e.sum()
    return out


def conv_of(x, p):
    w = p.weight.data
    b = None if p.bias is None else p.bias.data
    pad = p.padding
    if p.temporal_pad == "replicate" and pad[0]:
        x = np.concatenate([x[:, :, :1]] * pad[0] + [x] + [x[:, :, -1:]] * pad[0], axis=2)
        pad = (0,) + tuple(pad[1:])
    return naive_conv3d(x, w, b, p.stride, pad, p.groups)


def projection_map(f, m):
    q = split_heads(conv_of(pool_pairs(f), m.phi), m.heads)
    k = split_heads(conv_of(f, m.theta), m.heads)
    logits = np.einsum("bnid,bnjd->bnij", q, k) / np.sqrt(k.shape[-1])
    return softmax_rows(logits)


def nuta_forward(f, m):
    mp = projection_map(f, m)
    v = split_heads(conv_of(f, m.delta), m.heads)
    agg = np.einsum("bnij,bnjd->bnid", mp, v)
    c, h, w = f.shape[1], f.shape[3], f.shape[4]
    return conv_of(merge_heads(agg, c, h, w), m.compress), mp


def temporal_sync(f_res, mp, m):
    z = split_heads(conv_of(f_res, m.zeta), m.heads)
    agg = np.einsum("bnij,bnjd->bnid", mp, z)
    c, h, w = f_res.shape[1], f_res.shape[3], f_res.shape[4]
    return conv_of(merge_heads(agg, c, h, w), m.sync_compress) + pool_pairs(f_res)
