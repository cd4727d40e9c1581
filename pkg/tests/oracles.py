"""Independent reference computations used by the test-suite.

Nothing here imports the code paths it checks.
"""

import math

import numpy as np


def random_taxonomy_edges(rng, n_nodes, p_root=0.1, max_parents=2):
    """Random DAG over ``c0..c{n-1}``; parents always have a lower index."""
    edges = []
    for i in range(1, n_nodes):
        if rng.random() < p_root:
            continue
        k = int(rng.integers(1, max_parents + 1))
        for p in sorted(set(int(x) for x in rng.integers(0, i, size=k))):
            edges.append((f"c{i}", f"c{p}"))
    return edges, [f"c{i}" for i in range(n_nodes)]


def all_upward_paths(parents, node):
    """Every path node -> ... -> root, listed explicitly."""
    ps = parents.get(node, ())
    if not ps:
        return [[node]]
    return [[node] + rest for p in ps for rest in all_upward_paths(parents, p)]


def brute_depth(parents, node):
    return min(len(path) for path in all_upward_paths(parents, node))


def brute_ancestors(parents, node):
    return {c for path in all_upward_paths(parents, node) for c in path}


def brute_wup(parents, u, v):
    common = brute_ancestors(parents, u) & brute_ancestors(parents, v)
    if not common:
        return None
    best = max(brute_depth(parents, c) for c in common)
    return min(1.0, 2.0 * best / (brute_depth(parents, u) + brute_depth(parents, v)))


def parents_map(edges, nodes):
    out = {n: [] for n in nodes}
    for c, p in edges:
        out.setdefault(c, []).append(p)
        out.setdefault(p, [])
    return out


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def straight_line_forward(values, cfg, x, E, blocks):
    """Scalar-loop forward pass for one instance.

    ``blocks`` maps (receiver, sender) -> d_hid x d_hid matrix. Returns the
    list of belief matrices and the (T+1, n) confidence array.
    """
    n, d = E.shape[0], cfg.d_hid
    W1, b1, W2, b2 = values["fi.W1"], values["fi.b1"], values["fi.W2"], values["fi.b2"]
    h = np.zeros((n, d))
    for v in range(n):
        inp = list(x) + list(E[v])
        hid = [math.tanh(sum(W1[k, j] * inp[j] for j in range(len(inp))) + b1[k]) for k in range(W1.shape[0])]
        for i in range(d):
            h[v, i] = math.tanh(sum(W2[i, k] * hid[k] for k in range(len(hid))) + b2[i])
    hs = [h]

    def mv(M, vec):
        return [sum(M[i, j] * vec[j] for j in range(len(vec))) for i in range(M.shape[0])]

    for _ in range(cfg.T):
        prev = hs[-1]
        new = np.zeros_like(prev)
        for v in range(n):
            s = [0.0] * d
            for (rv, su), blk in blocks.items():
                if rv == v:
                    for j in range(d):
                        s[j] += sum(blk[i, j] * prev[su, i] for i in range(d))
            u = [math.tanh(a) for a in s]
            hv = list(prev[v])
            wz, uz = mv(values["gru.Wz"], u), mv(values["gru.Uz"], hv)
            wr, ur = mv(values["gru.Wr"], u), mv(values["gru.Ur"], hv)
            z = [_sig(wz[i] + uz[i] + values["gru.bz"][i]) for i in range(d)]
            r = [_sig(wr[i] + ur[i] + values["gru.br"][i]) for i in range(d)]
            wh = mv(values["gru.Wh"], u)
            uh = mv(values["gru.Uh"], [r[i] * hv[i] for i in range(d)])
            ht = [math.tanh(wh[i] + uh[i] + values["gru.bh"][i]) for i in range(d)]
            for i in range(d):
                new[v, i] = (1 - z[i]) * hv[i] + z[i] * ht[i]
        hs.append(new)

    p = np.zeros((len(hs), n))
    for t, hm in enumerate(hs):
        for v in range(n):
            if cfg.fo_hidden:
                a = [math.tanh(sum(values["fo.W1"][k, i] * hm[v, i] for i in range(d)) + values["fo.b1"][k])
                     for k in range(cfg.fo_hidden)]
                logit = sum(values["fo.W2"][0, k] * a[k] for k in range(cfg.fo_hidden)) + values["fo.b2"][0]
            else:
                logit = sum(values["fo.W"][0, i] * hm[v, i] for i in range(d)) + values["fo.b"][0]
            p[t, v] = _sig(logit)
    return hs, p


def count_micro(pred, truth):
    tp = fp = fn = 0
    for prow, trow in zip(pred, truth):
        for a, b in zip(prow, trow):
            if a and b:
                tp += 1
            elif a and not b:
                fp += 1
            elif b and not a:
                fn += 1
    return tp, fp, fn
