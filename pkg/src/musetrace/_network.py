"""Decoder-only transformer over one flat parameter vector, with manual
backpropagation.

All trainable state lives in a single 1-D array so the optimizer, the
checkpoint file, and per-example gradients share one documented coordinate
order:

    tok_emb (vocab_size + 1, embed)    row vocab_size is the BOS embedding
    pos_emb (context_length, embed)
    per layer l:
        ln1 gamma (E), ln1 beta (E),
        wq (E,E), bq (E), wk (E,E), bk (E), wv (E,E), bv (E),
        wo (E,E), bo (E),
        ln2 gamma (E), ln2 beta (E),
        w1 (E,H), b1 (H), w2 (H,E), b2 (E)
    lnf gamma (E), lnf beta (E)
    wout (E, vocab_size), bout (vocab_size)

Blocks are pre-norm with residual connections; attention is causally masked;
the MLP uses the tanh GELU approximation.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_K = 0.7978845608028654  # sqrt(2 / pi)
_GELU_C = 0.044715


def layout(cfg) -> list[tuple[str, tuple[int, ...]]]:
    """The (name, shape) list defining the flat parameter order."""
    v, p, e, h = cfg.vocab_size, cfg.context_length, cfg.embed_dim, cfg.hidden_dim
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v + 1, e)),
        ("pos_emb", (p, e)),
    ]
    for l in range(cfg.num_layers):
        specs += [
            (f"blk{l}.ln1_g", (e,)), (f"blk{l}.ln1_b", (e,)),
            (f"blk{l}.wq", (e, e)), (f"blk{l}.bq", (e,)),
            (f"blk{l}.wk", (e, e)), (f"blk{l}.bk", (e,)),
            (f"blk{l}.wv", (e, e)), (f"blk{l}.bv", (e,)),
            (f"blk{l}.wo", (e, e)), (f"blk{l}.bo", (e,)),
            (f"blk{l}.ln2_g", (e,)), (f"blk{l}.ln2_b", (e,)),
            (f"blk{l}.w1", (e, h)), (f"blk{l}.b1", (h,)),
            (f"blk{l}.w2", (h, e)), (f"blk{l}.b2", (e,)),
        ]
    specs += [
        ("lnf_g", (e,)), ("lnf_b", (e,)),
        ("wout", (e, v)), ("bout", (v,)),
    ]
    return specs


def param_count(cfg) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout(cfg))


def views(flat: np.ndarray, cfg) -> dict[str, np.ndarray]:
    """Reshaped views into the flat vector; shares memory with `flat`."""
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in layout(cfg):
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, layout needs {offset}")
    return out


def init_params(cfg, dtype) -> np.ndarray:
    """Deterministic initialization from cfg.seed.

    Weight matrices are uniform with a fan-based scale, embeddings uniform
    at 1/sqrt(embed); norms start at identity; biases and the whole output
    projection start at zero (which makes the initial distribution uniform).
    """
    rng = np.random.default_rng(cfg.seed)
    flat = np.zeros(param_count(cfg), dtype=dtype)
    p = views(flat, cfg)
    for name, shape in layout(cfg):
        arr = p[name]
        if name in ("tok_emb", "pos_emb"):
            bound = 1.0 / np.sqrt(cfg.embed_dim)
            arr[...] = rng.uniform(-bound, bound, size=shape)
        elif name in ("wout", "bout"):
            pass  # zeros: uniform initial distribution
        elif name.endswith(("_g",)):
            arr[...] = 1.0
        elif len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr[...] = rng.uniform(-bound, bound, size=shape)
        # remaining 1-D entries are biases and stay zero
    return flat


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    e = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, e).sum(0)
    db = dy.reshape(-1, e).sum(0)
    return dx, dg, db


def _gelu(x):
    u = _GELU_K * (x + _GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_K * (x + _GELU_C * x * x * x)
    t = np.tanh(u)
    du = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x, num_heads):
    b, t, e = x.shape
    return x.reshape(b, t, num_heads, e // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, nh, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward(p: dict[str, np.ndarray], cfg, x: np.ndarray):
    """Run the network on token ids x of shape (batch, T).

    Returns (logits, cache); logits has shape (batch, T, vocab_size) and the
    cache holds everything backward() needs.
    """
    x = np.asarray(x, dtype=np.int64)
    b, t = x.shape
    if t > cfg.context_length:
        raise ValueError(f"input of {t} tokens exceeds context_length {cfg.context_length}")
    dtype = p["tok_emb"].dtype
    nh = cfg.num_heads
    dh = cfg.embed_dim // nh
    scale = 1.0 / np.sqrt(dh)
    mask = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)

    h = p["tok_emb"][x] + p["pos_emb"][:t]
    layers = []
    for l in range(cfg.num_layers):
        a, ln1 = _ln_forward(h, p[f"blk{l}.ln1_g"], p[f"blk{l}.ln1_b"])
        q = a @ p[f"blk{l}.wq"] + p[f"blk{l}.bq"]
        k = a @ p[f"blk{l}.wk"] + p[f"blk{l}.bk"]
        v = a @ p[f"blk{l}.wv"] + p[f"blk{l}.bv"]
        qh, kh, vh = _split_heads(q, nh), _split_heads(k, nh), _split_heads(v, nh)
        att = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale + mask)
        o = _merge_heads(att @ vh)
        h = h + o @ p[f"blk{l}.wo"] + p[f"blk{l}.bo"]

        a2, ln2 = _ln_forward(h, p[f"blk{l}.ln2_g"], p[f"blk{l}.ln2_b"])
        z1 = a2 @ p[f"blk{l}.w1"] + p[f"blk{l}.b1"]
        gv = _gelu(z1)
        h = h + gv @ p[f"blk{l}.w2"] + p[f"blk{l}.b2"]

        layers.append({"a": a, "ln1": ln1, "qh": qh, "kh": kh, "vh": vh,
                       "att": att, "o": o, "a2": a2, "ln2": ln2,
                       "z1": z1, "gv": gv})

    f, lnf = _ln_forward(h, p["lnf_g"], p["lnf_b"])
    logits = f @ p["wout"] + p["bout"]
    cache = {"x": x, "layers": layers, "lnf": lnf, "f": f,
             "scale": scale, "nh": nh}
    return logits, cache


def backward(p: dict[str, np.ndarray], cfg, cache, dlogits: np.ndarray) -> np.ndarray:
    """Accumulate d(loss)/d(params) for the seed dlogits; returns a flat
    gradient vector in the layout order, in the dtype of dlogits."""
    x = cache["x"]
    b, t = x.shape
    e = cfg.embed_dim
    nh, scale = cache["nh"], cache["scale"]

    flat = np.zeros(param_count(cfg), dtype=dlogits.dtype)
    g = views(flat, cfg)

    f = cache["f"]
    g["wout"] += f.reshape(-1, e).T @ dlogits.reshape(-1, dlogits.shape[-1])
    g["bout"] += dlogits.reshape(-1, dlogits.shape[-1]).sum(0)
    d_f = dlogits @ p["wout"].T
    d_h, dg, db = _ln_backward(d_f, cache["lnf"], p["lnf_g"])
    g["lnf_g"] += dg
    g["lnf_b"] += db

    for l in reversed(range(cfg.num_layers)):
        c = cache["layers"][l]

        # MLP branch (gradient flows through both the branch and the skip)
        d_gv = d_h @ p[f"blk{l}.w2"].T
        g[f"blk{l}.w2"] += c["gv"].reshape(-1, c["gv"].shape[-1]).T @ d_h.reshape(-1, e)
        g[f"blk{l}.b2"] += d_h.reshape(-1, e).sum(0)
        d_z1 = d_gv * _gelu_grad(c["z1"])
        d_a2 = d_z1 @ p[f"blk{l}.w1"].T
        g[f"blk{l}.w1"] += c["a2"].reshape(-1, e).T @ d_z1.reshape(-1, d_z1.shape[-1])
        g[f"blk{l}.b1"] += d_z1.reshape(-1, d_z1.shape[-1]).sum(0)
        dx, dg, db = _ln_backward(d_a2, c["ln2"], p[f"blk{l}.ln2_g"])
        g[f"blk{l}.ln2_g"] += dg
        g[f"blk{l}.ln2_b"] += db
        d_h = d_h + dx

        # attention branch
        d_o = d_h @ p[f"blk{l}.wo"].T
        g[f"blk{l}.wo"] += c["o"].reshape(-1, e).T @ d_h.reshape(-1, e)
        g[f"blk{l}.bo"] += d_h.reshape(-1, e).sum(0)
        d_oh = _split_heads(d_o, nh)
        att, vh = c["att"], c["vh"]
        d_att = d_oh @ vh.transpose(0, 1, 3, 2)
        d_vh = att.transpose(0, 1, 3, 2) @ d_oh
        d_scores = att * (d_att - (d_att * att).sum(-1, keepdims=True))
        d_scores *= scale
        d_qh = d_scores @ c["kh"]
        d_kh = d_scores.transpose(0, 1, 3, 2) @ c["qh"]
        d_q, d_k, d_v = _merge_heads(d_qh), _merge_heads(d_kh), _merge_heads(d_vh)

        a = c["a"]
        a2d = a.reshape(-1, e)
        d_a = d_q @ p[f"blk{l}.wq"].T + d_k @ p[f"blk{l}.wk"].T + d_v @ p[f"blk{l}.wv"].T
        g[f"blk{l}.wq"] += a2d.T @ d_q.reshape(-1, e)
        g[f"blk{l}.bq"] += d_q.reshape(-1, e).sum(0)
        g[f"blk{l}.wk"] += a2d.T @ d_k.reshape(-1, e)
        g[f"blk{l}.bk"] += d_k.reshape(-1, e).sum(0)
        g[f"blk{l}.wv"] += a2d.T @ d_v.reshape(-1, e)
        g[f"blk{l}.bv"] += d_v.reshape(-1, e).sum(0)
        dx, dg, db = _ln_backward(d_a, c["ln1"], p[f"blk{l}.ln1_g"])
        g[f"blk{l}.ln1_g"] += dg
        g[f"blk{l}.ln1_b"] += db
        d_h = d_h + dx

    np.add.at(g["tok_emb"], x.reshape(-1), d_h.reshape(-1, e))
    g["pos_emb"][:t] += d_h.sum(0)
    return flat
