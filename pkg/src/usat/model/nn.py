"""Layer primitives with explicit backward passes.

Each ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache, writes parameter gradients into ``grads``
(accumulating) and returns the input gradient.  Parameters live in a flat
``dict[str, ndarray]`` keyed by dotted names.
"""
import numpy as np

from .. import kernels

LN_EPS = 1e-6


def _acc(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def linear_fwd(params, name, x):
    W, b = params[name + ".weight"], params[name + ".bias"]
    return x @ W + b, x


def linear_bwd(params, name, dy, x, grads):
    W = params[name + ".weight"]
    _acc(grads, name + ".weight", x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]))
    _acc(grads, name + ".bias", dy.reshape(-1, dy.shape[-1]).sum(axis=0))
    return dy @ W.T


def layernorm_fwd(params, name, x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * params[name + ".weight"] + params[name + ".bias"], (xhat, rstd)


def layernorm_bwd(params, name, dy, cache, grads):
    xhat, rstd = cache
    g = params[name + ".weight"]
    flat = lambda a: a.reshape(-1, a.shape[-1])
    _acc(grads, name + ".weight", (flat(dy) * flat(xhat)).sum(axis=0))
    _acc(grads, name + ".bias", flat(dy).sum(axis=0))
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def attention_fwd(params, name, x, n_heads):
    B, N, D = x.shape
    dh = D // n_heads
    qkv, c_in = linear_fwd(params, name + ".qkv", x)
    qkv = qkv.reshape(B, N, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    scale = 1.0 / np.sqrt(dh)
    q = np.ascontiguousarray(qkv[0]) * qkv.dtype.type(scale)
    k, v = np.ascontiguousarray(qkv[1]), np.ascontiguousarray(qkv[2])
    attn = kernels.softmax(q @ k.swapaxes(-1, -2))
    o = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    y, c_out = linear_fwd(params, name + ".proj", o)
    return y, (c_in, q, k, v, attn, c_out, scale)


def attention_bwd(params, name, dy, cache, n_heads, grads):
    c_in, q, k, v, attn, c_out, scale = cache
    B, H, N, dh = q.shape
    do = linear_bwd(params, name + ".proj", dy, c_out, grads)
    do = do.reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    dattn = do @ v.swapaxes(-1, -2)
    dv = attn.swapaxes(-1, -2) @ do
    ds = kernels.softmax_bwd(attn, dattn, 1.0)
    dq = (ds @ k) * q.dtype.type(scale)
    dk = ds.swapaxes(-1, -2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * H * dh)
    return linear_bwd(params, name + ".qkv", dqkv, c_in, grads)


def mlp_fwd(params, name, x):
    h, c1 = linear_fwd(params, name + ".fc1", x)
    a = kernels.gelu(h)
    y, c2 = linear_fwd(params, name + ".fc2", a)
    return y, (c1, h, c2)


def mlp_bwd(params, name, dy, cache, grads):
    c1, h, c2 = cache
    da = linear_bwd(params, name + ".fc2", dy, c2, grads)
    dh = da * kernels.gelu_grad(h)
    return linear_bwd(params, name + ".fc1", dh, c1, grads)


def block_fwd(params, name, x, n_heads):
    """Pre-norm transformer block: ``x + attn(ln1(x))`` then ``+ mlp(ln2(.))``."""
    h1, c_ln1 = layernorm_fwd(params, name + ".norm1", x)
    a, c_attn = attention_fwd(params, name + ".attn", h1, n_heads)
    x1 = x + a
    h2, c_ln2 = layernorm_fwd(params, name + ".norm2", x1)
    m, c_mlp = mlp_fwd(params, name + ".mlp", h2)
    return x1 + m, (c_ln1, c_attn, c_ln2, c_mlp)


def block_bwd(params, name, dy, cache, n_heads, grads):
    c_ln1, c_attn, c_ln2, c_mlp = cache
    dh2 = mlp_bwd(params, name + ".mlp", dy, c_mlp, grads)
    dx1 = dy + layernorm_bwd(params, name + ".norm2", dh2, c_ln2, grads)
    dh1 = attention_bwd(params, name + ".attn", dx1, c_attn, n_heads, grads)
    return dx1 + layernorm_bwd(params, name + ".norm1", dh1, c_ln1, grads)


def stack_fwd(params, prefix, depth, x, n_heads):
    """``depth`` blocks followed by a final layer norm ``<prefix>.norm``.

    An empty stack (``depth == 0``) is the identity and carries no norm.
    """
    caches = []
    for i in range(depth):
        x, c = block_fwd(params, f"{prefix}.blocks.{i}", x, n_heads)
        caches.append(c)
    if depth == 0:
        return x, (caches, None)
    y, c_norm = layernorm_fwd(params, prefix + ".norm", x)
    return y, (caches, c_norm)


def stack_bwd(params, prefix, depth, dy, cache, n_heads, grads):
    caches, c_norm = cache
    if c_norm is None:
        return dy
    dx = layernorm_bwd(params, prefix + ".norm", dy, c_norm, grads)
    for i in reversed(range(depth)):
        dx = block_bwd(params, f"{prefix}.blocks.{i}", dx, caches[i], n_heads, grads)
    return dx


def init_linear(params, rng, name, d_in, d_out, dtype):
    """Xavier-uniform weight, zero bias."""
    bound = np.sqrt(6.0 / (d_in + d_out))
    params[name + ".weight"] = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
    params[name + ".bias"] = np.zeros(d_out, dtype=dtype)


def init_layernorm(params, name, d, dtype):
    params[name + ".weight"] = np.ones(d, dtype=dtype)
    params[name + ".bias"] = np.zeros(d, dtype=dtype)


def init_stack(params, rng, prefix, depth, d, mlp_ratio, dtype):
    hidden = int(round(d * mlp_ratio))
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        init_layernorm(params, b + ".norm1", d, dtype)
        init_linear(params, rng, b + ".attn.qkv", d, 3 * d, dtype)
        init_linear(params, rng, b + ".attn.proj", d, d, dtype)
        init_layernorm(params, b + ".norm2", d, dtype)
        init_linear(params, rng, b + ".mlp.fc1", d, hidden, dtype)
        init_linear(params, rng, b + ".mlp.fc2", hidden, d, dtype)
    if depth:
        init_layernorm(params, prefix + ".norm", d, dtype)
