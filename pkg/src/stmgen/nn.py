"""Small neural-network building blocks on top of the autodiff tensors.

Modules hold their parameters as named `Tensor` leaves and expose them via
`named_params()` so training loops, checkpoints, and gradient checks can
enumerate every leaf deterministically (insertion order).
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, attention, layer_norm


class Module:
    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, array, dtype):
        t = Tensor(np.asarray(array, dtype=dtype), requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_params(self, prefix=""):
        out = []
        for name, p in self._params.items():
            out.append((prefix + name, p))
        for name, child in self._children.items():
            out.extend(child.named_params(prefix + name + "."))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def load_state(self, state, prefix=""):
        """Replace parameter values in place from a name -> array mapping."""
        for name, p in self.named_params(prefix):
            if name not in state:
                raise KeyError(f"missing parameter '{name}' in state")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for '{name}': "
                                 f"{arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype)

    def state(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_params(prefix)}


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, bias=True):
        super().__init__()
        lim = math.sqrt(6.0 / (n_in + n_out))
        self.w = self.add_param("w", rng.uniform(-lim, lim, (n_in, n_out)), dtype)
        self.b = self.add_param("b", np.zeros(n_out), dtype) if bias else None

    def __call__(self, x):
        y = x.matmul(self.w)
        if self.b is not None:
            y = y + self.b
        return y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.g = self.add_param("g", np.ones(dim), dtype)
        self.b = self.add_param("b", np.zeros(dim), dtype)

    def __call__(self, x):
        return layer_norm(x, self.g, self.b, self.eps)


class Attention(Module):
    """Single-head projected attention: out = CA(xq, xk, xk) with learned
    query/key/value/output maps."""

    def __init__(self, d_q, d_kv, d_model, rng, dtype=np.float32):
        super().__init__()
        self.wq = self.add_child("wq", Linear(d_q, d_model, rng, dtype))
        self.wk = self.add_child("wk", Linear(d_kv, d_model, rng, dtype))
        self.wv = self.add_child("wv", Linear(d_kv, d_model, rng, dtype))
        self.wo = self.add_child("wo", Linear(d_model, d_model, rng, dtype))

    def __call__(self, xq, xkv, mask=None):
        out = attention(self.wq(xq), self.wk(xkv), self.wv(xkv), mask=mask)
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, d_model, d_hidden, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d_model, d_hidden, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear(d_hidden, d_model, rng, dtype))

    def __call__(self, x):
        return self.fc2(self.fc1(x).gelu())


class SelfAttentionBlock(Module):
    """Residual transformer block: x -> LN(FFN(SA(x) + x) + h) style.

    Layout: h = x + SA(LN1(x)); out = h + FFN(LN2(h)).  Pre-norm keeps
    gradients well-scaled at small depth.
    """

    def __init__(self, d_model, rng, d_hidden=None, dtype=np.float32):
        super().__init__()
        d_hidden = d_hidden or 2 * d_model
        self.ln1 = self.add_child("ln1", LayerNorm(d_model, dtype))
        self.attn = self.add_child("attn", Attention(d_model, d_model, d_model, rng, dtype))
        self.ln2 = self.add_child("ln2", LayerNorm(d_model, dtype))
        self.ffn = self.add_child("ffn", FeedForward(d_model, d_hidden, rng, dtype))

    def __call__(self, x, mask=None):
        xn = self.ln1(x)
        h = x + self.attn(xn, xn, mask=mask)
        return h + self.ffn(self.ln2(h))


class CrossFuseBlock(Module):
    """One arm of the parallel cross-attention: LN(FFN(CA(q, kv, kv) + q)),
    where FFN is the standard residual feed-forward sublayer."""

    def __init__(self, d_model, rng, d_hidden=None, dtype=np.float32):
        super().__init__()
        d_hidden = d_hidden or 2 * d_model
        self.attn = self.add_child("attn", Attention(d_model, d_model, d_model, rng, dtype))
        self.ffn = self.add_child("ffn", FeedForward(d_model, d_hidden, rng, dtype))
        self.ln = self.add_child("ln", LayerNorm(d_model, dtype))

    def __call__(self, q, kv, mask=None):
        h = self.attn(q, kv, mask=mask) + q
        return self.ln(h + self.ffn(h))


def sinusoidal_embedding(positions, dim, dtype=np.float32):
    """Fixed sinusoidal embeddings for integer positions (numpy array out)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = positions[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if emb.shape[-1] < dim:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb.astype(dtype)


class Adam:
    """Standard Adam over an ordered parameter list; moments are exposed so
    checkpoints can persist them for bitwise-identical resume."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
