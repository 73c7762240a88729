"""Small building blocks shared by the encoders, extractor and decoder."""

import numpy as np

from . import tensorcore as tc


class Linear:
    def __init__(self, store, name, n_in, n_out, group, rng, gain=1.0):
        self.weight = store.create(f"{name}.weight",
                                   rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in), group)
        self.bias = store.create(f"{name}.bias", np.zeros(n_out), group)

    def __call__(self, x):
        return tc.matmul(x, self.weight) + self.bias


class LayerNorm:
    def __init__(self, store, name, dim, group):
        self.gain = store.create(f"{name}.gain", np.ones(dim), group)
        self.shift = store.create(f"{name}.shift", np.zeros(dim), group)

    def __call__(self, x):
        return tc.layer_norm(x) * self.gain + self.shift


class SelfAttention:
    """Multi-head self-attention.

    Without ``distance_slopes`` attention carries no positional information.
    With them, head ``h`` adds ``-slopes[h] * |i - j|`` to its scores, a
    fixed recency bias that keeps representations local in time.
    """

    def __init__(self, store, name, dim, heads, group, rng, distance_slopes=None):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        if distance_slopes is not None and len(distance_slopes) != heads:
            raise ValueError("need one distance slope per head")
        self.heads = heads
        self.slopes = None if distance_slopes is None else np.asarray(distance_slopes, float)
        self.q = Linear(store, f"{name}.q", dim, dim, group, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, group, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, group, rng)
        self.out = Linear(store, f"{name}.out", dim, dim, group, rng)

    def _split(self, x):
        b, t, d = x.shape
        return tc.transpose(tc.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x):
        b, t, d = x.shape
        bias = None
        if self.slopes is not None:
            dist = np.abs(np.arange(t)[:, None] - np.arange(t)[None, :])
            bias = -self.slopes[:, None, None] * dist
        att = tc.scaled_dot_product_attention(self._split(self.q(x)), self._split(self.k(x)),
                                              self._split(self.v(x)), bias)
        merged = tc.reshape(tc.transpose(att, (0, 2, 1, 3)), (b, t, d))
        return self.out(merged)


class TransformerBlock:
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ff(ln(x))``."""

    def __init__(self, store, name, dim, heads, ff_dim, group, rng, distance_slopes=None):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim, group)
        self.attn = SelfAttention(store, f"{name}.attn", dim, heads, group, rng, distance_slopes)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim, group)
        self.ff1 = Linear(store, f"{name}.ff1", dim, ff_dim, group, rng)
        self.ff2 = Linear(store, f"{name}.ff2", ff_dim, dim, group, rng)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(tc.gelu(self.ff1(self.ln2(x))))
