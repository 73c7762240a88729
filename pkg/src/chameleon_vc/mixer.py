"""Content features from a hidden-state stack.

Three modes: the last layer only, a fixed average over a layer range, or a
learned per-dimension softmax-weighted average over all layers.
"""

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc

MODES = ("last_layer", "fixed_average", "chameleon")


@dataclass(frozen=True)
class MixerConfig:
    mode: str = "chameleon"
    layer_range: tuple = None  # inclusive (first, last), fixed_average only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mixer mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "fixed_average":
            if self.layer_range is None or len(self.layer_range) != 2:
                raise ValueError("fixed_average needs an inclusive layer_range (first, last)")
            first, last = self.layer_range
            if first > last:
                raise ValueError(f"empty layer range {self.layer_range}")

    def validate(self, n_layers):
        if self.mode == "fixed_average":
            first, last = self.layer_range
            if first < 0 or last > n_layers:
                raise ValueError(f"layer range {self.layer_range} outside [0, {n_layers}]")


class LayerWeights:
    """Learnable logits ``[L+1, D]``; effective weights are a softmax over layers."""

    def __init__(self, store, n_layers, dim, name="mixer.logits"):
        self.logits = store.create(name, np.zeros((n_layers + 1, dim)), "layer_weights")

    @classmethod
    def from_logits(cls, logits):
        obj = cls.__new__(cls)
        obj.logits = tc.Parameter(np.asarray(logits, dtype=float), "mixer.logits", "layer_weights")
        return obj

    def effective(self):
        return tc.softmax(self.logits, axis=0)

    def numpy(self):
        z = self.logits.data - self.logits.data.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)


def mix(states, cfg, weights=None):
    """Combine hidden states ``[L+1, ..., T, D]`` into content features ``[..., T, D]``.

    ``states`` may be a numpy array, a :class:`~chameleon_vc.encoders.HiddenStateStack`
    or a tensor; the result is a tensor, differentiable w.r.t. the logits in
    chameleon mode.
    """
    if hasattr(states, "states"):
        states = states.states
    states = tc.as_tensor(states)
    n_layers = states.shape[0] - 1
    cfg.validate(n_layers)
    if (weights is not None) != (cfg.mode == "chameleon"):
        raise ValueError("layer weights must be given exactly when mode == 'chameleon'")
    if cfg.mode == "last_layer":
        return tc.take(states, n_layers, axis=0)
    if cfg.mode == "fixed_average":
        first, last = cfg.layer_range
        return tc.Tensor(states.data[first:last + 1].mean(axis=0))
    if weights.logits.shape != (n_layers + 1, states.shape[-1]):
        raise ValueError(f"logits shape {weights.logits.shape} does not match stack "
                         f"({n_layers + 1} layers, dim {states.shape[-1]})")
    w = weights.effective()
    w = tc.reshape(w, (n_layers + 1,) + (1,) * (states.ndim - 2) + (states.shape[-1],))
    return tc.sum_over_axis(states * w, axis=0)


def weight_histogram(weights):
    """Per-layer mean and quartiles of the effective weights across dimensions.

    Returns an array with one row per layer: ``mean, q25, median, q75``.
    """
    w = weights.numpy() if isinstance(weights, LayerWeights) else np.asarray(weights)
    q25, med, q75 = np.percentile(w, [25, 50, 75], axis=1)
    return np.column_stack([w.mean(axis=1), q25, med, q75])


def format_histogram(hist):
    lines = ["layer\tmean\tq25\tmedian\tq75"]
    lines += [f"{i}\t" + "\t".join(f"{v:.6f}" for v in row) for i, row in enumerate(hist)]
    return "\n".join(lines) + "\n"
