"""Parameter containers shared by the encoders."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


class Module:
    """Collects :class:`~mmsurv.autodiff.Tensor` parameters and child modules
    from instance attributes, in assignment order."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, ad.Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def uniform_fan_in(rng, fan_in, shape):
    # bound 1/sqrt(fan_in), biases start at zero
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = ad.parameter(uniform_fan_in(rng, n_in, (n_in, n_out)))
        if bias:
            self.bias = ad.parameter(np.zeros(n_out))
        else:
            self.bias = None

    def __call__(self, x):
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim, eps=ad.LN_EPS):
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def gate_pool(scores, items):
    """softmax over rows of ``scores`` (n x 1) and the weighted sum of ``items``."""
    weights = ad.softmax_last(ad.reshape(scores, (1, -1)))
    pooled = ad.matmul(weights, items)
    return ad.reshape(weights, (-1,)), ad.reshape(pooled, (-1,))
