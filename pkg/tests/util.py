"""Shared helpers for the test suite.

The gradient-check wrappers flatten a list of ParamBlocks into the vector
form `grad_check` expects. Because the checker's contract requires a loss
that is twice differentiable near the probe point, instance generators screen
out draws that sit within `KINK_MARGIN` of a relu/sign/norm kink and redraw
with the next seed; the screen inspects preconditions only, never results.
"""

from __future__ import annotations

import numpy as np

from rdosr.diffcore import ActivationLayer, ParamBlock, Stack

# must comfortably exceed the 1e-5 probe step times any activation magnitude
KINK_MARGIN = 1e-3


def pack(params) -> np.ndarray:
    return np.concatenate([p.value.ravel() for p in params])


def unpack(params, vec: np.ndarray) -> None:
    offset = 0
    for p in params:
        n = p.value.size
        p.value[...] = vec[offset : offset + n].reshape(p.value.shape)
        offset += n


def grads(params) -> np.ndarray:
    return np.concatenate([p.grad.ravel() for p in params])


def randomize(params, rng: np.random.Generator, scale: float = 0.6) -> None:
    for p in params:
        p.value[...] = rng.normal(0.0, scale, size=p.value.shape)


def param_loss_fn(params, compute):
    """Adapt `compute() -> loss with grads accumulated` to grad_check's form."""

    def f(vec):
        unpack(params, vec)
        for p in params:
            p.zero_grad()
        loss = compute()
        return loss, grads(params)

    return f


def stack_relu_margin(stack: Stack, x: np.ndarray):
    """Forward through a stack, returning (min |relu preactivation|, output)."""
    margin = np.inf
    t = x
    for layer in stack.layers:
        nxt = layer.forward(t)
        if isinstance(layer, ActivationLayer) and layer.kind == "relu":
            margin = min(margin, float(np.abs(t).min()))
        t = nxt
    return margin, t


def encoder_margin(encoder, z: np.ndarray):
    """Kink margin and output of an EncoderE (either head kind)."""
    margin, hidden = stack_relu_margin(encoder.trunk, z)
    if encoder.dirichlet:
        s = encoder.head.forward(hidden)
    else:
        head_margin, s = stack_relu_margin(encoder.head, hidden)
        margin = min(margin, head_margin)
    return margin, s


def auc_bruteforce(scores_known, scores_unknown) -> float:
    """Mann-Whitney statistic by direct pair counting; ties count one half."""
    k = np.asarray(scores_known, dtype=np.float64).ravel()
    u = np.asarray(scores_unknown, dtype=np.float64).ravel()
    gt = (u[:, None] > k[None, :]).sum()
    eq = (u[:, None] == k[None, :]).sum()
    return (gt + 0.5 * eq) / (u.size * k.size)
