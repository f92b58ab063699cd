"""Bundled finite-difference checks over every primitive op and every head.

All checks run at 64-bit with small dimensions; each returns a
GradCheckResult so the CLI and the acceptance suite can render one line
per check.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .gradcheck import GradCheckResult, grad_check
from .heads import HEAD_KINDS, TransmilConfig, build_head, head_config
from .rng import Rng
from .survival import nll_loss, survival_output

# Reduced verification dims: bag size, input, hidden, attention width.
CHECK_M, CHECK_D, CHECK_H, CHECK_A = 7, 16, 8, 4


def _param(rng: Rng, shape) -> ad.Tensor:
    return ad.Tensor(rng.normal(shape=shape), requires_grad=True)


def check_primitives(tol: float = 1e-6, seed: int = 0) -> list[GradCheckResult]:
    """Gradient-check each differentiable op through a scalar readout."""
    rng = Rng(seed, 101)
    results = []

    def run(name, f, params):
        res = grad_check(f, params, tol=tol)
        worst = max(res, key=lambda r: r.max_rel_error)
        results.append(GradCheckResult(name, worst.max_rel_error, tol, worst.note))

    x = _param(rng, (3, 4))
    w = _param(rng, (4, 2))
    b = _param(rng, (2,))
    run("linear", lambda tape: ad.reduce_sum(ad.linear(x, w, b, tape), tape=tape),
        [("x", x), ("w", w), ("b", b)])

    y = _param(rng, (5, 3))
    weights = _param(rng, (5, 3))
    run("mul+sub+div",
        lambda tape: ad.reduce_sum(
            ad.div(ad.mul(y, weights, tape), ad.sub(3.0, ad.sigmoid(y, tape), tape), tape),
            tape=tape),
        [("y", y), ("weights", weights)])

    z = _param(rng, (4, 6))
    for kind in ("relu", "tanh", "sigmoid"):
        run(f"activation:{kind}",
            lambda tape, k=kind: ad.reduce_sum(
                ad.mul(ad.activation(z, k, tape=tape), _fixed(z.shape), tape), tape=tape),
            [("z", z)])
    run("activation:softmax",
        lambda tape: ad.reduce_sum(
            ad.mul(ad.softmax(z, 1, tape), _fixed(z.shape), tape), tape=tape),
        [("z", z)])

    r = _param(rng, (5, 4))
    run("reduce:mean", lambda tape: ad.reduce_sum(
        ad.mul(ad.reduce(r, "mean", 0, tape), _fixed((4,)), tape), tape=tape), [("r", r)])
    run("reduce:max", lambda tape: ad.reduce_sum(
        ad.mul(ad.reduce(r, "max", 0, tape), _fixed((4,)), tape), tape=tape), [("r", r)])

    xn = _param(rng, (4, 8))
    gain = _param(rng, (8,))
    shift = _param(rng, (8,))
    run("layer_norm", lambda tape: ad.reduce_sum(
        ad.mul(ad.layer_norm(xn, gain, shift, tape=tape), _fixed(xn.shape), tape), tape=tape),
        [("x", xn), ("gain", gain), ("shift", shift)])

    xd = _param(rng, (6, 5))
    def dropout_loss(tape):
        # same mask on every call: the rng is rebuilt per evaluation
        mask_rng = Rng(seed, 202)
        return ad.reduce_sum(ad.dropout(xd, 0.25, mask_rng, True, tape), tape=tape)
    run("dropout", dropout_loss, [("x", xd)])

    xc = _param(rng, (3, 7, 5))
    wc = _param(rng, (3, 3, 3))
    bc = _param(rng, (3,))
    run("depthwise_conv2d", lambda tape: ad.reduce_sum(
        ad.mul(ad.depthwise_conv2d(xc, wc, bc, tape), _fixed(xc.shape), tape), tape=tape),
        [("x", xc), ("w", wc), ("b", bc)])

    xg = _param(rng, (6, 3))
    run("shape:concat+slice+take", lambda tape: ad.reduce_sum(
        ad.mul(
            ad.concat([ad.slice_axis(xg, 0, 0, 4, tape),
                       ad.take_rows(xg, np.array([5, 1, 1]), tape)], axis=0, tape=tape),
            _fixed((7, 3)), tape), tape=tape),
        [("x", xg)])

    logits = _param(rng, (4,))
    def nll_composite(tape):
        out = survival_output(logits, tape=tape)
        return nll_loss(out, 2, False, tape=tape)
    run("softmax+nll-composite", nll_composite, [("logits", logits)])

    xabs = _param(rng, (5,))
    run("abs+log+clamp", lambda tape: ad.reduce_sum(
        ad.log(ad.clamp(ad.absolute(xabs, tape), 1e-4, 10.0, tape), tape), tape=tape),
        [("x", xabs)])

    return results


def _fixed(shape) -> ad.Tensor:
    """A fixed non-constant readout weighting so reductions do not hide
    gradient errors behind symmetric sums."""
    n = int(np.prod(shape))
    return ad.as_tensor((np.arange(1, n + 1, dtype=np.float64) / n).reshape(shape))


def _small_head_config(kind: str):
    return head_config(
        kind, CHECK_D, hidden_dim=CHECK_H, attn_dim=CHECK_A,
        transmil=TransmilConfig(heads=2, head_dim=4),
    )


def check_heads(tol: float = 1e-4, seed: int = 0, kinds=HEAD_KINDS) -> list[GradCheckResult]:
    """End-to-end check of each head through the survival NLL, dropout
    active with a replayed mask."""
    results = []
    for kind in kinds:
        rng = Rng(seed, 303)
        head = build_head(_small_head_config(kind), rng, dtype=np.float64)
        bag = Rng(seed, 404).normal(shape=(CHECK_M, CHECK_D))

        def loss_fn(tape, head=head, bag=bag):
            drop_rng = Rng(seed, 505)  # identical mask on every call
            logits = head.forward(bag, training=True, rng=drop_rng, tape=tape)
            out = survival_output(logits, tape=tape)
            return nll_loss(out, 1, False, tape=tape)

        res = grad_check(loss_fn, head.named_parameters(), tol=tol)
        worst = max(res, key=lambda r: r.max_rel_error)
        results.append(GradCheckResult(f"head:{kind}", worst.max_rel_error, tol, worst.note))
    return results
