"""Discrete-time censored survival objective and the concordance index.

A head emits one logit per time bin. Hazards are sigmoid(logits), the
discrete survival curve is the running product of (1 - hazard), and the
scalar risk is the negated sum of that curve, so raising any hazard
strictly raises the risk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, UndefinedMetricError

DEFAULT_EPS = 1e-7


@dataclass
class SurvivalOutput:
    """Per-slide outputs, all tape tensors so the loss stays differentiable.

    hazards[j] is the event probability in bin j given survival so far;
    survival[j] = prod_{k<=j} (1 - hazards[k]) is nonincreasing; risk is
    -sum_j survival[j].
    """

    logits: ad.Tensor
    hazards: ad.Tensor
    survival: ad.Tensor
    risk: ad.Tensor

    @property
    def bins(self) -> int:
        return self.logits.size

    def risk_value(self) -> float:
        return float(self.risk.data)


def survival_output(logits, eps: float = DEFAULT_EPS, tape: ad.Tape | None = None) -> SurvivalOutput:
    """Map B logits to hazards, survival curve, and scalar risk."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 1:
        logits = ad.reshape(logits, (logits.size,), tape)
    hazards = ad.clamp(ad.sigmoid(logits, tape), eps, 1.0 - eps, tape)
    b = hazards.size
    keep = ad.sub(1.0, hazards, tape)  # per-bin survival factors
    terms = []
    running = None
    for j in range(b):
        factor = ad.slice_axis(keep, 0, j, j + 1, tape)
        running = factor if running is None else ad.mul(running, factor, tape)
        terms.append(running)
    curve = ad.clamp(ad.concat(terms, 0, tape), eps, 1.0, tape)
    risk = ad.neg(ad.reduce_sum(curve, tape=tape), tape)
    return SurvivalOutput(logits=logits, hazards=hazards, survival=curve, risk=risk)


def nll_loss(out: SurvivalOutput, bin: int, censored: bool,
             eps: float = DEFAULT_EPS, tape: ad.Tape | None = None) -> ad.Tensor:
    """Censored negative log likelihood for one slide.

    With S(j) the survival curve, S(-1) = 1 and h(j) the hazards:
    censored patients pay -log S(bin); uncensored pay
    -(log S(bin-1) + log h(bin)).
    """
    b = out.bins
    if not (0 <= bin < b):
        raise ContractError(f"bin {bin} out of range for {b} bins")
    if censored:
        s_bin = ad.slice_axis(out.survival, 0, bin, bin + 1, tape)
        return ad.neg(ad.reshape(ad.log(s_bin, tape), (), tape), tape)
    h_bin = ad.slice_axis(out.hazards, 0, bin, bin + 1, tape)
    log_h = ad.log(h_bin, tape)
    if bin == 0:  # S(-1) = 1 contributes nothing
        return ad.neg(ad.reshape(log_h, (), tape), tape)
    s_prev = ad.slice_axis(out.survival, 0, bin - 1, bin, tape)
    total = ad.add(ad.log(s_prev, tape), log_h, tape)
    return ad.neg(ad.reshape(total, (), tape), tape)


def risk_score(logits, eps: float = DEFAULT_EPS) -> float:
    """Scalar risk from B logits (evaluation path, plain numpy)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    pos = z >= 0
    sig = np.empty_like(z)
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    hazards = np.clip(sig, eps, 1.0 - eps)
    curve = np.clip(np.cumprod(1.0 - hazards), eps, 1.0)
    return float(-np.sum(curve))


def concordance_index(risks, times, censored) -> float:
    """Fraction of comparable pairs ordered consistently with survival.

    A pair (i, j) is comparable when times[i] < times[j] and patient i is
    uncensored. Credit 1 when risks[i] > risks[j], 0.5 on a risk tie.
    Direct O(n^2) enumeration.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    c = np.asarray(censored, dtype=bool)
    if not (r.shape == t.shape == c.shape) or r.ndim != 1:
        raise ContractError("risks, times, censored must be equal-length 1-D sequences")
    if r.size < 2:
        raise ContractError("concordance index needs at least two patients")
    comparable = (t[:, None] < t[None, :]) & ~c[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pairs (check censoring and ties)")
    credit = np.where(r[:, None] > r[None, :], 1.0, 0.0)
    credit = np.where(r[:, None] == r[None, :], 0.5, credit)
    return float(credit[comparable].sum() / n_pairs)
