"""Gate mathematics for learned sparsity.

A maskable weight tensor w is paired with same-shape mask logits s. The
deterministic soft gate multiplies w by sigmoid(beta * s); as the inverse
temperature beta grows, the gate approaches the hard step H(s) = 1[s > 0],
so the gated objective approaches the binary-mask objective with an exact
L0 count. The stochastic gate instead samples a Bernoulli(sigmoid(s)) mask
per forward pass and trains s with a straight-through gradient.

Conventions fixed here:

* H(0) = 0 - a logit exactly at the boundary counts as pruned.
* A soft gate below ``PRUNED_GATE_EPS`` counts as removed in mid-training
  sparsity reports; final masks are always the exact hard step, so the
  threshold never affects emitted tickets.
* The straight-through backward is the identity by default (gradient of the
  sampled mask passed to s unchanged); a sigmoid-derivative-scaled variant
  is available via ``st_variant="sigmoid"``.
* Permanently removed components are tracked with a boolean sentinel array
  rather than a -inf logit, which keeps all arithmetic finite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import Tensor, apply_op, mul, scale, sigmoid, tensor_sum

GATE_NONE = "none"
GATE_SOFT = "soft-deterministic"
GATE_HARD = "hard"
GATE_STOCHASTIC = "stochastic-bernoulli"

GATE_MODES = (GATE_NONE, GATE_SOFT, GATE_HARD, GATE_STOCHASTIC)

# Soft-gate value below which a weight is reported as removed mid-training.
PRUNED_GATE_EPS = 1e-6


@dataclass
class TemperatureSchedule:
    """Exponential inverse-temperature annealing: beta(t) = beta_final^(t/T).

    beta(0) = 1, beta(T) = beta_final, non-decreasing in between. ``step``
    is called once per optimizer iteration.
    """

    beta_final: float
    total_iters: int
    current_iter: int = 0

    def __post_init__(self):
        if self.beta_final < 1.0:
            raise ValueError("final temperature must be >= 1")
        if self.total_iters < 1:
            raise ValueError("schedule length must be >= 1")

    def at(self, t: int) -> float:
        if not 0 <= t <= self.total_iters:
            raise ValueError(f"iteration {t} outside schedule [0, {self.total_iters}]")
        return float(self.beta_final ** (t / self.total_iters))

    @property
    def current_beta(self) -> float:
        return self.at(self.current_iter)

    def step(self) -> float:
        """Advance one iteration and return the new temperature."""
        self.current_iter += 1
        return self.at(self.current_iter)

    def reset(self) -> None:
        self.current_iter = 0


def beta_at(sched: TemperatureSchedule, t: int) -> float:
    return sched.at(t)


@dataclass
class MaskedParameterGroup:
    """A weight tensor, its optional mask logits, and the gating mode.

    ``frozen_mask`` short-circuits gating entirely once set (hard masks,
    fine-tuning after a freeze); ``pruned_forever`` marks components that
    later rounds may never revive.
    """

    name: str
    weights: Tensor
    maskable: bool = True
    mode: str = GATE_NONE
    mask_logits: Tensor | None = None
    mask_init: float = 0.0
    frozen_mask: np.ndarray | None = None
    pruned_forever: np.ndarray | None = None

    def init_gate(self, mode: str, mask_init: float = 0.0) -> None:
        """Switch the gating mode, allocating constant-initialized logits."""
        if mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {mode!r}")
        if not self.maskable and mode != GATE_NONE and mode != GATE_HARD:
            raise ValueError(f"group {self.name!r} is not maskable")
        self.mode = mode
        self.frozen_mask = None
        self.pruned_forever = None
        if mode in (GATE_SOFT, GATE_STOCHASTIC):
            self.mask_init = float(mask_init)
            self.mask_logits = Tensor(
                np.full(self.weights.shape, self.mask_init, dtype=self.weights.dtype),
                requires_grad=True)
        elif mode == GATE_HARD:
            self.mask_logits = None
            self.frozen_mask = np.ones(self.weights.shape, dtype=self.weights.dtype)
        else:
            self.mask_logits = None

    def kept(self) -> np.ndarray | None:
        """Float mask of components not permanently removed, or None."""
        if self.pruned_forever is None:
            return None
        return (~self.pruned_forever).astype(self.weights.dtype)

    def effective_weights(self, beta: float = 1.0, rng=None,
                          st_variant: str = "identity") -> Tensor:
        """The gated weight tensor placed on the tape for this forward pass."""
        if self.frozen_mask is not None:
            return mul(self.weights, Tensor(self.frozen_mask, dtype=self.weights.dtype))
        if self.mode == GATE_NONE:
            return self.weights
        if self.mode == GATE_SOFT:
            return soft_gate(self, beta)
        if self.mode == GATE_STOCHASTIC:
            return stochastic_gate(self, rng, st_variant)
        raise ValueError(f"group {self.name!r} in mode {self.mode!r} "
                         "needs a frozen mask before use")

    def gate_values(self, beta: float = 1.0) -> np.ndarray:
        """Current gate value per component, for sparsity reporting."""
        if self.frozen_mask is not None:
            return self.frozen_mask
        if self.mode == GATE_NONE:
            return np.ones(self.weights.shape, dtype=self.weights.dtype)
        if self.mode == GATE_SOFT:
            g = expit(beta * self.mask_logits.data)
        elif self.mode == GATE_STOCHASTIC:
            g = expit(self.mask_logits.data)
        else:
            raise ValueError(f"no gate values for mode {self.mode!r}")
        k = self.kept()
        return g * k if k is not None else g

    def current_hard_mask(self) -> np.ndarray:
        """Exact binary mask this group would emit right now."""
        if self.frozen_mask is not None:
            return self.frozen_mask.copy()
        if self.mode == GATE_NONE:
            return np.ones(self.weights.shape, dtype=self.weights.dtype)
        m = hard_mask(self.mask_logits.data)
        k = self.kept()
        return m * k if k is not None else m


def soft_gate(group: MaskedParameterGroup, beta: float) -> Tensor:
    """sigmoid(beta * s) ⊙ w with gradients to both w and s."""
    if group.mode != GATE_SOFT:
        raise ValueError(f"soft_gate requires mode {GATE_SOFT!r}, "
                         f"group {group.name!r} is {group.mode!r}")
    gate = sigmoid(scale(group.mask_logits, beta))
    k = group.kept()
    if k is not None:
        gate = mul(gate, Tensor(k, dtype=group.weights.dtype))
    return mul(gate, group.weights)


def hard_mask(s) -> np.ndarray:
    """Element-wise step: 1 where s > 0, else 0 (boundary prunes)."""
    d = s.data if isinstance(s, Tensor) else np.asarray(s)
    return (d > 0).astype(d.dtype if d.dtype.kind == "f" else np.float64)


def gate_penalty(group: MaskedParameterGroup, beta: float, lam: float) -> Tensor:
    """lam * sum(sigmoid(beta * s)) on the tape; gates are positive, so the
    L1 norm is a plain sum. lam = 0 contributes an exact off-tape zero."""
    if lam < 0:
        raise ValueError("penalty strength must be non-negative")
    if lam == 0.0:
        return Tensor(np.zeros((), dtype=group.weights.dtype))
    gate = sigmoid(scale(group.mask_logits, beta))
    k = group.kept()
    if k is not None:
        gate = mul(gate, Tensor(k, dtype=group.weights.dtype))
    return scale(tensor_sum(gate), lam)


def stochastic_gate(group: MaskedParameterGroup, rng,
                    st_variant: str = "identity") -> Tensor:
    """Sample m ~ Bernoulli(sigmoid(s)) and return m ⊙ w.

    Backward: grad(w) = m ⊙ g; grad(s) uses the straight-through estimator -
    identity by default (grad(s) = g ⊙ w), or scaled by sigmoid'(s) when
    ``st_variant="sigmoid"``. Sentinel-frozen components sample 0 and pass
    no gradient to s.
    """
    if group.mode != GATE_STOCHASTIC:
        raise ValueError(f"stochastic_gate requires mode {GATE_STOCHASTIC!r}, "
                         f"group {group.name!r} is {group.mode!r}")
    if rng is None:
        raise ValueError("stochastic gate requires an RNG")
    if st_variant not in ("identity", "sigmoid"):
        raise ValueError(f"unknown straight-through variant {st_variant!r}")
    w, s = group.weights, group.mask_logits
    p = expit(s.data)
    m = (rng.random(p.shape) < p).astype(w.dtype)
    if group.pruned_forever is not None:
        m[group.pruned_forever] = 0.0
    out = m * w.data

    def backward_fn(g):
        if w.requires_grad:
            w.accumulate_grad(g * m)
        if s.requires_grad:
            gs = g * w.data
            if st_variant == "sigmoid":
                gs = gs * p * (1.0 - p)
            if group.pruned_forever is not None:
                gs = gs * (~group.pruned_forever)
            s.accumulate_grad(gs)

    return apply_op("stochastic_gate", (w, s), out, backward_fn)


def reset_mask(group: MaskedParameterGroup, end_logits: np.ndarray,
               beta_end: float) -> None:
    """Between-round reset: s <- min(beta_end * end_logits, s_init).

    Re-opens the gate for components the round kept (positive logits return
    to their initial value) while leaving suppressed components strongly
    negative. The caller resets the temperature schedule to 1 alongside.
    """
    if group.mask_logits is None:
        raise ValueError(f"group {group.name!r} has no mask logits to reset")
    group.mask_logits.data = np.minimum(
        beta_end * np.asarray(end_logits, dtype=group.weights.dtype),
        group.mask_init)


def sparsity_report(values) -> float:
    """Remaining fraction of a binary mask or of soft gate values.

    Gate values below ``PRUNED_GATE_EPS`` count as removed; on exact binary
    masks this reduces to the plain L0 count over the size.
    """
    d = values.data if isinstance(values, Tensor) else np.asarray(values)
    if d.size == 0:
        raise ValueError("sparsity report of an empty tensor")
    return float((d >= PRUNED_GATE_EPS).mean())


def remaining_fraction(groups, beta: float = 1.0) -> float:
    """Size-weighted remaining fraction across gated groups."""
    total = 0
    kept = 0.0
    for g in groups:
        vals = g.gate_values(beta)
        total += vals.size
        kept += float((vals >= PRUNED_GATE_EPS).sum())
    if total == 0:
        raise ValueError("no gated components to report on")
    return kept / total
