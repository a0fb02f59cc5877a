"""Predict-then-adapt engine for one unlabeled stream.

Each stage runs, in order: pseudo-label with the previous model, pick the
classes present among the pseudo labels, update the per-class momentum
confidence, build the confidence mask, take an Adam step on the masked
selective cross-entropy plus the KL distillation term against the EMA model,
and finally move the EMA weights toward the new weights.

The engine only ever sees feature matrices. Labels never enter this module.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import CompatibilityModel, clone_model
from .tensor import (
    AdamState,
    adam_step,
    kl_distill_batch,
    scores,
    selective_ce_batch,
    softmax,
)


@dataclass(frozen=True)
class EvolverConfig:
    lam: float = 1.0
    tau: float = 0.5
    m1: float = 0.99
    m2: float = 0.9
    learning_rate: float = 5e-5
    epochs_per_stage: int = 1
    # "post": threshold with the confidence updated on this stage (update precedes masking)
    # "pre": threshold with the value carried in from the previous stage
    threshold_timing: str = "post"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.m1 < 1:
            raise ValueError("m1 must lie in [0, 1)")
        if not 0 <= self.m2 < 1:
            raise ValueError("m2 must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be >= 1")
        if self.threshold_timing not in ("post", "pre"):
            raise ValueError("threshold_timing must be 'post' or 'pre'")


@dataclass(frozen=True)
class AblationFlags:
    disable_momentum_model: bool = False
    disable_class_selection: bool = False
    disable_data_selection: bool = False
    fixed_threshold: bool = False
    fixed_threshold_value: float = 0.8

    def __post_init__(self):
        if self.disable_data_selection and self.fixed_threshold:
            raise ValueError("disable_data_selection and fixed_threshold are exclusive")
        if not 0 < self.fixed_threshold_value <= 1:
            raise ValueError("fixed_threshold_value must lie in (0, 1]")

    @classmethod
    def erm(cls) -> "AblationFlags":
        return cls(True, True, True)


@dataclass(frozen=True)
class ClassConfidence:
    delta_ema: np.ndarray
    initialized: np.ndarray

    @classmethod
    def fresh(cls, num_classes: int) -> "ClassConfidence":
        return cls(np.ones(num_classes), np.zeros(num_classes, dtype=bool))


@dataclass
class EvolverState:
    current: CompatibilityModel
    ema: CompatibilityModel
    confidence: ClassConfidence
    adam: AdamState
    config: EvolverConfig
    flags: AblationFlags = field(default_factory=AblationFlags)
    time_step: int = 0


@dataclass
class StageOutcome:
    predictions: np.ndarray
    selected_classes: np.ndarray
    mask: np.ndarray
    ce_sel: float
    kl: float
    total: float

    @property
    def pseudo_labels(self) -> np.ndarray:
        # pseudo labels are the stage predictions by definition
        return self.predictions

    @property
    def mask_fill(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def init_state(base_model: CompatibilityModel, config: EvolverConfig = EvolverConfig(),
               flags: AblationFlags = AblationFlags()) -> EvolverState:
    current = clone_model(base_model)
    return EvolverState(
        current=current,
        ema=clone_model(base_model),
        confidence=ClassConfidence.fresh(current.class_count),
        adam=AdamState.fresh(current.W.shape, learning_rate=config.learning_rate),
        config=config,
        flags=flags,
    )


def _check_batch(model: CompatibilityModel, batch) -> np.ndarray:
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("batch is empty")
    if X.shape[1] != model.feature_dim:
        raise ShapeError(f"batch has {X.shape[1]} features, model expects {model.feature_dim}")
    return X


def pseudo_label_batch(model: CompatibilityModel, batch):
    """Argmax labels and full-label-set softmax rows for a batch."""
    X = _check_batch(model, batch)
    S = scores(model.W, X)
    return np.argmax(S, axis=1), softmax(S)


def select_classes(pseudo_labels) -> np.ndarray:
    return np.unique(np.asarray(pseudo_labels, dtype=np.int64))


def update_confidence(confidence: ClassConfidence, pseudo_labels, probabilities,
                      m2: float) -> ClassConfidence:
    """Momentum-update per-class mean top confidence; absent classes keep their value."""
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    top = probs[np.arange(labels.size), labels]
    n_classes = confidence.delta_ema.size
    counts = np.bincount(labels, minlength=n_classes)
    sums = np.bincount(labels, weights=top, minlength=n_classes)
    present = counts > 0

    delta = confidence.delta_ema.copy()
    batch_mean = sums[present] / counts[present]
    delta[present] = m2 * delta[present] + (1.0 - m2) * batch_mean
    return ClassConfidence(delta, confidence.initialized | present)


def data_mask(pseudo_labels, probabilities, delta_ema, tau: float,
              fixed_threshold: float | None = None) -> np.ndarray:
    """0/1 weights: keep samples whose top probability clears the threshold.

    Adaptive rule: ``p > delta_ema[label] * tau``. With ``fixed_threshold``
    set the rule is ``p > fixed_threshold`` for every class.
    """
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    top = probs[np.arange(labels.size), labels]
    if fixed_threshold is not None:
        cut = np.full(labels.size, float(fixed_threshold))
    else:
        cut = np.asarray(delta_ema, dtype=np.float64)[labels] * tau
    return (top > cut).astype(np.float64)


def evolve_step(state: EvolverState, batch):
    """Run one stage on ``batch`` (features only). Mutates and returns ``state``.

    Returns ``(StageOutcome, state)``. Predictions in the outcome come from
    the model as it was before this call.
    """
    cfg, flags = state.config, state.flags
    X = _check_batch(state.current, batch)

    labels, probs = pseudo_label_batch(state.current, X)
    selected = select_classes(labels)
    prior = state.confidence
    state.confidence = update_confidence(prior, labels, probs, cfg.m2)

    if flags.disable_data_selection:
        mask = np.ones(labels.size)
    elif flags.fixed_threshold:
        mask = data_mask(labels, probs, None, cfg.tau, flags.fixed_threshold_value)
    else:
        delta = state.confidence if cfg.threshold_timing == "post" else prior
        mask = data_mask(labels, probs, delta.delta_ema, cfg.tau)

    use_kl = not flags.disable_momentum_model and cfg.lam != 0
    subset = None if flags.disable_class_selection else selected
    # rows outside the subset get no gradient at all when KL is off
    rows = None if use_kl or subset is None else subset

    ce_first = kl_first = 0.0
    if mask.any():
        W = state.current.W
        for epoch in range(cfg.epochs_per_stage):
            grad, ce = selective_ce_batch(W, X, labels, subset, mask)
            if flags.disable_momentum_model:
                kl = 0.0
            else:
                kl_grad, kl = kl_distill_batch(W, state.ema.W, X, mask)
                if use_kl:
                    grad = grad + cfg.lam * kl_grad
            if epoch == 0:
                ce_first, kl_first = ce, kl
            W, state.adam = adam_step(W, grad, state.adam, rows=rows)
        state.current = CompatibilityModel(W)

    if flags.disable_momentum_model:
        state.ema = clone_model(state.current)
    else:
        m1 = cfg.m1
        state.ema = CompatibilityModel(m1 * state.ema.W + (1.0 - m1) * state.current.W)
    state.time_step += 1

    lam = cfg.lam if not flags.disable_momentum_model else 0.0
    outcome = StageOutcome(
        predictions=labels,
        selected_classes=selected,
        mask=mask,
        ce_sel=ce_first,
        kl=kl_first,
        total=ce_first + lam * kl_first,
    )
    return outcome, state


def erm_step(state: EvolverState, batch):
    """Plain pseudo-label ERM: full-label cross-entropy on every sample.

    No momentum model, class selection or confidence mask. Uses only
    ``state.current`` and ``state.adam``.
    """
    W = state.current.W
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("batch must be a nonempty 2-D feature matrix")
    labels = np.argmax(X @ W.T, axis=1)
    first = 0.0
    for epoch in range(state.config.epochs_per_stage):
        grad, loss = selective_ce_batch(W, X, labels)
        if epoch == 0:
            first = loss
        W, state.adam = adam_step(W, grad, state.adam)
    state.current = CompatibilityModel(W)
    state.ema = clone_model(state.current)
    state.time_step += 1
    outcome = StageOutcome(labels, np.unique(labels), np.ones(labels.size), first, 0.0, first)
    return outcome, state

