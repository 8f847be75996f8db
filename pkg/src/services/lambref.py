# src/services/lambref.py
"""
Float64 reference of the two-stage LAMB update.

Stage 1 turns gradients into an Adam-style direction with weight decay and
reports the weight and direction norms; stage 2 scales the direction by the
layer's trust ratio ||w|| / ||u|| and applies it. Each layer owns an
independent LambState.
"""
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.models.config import ElementPrecision
from src.services.exceptions import LambError

logger = logging.getLogger("bertperf.lambref")

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPSILON = 1e-6
DEFAULT_WEIGHT_DECAY = 0.01


def _as_vector(value) -> np.ndarray:
    return np.array(value, dtype=np.float64).reshape(-1)


class LambState(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    weights: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = Field(default=0, ge=0)
    beta1: float = Field(default=DEFAULT_BETA1, ge=0, lt=1)
    beta2: float = Field(default=DEFAULT_BETA2, ge=0, lt=1)
    epsilon: float = Field(default=DEFAULT_EPSILON, gt=0)
    weight_decay: float = Field(default=DEFAULT_WEIGHT_DECAY, ge=0)
    learning_rate: float = Field(default=1e-3, gt=0)

    @field_validator("weights", "m", "v", mode="before")
    @classmethod
    def coerce_vector(cls, v):
        return _as_vector(v)

    @model_validator(mode="after")
    def check_lengths(self):
        if not (len(self.weights) == len(self.m) == len(self.v)):
            raise ValueError("weights, m and v must have the same length")
        if self.step == 0 and (np.any(self.m) or np.any(self.v)):
            raise ValueError("m and v must be zero before the first step")
        return self

    @classmethod
    def initial(cls, weights, **hyper) -> "LambState":
        w = _as_vector(weights)
        return cls(weights=w, m=np.zeros_like(w), v=np.zeros_like(w), **hyper)


class UpdateDirection(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    u: np.ndarray
    weight_norm: float
    update_norm: float


def _check_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise LambError(f"{name} contains non-finite values")


def lamb_stage1(state: LambState, grads) -> Tuple[LambState, UpdateDirection]:
    """Moments, bias correction, decayed direction; returns the advanced state"""
    g = _as_vector(grads)
    if len(g) != len(state.weights):
        raise LambError(f"Gradient length {len(g)} does not match weight length {len(state.weights)}")
    _check_finite("grads", g)
    _check_finite("weights", state.weights)

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    u = m_hat / (np.sqrt(v_hat) + state.epsilon) + state.weight_decay * state.weights

    direction = UpdateDirection(
        u=u,
        weight_norm=float(np.linalg.norm(state.weights)),
        update_norm=float(np.linalg.norm(u)),
    )
    return state.model_copy(update={"m": m, "v": v, "step": t}), direction


def trust_ratio(weight_norm: float, update_norm: float) -> float:
    # phi is the identity; zero norms fall back to 1
    if weight_norm == 0.0 or update_norm == 0.0:
        return 1.0
    return weight_norm / update_norm


def lamb_stage2(state: LambState, direction: UpdateDirection) -> np.ndarray:
    """New weights w - lr * r * u"""
    _check_finite("update direction", direction.u)
    if not (math.isfinite(direction.weight_norm) and math.isfinite(direction.update_norm)):
        raise LambError("update direction norms are non-finite")
    r = trust_ratio(direction.weight_norm, direction.update_norm)
    return state.weights - state.learning_rate * r * direction.u


def lamb_step(state: LambState, grads) -> LambState:
    """Both stages; the returned state carries the new weights"""
    advanced, direction = lamb_stage1(state, grads)
    return advanced.model_copy(update={"weights": lamb_stage2(state, direction)})


def global_grad_norm(all_grads: Sequence) -> float:
    """L2 norm over every layer's gradients"""
    total = 0.0
    for grads in all_grads:
        g = _as_vector(grads)
        _check_finite("grads", g)
        total += float(np.dot(g, g))
    return math.sqrt(total)


class Traffic(BaseModel):
    model_config = ConfigDict(frozen=True)

    bytes_read: int
    bytes_written: int


def traffic_account(param_count: int, precision: ElementPrecision = ElementPrecision.FP32) -> Traffic:
    """
    DRAM traffic of one LAMB update over param_count parameters. Optimizer
    state is single precision in every training mode, so precision does not
    change the result.
    """
    if param_count < 0:
        raise LambError("param_count must be non-negative")
    bpe = ElementPrecision.FP32.bytes
    # reads w, g, m, v; writes w, m, v
    return Traffic(bytes_read=4 * param_count * bpe, bytes_written=3 * param_count * bpe)


def reference_lamb_update(
    weights: np.ndarray,
    grads: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    beta1: float = DEFAULT_BETA1,
    beta2: float = DEFAULT_BETA2,
    epsilon: float = DEFAULT_EPSILON,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    learning_rate: float = 1e-3,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-pass LAMB step written out in full, used as the oracle"""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_m = beta1 * m + (1.0 - beta1) * grads
    new_v = beta2 * v + (1.0 - beta2) * np.square(grads)
    update = (new_m / c1) / (np.sqrt(new_v / c2) + epsilon) + weight_decay * weights
    w_norm = math.sqrt(float(np.sum(np.square(weights))))
    u_norm = math.sqrt(float(np.sum(np.square(update))))
    ratio = w_norm / u_norm if w_norm > 0 and u_norm > 0 else 1.0
    return weights - learning_rate * ratio * update, new_m, new_v


class VerifyFailure(BaseModel):
    case: str
    detail: str


def verify(elements: Optional[int] = None, trials: int = 1000, seed: int = 0, tolerance: float = 1e-12) -> List[VerifyFailure]:
    """
    Compare the two-stage implementation with the oracle on seeded random
    vectors (length 1..4096, or exactly `elements`), plus the closed-form cases.
    Returns the failures, first failing case first.
    """
    failures: List[VerifyFailure] = []

    # one-element hand computation
    state = LambState.initial([1.0], weight_decay=0.0, learning_rate=0.1)
    advanced, direction = lamb_stage1(state, [1.0])
    if abs(direction.u[0] - 1.0 / (1.0 + 1e-6)) > 1e-12:
        failures.append(VerifyFailure(case="scalar", detail=f"u={direction.u[0]!r}"))
    w_new = lamb_stage2(state, direction)
    if abs(w_new[0] - 0.9) > 1e-4:
        failures.append(VerifyFailure(case="scalar", detail=f"w'={w_new[0]!r}"))

    if global_grad_norm([[3.0], [4.0]]) != 5.0:
        failures.append(VerifyFailure(case="global_norm_345", detail="norm of [[3],[4]] is not 5"))

    zero = LambState.initial(np.ones(4), weight_decay=0.0)
    _, zero_dir = lamb_stage1(zero, np.zeros(4))
    if zero_dir.update_norm != 0.0 or np.any(lamb_stage2(zero, zero_dir) != zero.weights):
        failures.append(VerifyFailure(case="zero_gradient", detail="zero gradient moved the weights"))

    rng = np.random.default_rng(seed)
    for trial in range(trials):
        length = elements or int(rng.integers(1, 4097))
        weights = rng.standard_normal(length)
        state = LambState.initial(weights)
        # two steps so the second one starts from non-zero moments
        for _ in range(2):
            grads = rng.standard_normal(length)
            expected_w, expected_m, expected_v = reference_lamb_update(
                state.weights, grads, state.m, state.v, state.step + 1,
                state.beta1, state.beta2, state.epsilon, state.weight_decay, state.learning_rate,
            )
            state = lamb_step(state, grads)
            err = max(
                float(np.max(np.abs(state.weights - expected_w))),
                float(np.max(np.abs(state.m - expected_m))),
                float(np.max(np.abs(state.v - expected_v))),
            )
            if err > tolerance:
                failures.append(VerifyFailure(
                    case=f"trial {trial} (length {length}, step {state.step})",
                    detail=f"max abs error {err:.3e} > {tolerance:.0e}",
                ))
                break

    logger.info(f"LAMB verification: {trials} random trials, {len(failures)} failures")
    return failures
