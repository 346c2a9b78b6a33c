"""Majority-context classification: a task local features cannot solve.

Each scene holds N RoIs. A majority class is drawn, exactly ceil(0.6*N)
RoIs carry it as their latent class, and the rest carry classes drawn from
the remaining K-1. Every RoI's *label* is the majority class, but its
*features* encode only its own latent class (a noisy one-hot in the first
K channels, replicated across positions). A per-RoI predictor therefore
hits an accuracy ceiling: minority RoIs cannot know which of the other
classes won. A model that mixes information across RoIs has no such cap,
which is exactly what the attention operator provides.

``baseline_ceiling`` Monte-Carlo-estimates the per-RoI optimum for an
oracle that even knows its own majority membership (a generous bound; a
realizable per-RoI classifier does worse). ``train`` fits either variant
with SGD + momentum and weight decay; ``evaluate`` measures per-RoI
accuracy on freshly drawn scenes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, DivergenceError
from .operator import (
    NlRoiConfig,
    NlRoiParams,
    init_params,
    nlroi_backward,
    nlroi_forward,
)
from .rng import Prng

# Evaluation draws scenes from a salted seed so that passing the training
# seed to evaluate() never replays the exact scenes seen during training.
_EVAL_SEED_SALT = 0xD1B54A32D192ED03
_MASK64 = (1 << 64) - 1

NOISE_SIGMA = 0.1


def majority_count(n: int) -> int:
    """ceil(0.6 * n) without float rounding."""
    return (3 * n + 4) // 5


@dataclass
class Scene:
    features: np.ndarray        # (N, D, H, W)
    latent_classes: np.ndarray  # (N,) ints in [0, K)
    majority_class: int
    labels: np.ndarray          # (N,) all equal to majority_class


@dataclass
class SceneSpec:
    n: int
    k: int
    d: int
    h: int
    w: int
    sigma: float = NOISE_SIGMA

    def __post_init__(self):
        if self.k > self.d:
            raise ConfigError(f"k={self.k} classes need k <= d={self.d} channels")
        if self.n < 2:
            raise ConfigError(f"scenes need at least 2 RoIs, got n={self.n}")
        if self.k < 2:
            raise ConfigError(f"classification needs at least 2 classes, got k={self.k}")


def generate_scene(prng: Prng, spec: SceneSpec) -> Scene:
    """Draw one scene. PRNG order: majority class, majority slots, minority
    latents (ascending RoI index), then one noise value per (RoI, channel),
    replicated across the H x W positions."""
    n, k, d = spec.n, spec.k, spec.d
    m = majority_count(n)
    majority = prng.randint(k)
    slots = set(prng.sample_indices(n, m))
    latent = np.empty(n, dtype=np.int64)
    for i in range(n):
        if i in slots:
            latent[i] = majority
        else:
            r = prng.randint(k - 1)
            latent[i] = r if r < majority else r + 1
    base = spec.sigma * prng.normals(n * d).reshape(n, d)
    for i in range(n):
        base[i, latent[i]] += 1.0
    features = np.broadcast_to(base[:, :, None, None], (n, d, spec.h, spec.w)).copy()
    return Scene(
        features=features,
        latent_classes=latent,
        majority_class=majority,
        labels=np.full(n, majority, dtype=np.int64),
    )


def baseline_ceiling(n: int, k: int, trials: int, prng: Prng) -> float:
    """Monte-Carlo ceiling for a per-RoI predictor that knows its own latent
    class and its own majority membership.

    Majority members predict their own class and are always right; minority
    members know only that the answer is one of the other k-1 classes and
    guess uniformly among them. The closed form is m/n + (1 - m/n)/(k - 1)
    with m = ceil(0.6*n); the simulation below reproduces it without using
    that formula.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    m = majority_count(n)
    correct = 0
    for _ in range(trials):
        majority = prng.randint(k)
        slots = set(prng.sample_indices(n, m))
        for i in range(n):
            if i in slots:
                correct += 1
            else:
                r = prng.randint(k - 1)
                own = r if r < majority else r + 1
                # guess uniformly among the k-1 classes that are not our own
                guess = prng.randint(k - 1)
                guess = guess if guess < own else guess + 1
                if guess == majority:
                    correct += 1
    return correct / (trials * n)


@dataclass
class ToyModel:
    spec: SceneSpec
    nlroi_config: Optional[NlRoiConfig]  # None for the baseline variant
    nlroi_params: Optional[NlRoiParams]
    w_head: np.ndarray  # (K, D) or (K, D + D_g)
    b_head: np.ndarray  # (K,)

    @property
    def variant(self) -> str:
        return "baseline" if self.nlroi_config is None else "nlroi"


def init_model(
    spec: SceneSpec,
    nlroi_config: Optional[NlRoiConfig],
    prng: Prng,
) -> ToyModel:
    """Zero-initialized head (so an untrained model predicts uniformly);
    attention parameters, when present, from init_params."""
    if nlroi_config is None:
        head_in = spec.d
        params = None
    else:
        if nlroi_config.d != spec.d or nlroi_config.h != spec.h or nlroi_config.w != spec.w:
            raise ConfigError(
                f"operator config {nlroi_config} disagrees with scene spec {spec}"
            )
        head_in = spec.d + nlroi_config.d_g
        params = init_params(nlroi_config, prng)
    return ToyModel(
        spec=spec,
        nlroi_config=nlroi_config,
        nlroi_params=params,
        w_head=np.zeros((spec.k, head_in)),
        b_head=np.zeros(spec.k),
    )


def model_logits(model: ToyModel, blob: np.ndarray):
    """Per-RoI K-way logits plus the intermediates backward needs."""
    if model.nlroi_config is None:
        feats, cache = blob, None
    else:
        feats, cache = nlroi_forward(blob, model.nlroi_params, model.nlroi_config)
    pooled = ops.global_avg_pool(feats)
    logits = ops.matmul(pooled, model.w_head.T) + model.b_head[None, :]
    return logits, pooled, cache


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over rows and the gradient d(mean CE)/d(logits)."""
    n = logits.shape[0]
    probs = ops.softmax_rows(logits)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(n), labels]
    loss = float(np.mean(lse - picked))
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def _scene_grads(model: ToyModel, scene: Scene):
    """Loss and gradients for one scene (head always; operator if present)."""
    logits, pooled, cache = model_logits(model, scene.features)
    loss, d_logits = _cross_entropy(logits, scene.labels)
    d_w_head = ops.matmul(d_logits.T, pooled)
    d_b_head = np.sum(d_logits, axis=0)
    d_pooled = ops.matmul(d_logits, model.w_head)
    d_nlroi = None
    if model.nlroi_config is not None:
        (d_feats,) = ops.global_avg_pool_vjp(
            np.empty(
                (
                    scene.features.shape[0],
                    model.spec.d + model.nlroi_config.d_g,
                    model.spec.h,
                    model.spec.w,
                )
            ),
            d_pooled,
        )
        _, d_nlroi = nlroi_backward(cache, model.nlroi_params, model.nlroi_config, d_feats)
    return loss, d_w_head, d_b_head, d_nlroi


@dataclass
class Hyper:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 3000
    scenes_per_step: int = 8

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate, momentum, weight_decay must be >= 0")
        if self.steps < 0 or self.scenes_per_step < 1:
            raise ConfigError("steps must be >= 0 and scenes_per_step >= 1")


def train(
    variant: str,
    spec: SceneSpec,
    nlroi_config: Optional[NlRoiConfig],
    hyper: Hyper,
    seed: int,
    log_fn=None,
    log_every: int = 100,
):
    """SGD with momentum: v <- mu*v + (grad + wd*param), param <- param - lr*v.

    Gradients average over the step's scenes in generation order. Returns
    (model, per-step losses). Raises DivergenceError on a non-finite loss.
    ``log_fn(step, loss)`` fires every ``log_every`` steps (1-based).
    """
    if variant not in ("baseline", "nlroi"):
        raise ConfigError(f"variant must be 'baseline' or 'nlroi', got {variant!r}")
    if variant == "baseline":
        nlroi_config = None
    elif nlroi_config is None:
        raise ConfigError("the nlroi variant needs an operator config")
    prng = Prng(seed)
    model = init_model(spec, nlroi_config, prng)

    trainable = [("w_head", model), ("b_head", model)]
    if model.nlroi_params is not None:
        trainable += [(name, model.nlroi_params) for name, _ in model.nlroi_params.tensors()]
    velocity = {name: np.zeros_like(getattr(owner, name)) for name, owner in trainable}

    losses = []
    for step in range(1, hyper.steps + 1):
        grads = {name: np.zeros_like(getattr(owner, name)) for name, owner in trainable}
        step_loss = 0.0
        for _ in range(hyper.scenes_per_step):
            scene = generate_scene(prng, spec)
            loss, d_w_head, d_b_head, d_nlroi = _scene_grads(model, scene)
            step_loss += loss
            grads["w_head"] += d_w_head
            grads["b_head"] += d_b_head
            if d_nlroi is not None:
                for name, g in d_nlroi.tensors():
                    grads[name] += g
        step_loss /= hyper.scenes_per_step
        losses.append(step_loss)
        if not np.isfinite(step_loss):
            raise DivergenceError(step, step_loss)
        for name, owner in trainable:
            p = getattr(owner, name)
            g = grads[name] / hyper.scenes_per_step + hyper.weight_decay * p
            velocity[name] = hyper.momentum * velocity[name] + g
            setattr(owner, name, p - hyper.learning_rate * velocity[name])
        if log_fn is not None and step % log_every == 0:
            log_fn(step, step_loss)
    return model, losses


def evaluate(model: ToyModel, scenes: int, seed: int) -> float:
    """Mean per-RoI accuracy over freshly generated scenes."""
    prng = Prng((seed ^ _EVAL_SEED_SALT) & _MASK64)
    correct = 0
    total = 0
    for _ in range(scenes):
        scene = generate_scene(prng, model.spec)
        logits, _, _ = model_logits(model, scene.features)
        preds = np.argmax(logits, axis=1)
        correct += int(np.sum(preds == scene.labels))
        total += scene.labels.size
    return correct / total
