"""Central finite-difference verification of the analytic gradients.

The check perturbs each trainable scalar by +-h, re-evaluates the full
stage-1 loss, and compares the quotient against the tape's gradient. It
runs at a generic point: trainable parameters first get small seeded
noise, because the zero-initialized adapter up path makes the down-path
gradients structurally zero at init and the comparison there would be
vacuous.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable

import numpy as np

from . import tensor as T
from .data import caption_for, make_image
from .model import Model, ModelConfig
from .policy import ParamPolicy, apply_policy, build_policy
from .tensor import Tensor
from .vision import encode_image, project_visual, qformer_stub

# Denominator floor: pairs of gradients that are both this small count as
# matching (covers structurally zero gradients without dividing by zero).
RELERR_FLOOR = 1e-8


def finite_difference(loss_fn: Callable[[], float], arrays: dict[str, np.ndarray],
                      h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every scalar in ``arrays``."""
    grads: dict[str, np.ndarray] = {}
    for path, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn()
            flat[i] = keep - h
            down = loss_fn()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads[path] = g
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = RELERR_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def perturb_trainable(model: Model, policy: ParamPolicy, seed: int,
                      scale: float = 0.2) -> None:
    """Add seeded noise to every trainable parameter (generic-point setup)."""
    rng = np.random.default_rng([seed, 99])
    params = model.named_params()
    for path in policy.trainable_paths():
        p = params[path]
        p.data += rng.normal(0.0, scale, size=p.shape)


def stage1_loss_fn(model: Model, n_items: int = 2) -> Callable[[], float]:
    """Closure recomputing the same tiny stage-1 batch loss from live weights."""
    n_classes, n_levels = 4, 4
    images = [make_image(i % n_classes, (i + 1) % n_levels, n_levels)
              for i in range(n_items)]
    captions = [caption_for(img.class_id, img.intensity_id, n_classes)
                for img in images]

    def loss_fn() -> float:
        losses = []
        for img, caption in zip(images, captions):
            feats = encode_image(img, model.vision.stub)
            tokens = qformer_stub(feats, model.vision.queries)
            prefix = project_visual(tokens, model.vision.proj_w, model.vision.proj_b)
            _, loss = model.forward_loss(np.asarray(caption), prefix)
            losses.append(loss)
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return (total * (1.0 / len(losses))).item()

    return loss_fn


def run_gradcheck(config: ModelConfig | None = None, preset: str = "artgpt4",
                  seed: int = 7, h: float = 1e-5,
                  n_items: int = 2) -> dict[str, float]:
    """Max relative error per trainable parameter path on the toy stage-1 loss."""
    cfg = config if config is not None else ModelConfig()
    model = Model.init(cfg, seed)
    policy = build_policy(cfg, preset)
    trainable = apply_policy(model, policy)
    perturb_trainable(model, policy, seed)

    for p in trainable.values():
        p.grad = None
    stage1_loss_tensor(model, n_items).backward()
    analytic = {path: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for path, p in trainable.items()}

    loss_fn = stage1_loss_fn(model, n_items)
    numeric = finite_difference(loss_fn, {path: p.data for path, p in trainable.items()}, h)
    return {path: max_relative_error(analytic[path], numeric[path])
            for path in trainable}


def stage1_loss_tensor(model: Model, n_items: int = 2) -> Tensor:
    n_classes, n_levels = 4, 4
    losses = []
    for i in range(n_items):
        img = make_image(i % n_classes, (i + 1) % n_levels, n_levels)
        caption = caption_for(img.class_id, img.intensity_id, n_classes)
        feats = encode_image(img, model.vision.stub)
        tokens = qformer_stub(feats, model.vision.queries)
        prefix = project_visual(tokens, model.vision.proj_w, model.vision.proj_b)
        _, loss = model.forward_loss(np.asarray(caption), prefix)
        losses.append(loss)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


@contextmanager
def corrupted_gelu_gradient(factor: float = 1.01):
    """Negative control: scales the GELU backward rule by ``factor``."""
    original = T._gelu_grad
    T._gelu_grad = lambda x: original(x) * factor
    try:
        yield
    finally:
        T._gelu_grad = original
