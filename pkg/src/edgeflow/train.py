"""Two-phase training: coarse trunk first, then everything with split
learning rates. Includes the training-time click sampler and the polynomial
learning-rate decay with a 1% floor at the end of each phase.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .clicks import (Click, NEGATIVE, POSITIVE, encode_clicks, erode4,
                     extract_edge_mask, binarize, sobel_edge)
from .data import Sample, augment
from .losses import FocalParams, LossWeights, total_loss
from .model import (
    Model,
    ModelConfig,
    _interaction_bundle,
    build_model,
    coarse_forward_batch,
    forward_full,
    save_checkpoint,
)
from .optim import AdamState, adam_step, zero_grads
from .tensor import Tape, Tensor

DEFAULT_LR_FINENET = 2e-3


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 8
    phase2_epochs: int = 6
    lr_phase1: float = 2e-3
    lr_finenet: Optional[float] = None  # defaults to 2e-3 when the refinement head is on
    lr_coarse_phase2: float = 1e-4
    batch_size: int = 1
    resize_range: Tuple[float, float] = (0.75, 1.4)
    crop_size: Optional[Tuple[int, int]] = None  # defaults to the model input size
    seed: int = 0
    train_size: int = 500
    holdout_size: int = 50

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lr_phase1 <= 0 or self.lr_coarse_phase2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_finenet is not None and self.lr_finenet <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.resize_range[0] < self.resize_range[1]:
            raise ValueError("resize_range must be (low, high) with low < high")
        if self.train_size < 1 or self.holdout_size < 0:
            raise ValueError("dataset sizes must be positive")


def poly_lr(step: int, total: int, base_lr: float) -> float:
    """Polynomial decay (power 0.9) from base_lr down to exactly 1% of it."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base_lr * (0.01 + 0.99 * (1.0 - step / total) ** 0.9)


# ---------------------------------------------------------------------------
# training-time click sampling


def _erode_n(mask: np.ndarray, n: int) -> np.ndarray:
    m = mask.astype(bool)
    for _ in range(n):
        m = erode4(m)
    return m


def sample_training_clicks(gt_mask: np.ndarray, rng: np.random.Generator) -> List[Click]:
    """1-5 positives from the object core (3-px erosion, falling back to the
    whole object), 0-5 negatives from a 5-40 px band around it (falling back
    to anywhere in the background)."""
    gt = (gt_mask[0] if gt_mask.ndim == 3 else gt_mask).astype(bool)
    if not gt.any():
        raise ValueError("ground truth has no foreground to click on")
    h, w = gt.shape

    core = _erode_n(gt, 3)
    if not core.any():
        core = gt
    pos_pool = np.flatnonzero(core)
    n_pos = int(rng.integers(1, 6))
    picks = rng.choice(pos_pool, size=n_pos, replace=True)

    clicks = []
    for flat in picks:
        clicks.append(Click(x=int(flat % w), y=int(flat // w), polarity=POSITIVE,
                            index=len(clicks) + 1))

    bg = ~gt
    n_neg = int(rng.integers(0, 6))
    if n_neg > 0 and bg.any():
        dist = ndimage.distance_transform_edt(bg)
        band = bg & (dist >= 5) & (dist <= 40)
        neg_pool = np.flatnonzero(band if band.any() else bg)
        for flat in rng.choice(neg_pool, size=n_neg, replace=True):
            clicks.append(Click(x=int(flat % w), y=int(flat // w), polarity=NEGATIVE,
                                index=len(clicks) + 1))
    return clicks


# ---------------------------------------------------------------------------
# batch assembly


def _simulate_edge_priors(model: Model, images: np.ndarray, click_maps: np.ndarray) -> np.ndarray:
    """No-grad forward with zero priors; returns the edge masks of the
    binarized predictions (the iterative-use prior, simulated in one shot).

    Callers pass the click maps of the *previous* interaction state, since
    at prediction time the prior is always one click behind the current set.
    """
    n, _, h, w = images.shape
    zeros = np.zeros((n, 1, h, w), dtype=np.float32)
    out = forward_full(model, Tensor(images, dtype=np.float32),
                       Tensor(click_maps, dtype=np.float32), Tensor(zeros))
    prob = 1.0 / (1.0 + np.exp(-out.final_logits.data.astype(np.float64)))
    priors = np.empty((n, 1, h, w), dtype=np.float64)
    for i in range(n):
        priors[i, 0] = extract_edge_mask(binarize(prob[i, 0]))
    return priors


def _assemble_batch(model: Model, samples: Sequence[Sample], config: TrainConfig,
                    crop: Tuple[int, int], rng: np.random.Generator):
    n = len(samples)
    h, w = crop
    images = np.empty((n, 3, h, w), dtype=np.float32)
    click_maps = np.empty((n, 2, h, w), dtype=np.float32)
    gts = np.empty((n, 1, h, w), dtype=np.float64)
    want_prior = np.zeros(n, dtype=bool)
    clicks_by_sample = []
    for i, sample in enumerate(samples):
        aug = augment(sample, rng, crop_size=crop, resize_range=config.resize_range)
        for _ in range(10):
            if aug.gt_mask.any():
                break
            aug = augment(sample, rng, crop_size=crop, resize_range=config.resize_range)
        if not aug.gt_mask.any():
            raise RuntimeError(f"augmentation emptied {sample.instance_id} 10 times in a row")
        clicks = sample_training_clicks(aug.gt_mask, rng)
        clicks_by_sample.append(clicks)
        images[i] = aug.image
        click_maps[i] = encode_clicks(clicks, h, w)
        gts[i] = aug.gt_mask
        if (model.config.use_edge_flow and model.config.prior_mode == "ei"
                and len(clicks) > 1):
            want_prior[i] = rng.random() < 0.5

    # The prior channel is trained the way it will be fed at prediction
    # time: "ei" mixes zero priors (first click) with simulated previous-mask
    # edges, "si" always carries the static image edges, "none" stays zero.
    # The simulated prediction drops the newest click because the live prior
    # is always derived from the mask that existed before that click landed;
    # single-click samples therefore keep the zero (first-click) prior.
    priors = None
    if model.config.use_edge_flow:
        priors = np.zeros((n, 1, h, w), dtype=np.float32)
        if model.config.prior_mode == "si":
            for i in range(n):
                priors[i] = sobel_edge(images[i].astype(np.float64))
        elif want_prior.any():
            idx = np.flatnonzero(want_prior)
            prev_maps = np.stack([
                encode_clicks(clicks_by_sample[i][:-1], h, w) for i in idx
            ]).astype(np.float32)
            priors[idx] = _simulate_edge_priors(model, images[idx], prev_maps)
    return images, click_maps, priors, gts


# ---------------------------------------------------------------------------
# the optimization loop


def _param_groups(model: Model):
    fine = [(n, p) for n, p in model.named_parameters() if n.startswith("fine.")]
    coarse = [(n, p) for n, p in model.named_parameters() if not n.startswith("fine.")]
    return coarse, fine


def _grads(params):
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def train(config: TrainConfig, model_config: ModelConfig,
          train_samples: Sequence[Sample], out_dir=None):
    """Run both phases over the provided samples; returns (model, log records).

    Phase 1 updates only the coarse parameters with lr_phase1. Phase 2
    restarts Adam and updates everything, refinement parameters at
    lr_finenet and the rest at lr_coarse_phase2. Each phase decays its rates
    polynomially to 1%. When out_dir is given, writes checkpoint.bin and
    train_log.jsonl there.
    """
    if config.lr_finenet is not None and not model_config.use_finenet:
        raise ValueError("lr_finenet set but the refinement head is disabled")
    lr_fine = config.lr_finenet if config.lr_finenet is not None else DEFAULT_LR_FINENET
    if not train_samples:
        raise ValueError("no training samples")

    crop = tuple(config.crop_size) if config.crop_size else model_config.input_size
    if crop != model_config.input_size:
        raise ValueError(f"crop size {crop} must match model input size {model_config.input_size}")

    rng = np.random.default_rng(config.seed)
    model = build_model(model_config, seed=config.seed)
    coarse_named, fine_named = _param_groups(model)
    coarse_params = [p for _, p in coarse_named]
    fine_params = [p for _, p in fine_named]

    n = len(train_samples)
    steps_per_epoch = -(-n // config.batch_size)
    records = []
    global_epoch = 0

    def run_phase(phase: int, epochs: int):
        nonlocal global_epoch
        if epochs == 0:
            return
        total_steps = epochs * steps_per_epoch
        state_coarse = AdamState.for_params(coarse_params)
        state_fine = AdamState.for_params(fine_params) if phase == 2 and fine_params else None
        step = 0
        for _ in range(epochs):
            global_epoch += 1
            order = rng.permutation(n)
            epoch_parts = {"loss_mask": 0.0, "loss_edge": 0.0, "loss_aux": 0.0}
            epoch_lr = poly_lr(step, total_steps,
                               config.lr_phase1 if phase == 1 else config.lr_coarse_phase2)
            seen = 0
            for b0 in range(0, n, config.batch_size):
                batch = [train_samples[i] for i in order[b0 : b0 + config.batch_size]]
                images, click_maps, priors, gts = _assemble_batch(model, batch, config, crop, rng)
                img_t = Tensor(images)
                cm_t = Tensor(click_maps)
                pr_t = Tensor(priors) if priors is not None else None
                with Tape() as tape:
                    if phase == 1:
                        out = coarse_forward_batch(model, img_t, _interaction_bundle(model, cm_t, pr_t))
                    else:
                        out = forward_full(model, img_t, cm_t, pr_t)
                    loss, parts = total_loss(out, gts)
                    tape.backward(loss)
                if phase == 1:
                    lr = poly_lr(step, total_steps, config.lr_phase1)
                    adam_step(coarse_params, _grads(coarse_params), state_coarse, lr)
                else:
                    adam_step(coarse_params, _grads(coarse_params), state_coarse,
                              poly_lr(step, total_steps, config.lr_coarse_phase2))
                    if state_fine is not None:
                        adam_step(fine_params, _grads(fine_params), state_fine,
                                  poly_lr(step, total_steps, lr_fine))
                zero_grads(model.parameters())
                step += 1
                bn = len(batch)
                seen += bn
                for k in epoch_parts:
                    epoch_parts[k] += parts[k] * bn
            record = {"epoch": global_epoch, "phase": phase, "lr": epoch_lr}
            record.update({k: v / seen for k, v in epoch_parts.items()})
            records.append(record)

    run_phase(1, config.phase1_epochs)
    run_phase(2, config.phase2_epochs)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "checkpoint.bin")
        with open(out_dir / "train_log.jsonl", "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
    return model, records
