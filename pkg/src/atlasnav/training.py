"""Dataset assembly, the logMSE objective, and the deterministic Adam loop.

The objective is log(MSE + eps) with MSE the mean squared coordinate error
over a minibatch; the log makes the gradient scale-free (residuals are
divided by the current MSE), which keeps one learning rate usable from the
first epochs (errors ~ 1e-1 in normalized units) to convergence (~1e-4).

Determinism contract: for a fixed TrainConfig and TrainingSet the loss
history and the resulting parameters are bit-identical across runs. All
shuffling comes from one seeded generator, batches are visited in order, and
the optimizer runs in float64 on working copies that are quantized back to
the float32 storage format exactly once, at the end.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import model as model_mod
from .atlas import Atlas, from_normalized
from .model import RegressorParams, backward, forward_batch, save_params
from .sampler import DescriptorLayout, IntensityWindow, extract_batch
from .synth import SubjectSample, ground_truth_normalized, sample_training_points

LOSS_EPSILON = 1e-8


class ConfigError(ValueError):
    """Dataset, layout, or model configuration mismatch."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the history up to the last good epoch."""

    def __init__(self, message: str, history: list[float], last_good_epoch: int):
        super().__init__(message)
        self.history = history
        self.last_good_epoch = last_good_epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    loss_epsilon: float = LOSS_EPSILON
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass(frozen=True)
class TrainingSet:
    descriptors: np.ndarray          # (n, total_len) float32
    targets: np.ndarray              # (n, 3) float64
    subject_ids: tuple[str, ...]     # provenance, one entry per subject
    layout_hash: int
    window: IntensityWindow

    def __post_init__(self):
        if self.descriptors.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"row mismatch: {self.descriptors.shape[0]} descriptors vs "
                f"{self.targets.shape[0]} targets")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("targets must be finite")

    @property
    def n(self) -> int:
        return self.descriptors.shape[0]


def _subject_seeds(seed: int, n: int) -> list[int]:
    # one child seed per subject, independent of subject count ordering
    return [int(s) for s in
            np.random.SeedSequence(seed).generate_state(max(n, 1), dtype=np.uint64)[:n]]


def build_dataset(subjects: list[SubjectSample], atlas: Atlas,
                  layout: DescriptorLayout, window: IntensityWindow,
                  n_base: int = 1500, n_perturb: int = 1500,
                  perturb_mm: float = 5.0, seed: int = 0,
                  body_frac: float = 0.8) -> TrainingSet:
    """Sampled points + extracted descriptors for every subject, rows in
    subject order, targets = exact normalized atlas coordinates."""
    if not subjects:
        raise ConfigError("at least one subject is required")
    seeds = _subject_seeds(seed, len(subjects))
    desc_rows, target_rows = [], []
    for s, s_seed in zip(subjects, seeds):
        pts, targets = sample_training_points(
            s, atlas, n_base=n_base, n_perturb=n_perturb, perturb_mm=perturb_mm,
            seed=s_seed, body_frac=body_frac)
        desc_rows.append(extract_batch(s.volume, pts, layout, window))
        target_rows.append(targets)
    return TrainingSet(
        descriptors=np.concatenate(desc_rows, axis=0),
        targets=np.concatenate(target_rows, axis=0),
        subject_ids=tuple(s.id for s in subjects),
        layout_hash=layout.fingerprint(), window=window)


def build_landmark_dataset(subjects: list[SubjectSample], atlas: Atlas,
                           landmark_name: str, layout: DescriptorLayout,
                           window: IntensityWindow, n_base: int = 1500,
                           n_perturb: int = 1500, perturb_mm: float = 5.0,
                           seed: int = 0, body_frac: float = 0.8) -> TrainingSet:
    """Displacement-mode variant: targets are mm vectors from each sampled
    point to the landmark's exact position in that subject's own space."""
    from .synth import subject_landmark_position
    if not subjects:
        raise ConfigError("at least one subject is required")
    if landmark_name not in atlas.landmarks:
        raise ConfigError(f"atlas has no landmark {landmark_name!r}")
    mark_atlas = atlas.landmarks[landmark_name]
    seeds = _subject_seeds(seed, len(subjects))
    desc_rows, target_rows = [], []
    for s, s_seed in zip(subjects, seeds):
        pts, _ = sample_training_points(
            s, atlas, n_base=n_base, n_perturb=n_perturb, perturb_mm=perturb_mm,
            seed=s_seed, body_frac=body_frac)
        mark_subj = subject_landmark_position(s.field, mark_atlas)
        desc_rows.append(extract_batch(s.volume, pts, layout, window))
        target_rows.append(mark_subj - pts)
    return TrainingSet(
        descriptors=np.concatenate(desc_rows, axis=0),
        targets=np.concatenate(target_rows, axis=0),
        subject_ids=tuple(s.id for s in subjects),
        layout_hash=layout.fingerprint(), window=window)


def logmse(pred: np.ndarray, target: np.ndarray, eps: float = LOSS_EPSILON) -> float:
    """log((1/n) * sum_i |pred_i - target_i|^2 + eps)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one row")
    resid = pred - target
    return float(np.log(np.mean(np.sum(resid * resid, axis=1)) + eps))


def train(config: TrainConfig, tset: TrainingSet, params: RegressorParams
          ) -> tuple[RegressorParams, list[float]]:
    """Adam on logmse over seeded-shuffled minibatches.

    Returns (trained params in the float32 storage format, per-epoch mean
    losses). Aborts with TrainingDivergedError on a non-finite loss.
    """
    if tset.n == 0:
        raise ConfigError("training set is empty")
    if params.input_len != tset.descriptors.shape[1]:
        raise ConfigError(
            f"model expects {params.input_len}-wide descriptors, set has "
            f"{tset.descriptors.shape[1]}")
    if params.layout_hash != tset.layout_hash:
        raise ConfigError(
            f"model layout hash {params.layout_hash:#018x} does not match "
            f"training set layout hash {tset.layout_hash:#018x}")

    work = [a.astype(np.float64) for a in params.arrays()]
    m = [np.zeros_like(a) for a in work]
    v = [np.zeros_like(a) for a in work]
    b1, b2 = config.beta1, config.beta2
    lr, eps_a = config.learning_rate, config.eps_adam
    rng = np.random.default_rng(config.seed)
    n = tset.n
    t = 0
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            p64 = _rebuild(params, work)
            grads, loss = backward(p64, tset.descriptors[idx], tset.targets[idx],
                                   eps=config.loss_epsilon)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}; last good epoch "
                    f"{len(history)}", history, len(history))
            batch_losses.append(loss)
            t += 1
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            for w, g, mi, vi in zip(work, grads.arrays(), m, v):
                mi += (1.0 - b1) * (g - mi)
                vi += (1.0 - b2) * (g * g - vi)
                w -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps_a)
        history.append(float(np.mean(batch_losses)))
    trained64 = _rebuild(params, work)
    return trained64.astype(np.float32), history


def _rebuild(template: RegressorParams, arrays: list[np.ndarray]) -> RegressorParams:
    """RegressorParams from flat array list in serialization order."""
    it = iter(arrays)
    input_w, input_b = next(it), next(it)
    blocks = []
    for _ in template.blocks:
        blocks.append(model_mod.BlockParams(next(it), next(it), next(it), next(it)))
    head_w, head_b = next(it), next(it)
    return replace(template, input_w=input_w, input_b=input_b,
                   blocks=tuple(blocks), head_w=head_w, head_b=head_b)


def evaluate(params: RegressorParams | None, subjects: list[SubjectSample],
             atlas: Atlas, layout: DescriptorLayout, window: IntensityWindow,
             n_eval: int = 2000, seed: int = 1, predict_fn=None,
             return_errors: bool = False):
    """World-mm coordinate error statistics on held-out subjects.

    Per point: error = |from_normalized(prediction) - from_normalized(truth)|
    = scale_mm * |predicted - true normalized coordinate|. predict_fn, when
    given, maps subject-space points (n, 3) to normalized coords directly
    (the ground-truth oracle uses this); otherwise the model predicts from
    extracted descriptors.
    """
    if not subjects:
        raise ConfigError("at least one held-out subject is required")
    per = max(1, n_eval // len(subjects))
    seeds = _subject_seeds(seed ^ 0x5EED, len(subjects))
    errors = []
    for s, s_seed in zip(subjects, seeds):
        pts, _ = sample_training_points(s, atlas, n_base=per, n_perturb=0,
                                        seed=s_seed)
        truth = ground_truth_normalized(atlas, s.field, pts)
        if predict_fn is not None:
            pred = np.asarray(predict_fn(pts), dtype=np.float64)
        else:
            desc = extract_batch(s.volume, pts, layout, window)
            pred = forward_batch(params.astype(np.float64), desc)
        diff = from_normalized(atlas, pred) - from_normalized(atlas, truth)
        errors.append(np.linalg.norm(diff, axis=1))
    err = np.concatenate(errors)
    stats = {"mean_mm": float(np.mean(err)),
             "median_mm": float(np.median(err)),
             "p95_mm": float(np.percentile(err, 95)),
             "n": int(err.size)}
    return (stats, err) if return_errors else stats


def evaluate_landmark(predict_point_fn, subjects: list[SubjectSample],
                      atlas: Atlas, landmark_name: str) -> np.ndarray:
    """Per-subject localization error (mm) of a landmark-finding procedure.

    predict_point_fn(subject) returns a world-mm point in that subject's
    space; truth is the exact field-based landmark position.
    """
    from .synth import subject_landmark_position
    mark_atlas = atlas.landmarks[landmark_name]
    errs = []
    for s in subjects:
        truth = subject_landmark_position(s.field, mark_atlas)
        found = np.asarray(predict_point_fn(s), dtype=np.float64)
        errs.append(float(np.linalg.norm(found - truth)))
    return np.asarray(errs)


# ---------------------------------------------------------------------------
# Run directory: config.json, loss_history.csv, model.bgps, eval.json

def save_run(out_dir: str, config: TrainConfig, history: list[float],
             params: RegressorParams, eval_stats: dict | None = None,
             extra_config: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {"train": asdict(config)}
    if extra_config:
        doc.update(extra_config)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "loss_history.csv"), "w", newline="",
              encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "loss"])
        for i, loss in enumerate(history, start=1):
            wr.writerow([i, f"{loss:.17g}"])
    save_params(params, os.path.join(out_dir, "model.bgps"))
    if eval_stats is not None:
        with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8") as f:
            json.dump(eval_stats, f, indent=2, sort_keys=True)
            f.write("\n")
