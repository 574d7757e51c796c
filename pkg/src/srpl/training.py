"""Adam training loop with per-step history and basis snapshots.

Seed streams are split so engine choice cannot desynchronize the data:
weights come from [seed, 0], basis phase noise from [seed, 1] (both in
the model builder), training batches from [seed, 2], evaluation batches
from [seed, 3]. Two models built and trained with one seed therefore see
identical data regardless of engine kind.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .model import Model, forward_batch
from .spectral_rope import SpectralBasis
from .tasks import get_task, sample_batch
from .tensor import Tensor


class TrainingDivergence(ArithmeticError):
    """Loss or parameters became non-finite during training."""


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 32
    learning_rate: float = 1e-3
    basis_learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    snapshot_every: int = 10
    eval_batches: int = 4

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.snapshot_every < 1 or self.eval_batches < 1:
            raise ValueError("batch_size, snapshot_every and eval_batches must be >= 1")
        if self.learning_rate <= 0 or self.basis_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam constants")


@dataclass
class RunHistory:
    losses: np.ndarray
    # (step, per-layer basis copies); step 0 is the initialization
    snapshots: list[tuple[int, list[SpectralBasis]]]
    final_loss: float
    final_accuracy: float


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[tuple[str, Tensor]]) -> "AdamState":
        return cls(m=[np.zeros(t.shape) for _, t in params],
                   v=[np.zeros(t.shape) for _, t in params])


def adam_step(params: list[tuple[str, Tensor]], grads: list[np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction.

    Parameters whose name contains ".rope." form the basis group and use
    cfg.basis_learning_rate; everything else uses cfg.learning_rate.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists must align")
    state.t += 1
    bc1 = 1.0 - cfg.adam_beta1 ** state.t
    bc2 = 1.0 - cfg.adam_beta2 ** state.t
    for i, ((name, p), g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        lr = cfg.basis_learning_rate if ".rope." in name else cfg.learning_rate
        m = state.m[i]
        v = state.v[i]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def batch_loss(model: Model, inputs: np.ndarray, targets: np.ndarray,
               pad_id: int) -> Tensor:
    logits = forward_batch(model, inputs)
    b, s, v = logits.shape
    return T.cross_entropy(T.reshape(logits, (b * s, v)), targets.reshape(-1),
                           ignore_index=pad_id)


def _abort_divergence(model: Model, step: int) -> None:
    for name, p in model.parameters():
        if not np.all(np.isfinite(p.data)):
            raise TrainingDivergence(
                f"non-finite loss at step {step}; parameter group {name!r} is non-finite")
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergence(
                f"non-finite loss at step {step}; gradient of {name!r} is non-finite")
    raise TrainingDivergence(f"non-finite loss at step {step}")


def train(model: Model, task_name: str, cfg: TrainConfig,
          gen_params: Optional[dict] = None) -> RunHistory:
    """Optimize all trainable parameters on fresh batches each step."""
    task = get_task(task_name)
    if model.config.vocab_size != task.vocab_size:
        raise ValueError(
            f"model vocab {model.config.vocab_size} does not match task "
            f"{task.name} vocab {task.vocab_size}")
    gen_params = gen_params or {}
    params = model.parameters()
    state = AdamState.for_params(params)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    losses = np.empty(cfg.steps)
    snapshots = [(0, [layer.basis.clone() for layer in model.layers])]
    for step in range(1, cfg.steps + 1):
        inputs, targets, _ = sample_batch(task.name, cfg.batch_size, data_rng,
                                          **gen_params)
        for _, p in params:
            p.zero_grad()
        with T.GradTape() as tape:
            loss = batch_loss(model, inputs, targets, task.pad_id)
            tape.backward(loss)
        value = loss.item()
        if not math.isfinite(value):
            _abort_divergence(model, step)
        losses[step - 1] = value
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for _, p in params]
        adam_step(params, grads, state, cfg)
        if step % cfg.snapshot_every == 0:
            snapshots.append((step, [layer.basis.clone() for layer in model.layers]))

    final_loss, final_accuracy = evaluate(model, task_name,
                                          cfg.eval_batches * cfg.batch_size,
                                          cfg.seed, gen_params=gen_params,
                                          batch_size=cfg.batch_size)
    return RunHistory(losses=losses, snapshots=snapshots, final_loss=final_loss,
                      final_accuracy=final_accuracy)


def masked_metrics(logits: np.ndarray, targets: np.ndarray,
                   pad_id: int) -> tuple[float, int, np.ndarray]:
    """(summed nll over active positions, active count, per-row exact match)."""
    b, s, v = logits.shape
    flat = logits.reshape(b * s, v)
    tflat = targets.reshape(b * s)
    active = tflat != pad_id
    x = flat[active]
    m = x.max(axis=-1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(x - m).sum(axis=-1)))
    nll = lse - x[np.arange(x.shape[0]), tflat[active]]
    pred_ok = np.ones((b, s), dtype=bool)
    mask2d = targets != pad_id
    pred = logits.argmax(axis=-1)
    pred_ok &= np.where(mask2d, pred == targets, True)
    exact = pred_ok.all(axis=1) & mask2d.any(axis=1)
    return float(nll.sum()), int(active.sum()), exact


def evaluate(model: Model, task_name: str, n_samples: int, seed: int,
             gen_params: Optional[dict] = None, batch_size: int = 32) -> tuple[float, float]:
    """Mean masked loss and exact-match accuracy on a fresh sample stream.

    The stream is derived from [seed, 3], disjoint from the training
    stream [seed, 2] by construction.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    task = get_task(task_name)
    gen_params = gen_params or {}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    total_nll = 0.0
    total_count = 0
    matches = 0
    remaining = n_samples
    while remaining > 0:
        n = min(batch_size, remaining)
        inputs, targets, _ = sample_batch(task.name, n, rng, **gen_params)
        logits = forward_batch(model, inputs).data
        nll, count, exact = masked_metrics(logits, targets, task.pad_id)
        total_nll += nll
        total_count += count
        matches += int(exact.sum())
        remaining -= n
    return total_nll / total_count, matches / n_samples


# ---------------------------------------------------------------------------
# history / snapshot CSV export


def write_history_csv(path: str, losses: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def read_history_csv(path: str) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "loss"]:
        raise ValueError(f"{path} is not a history CSV")
    return np.array([float(r[1]) for r in rows[1:]])


def write_snapshot_csv(path: str, snapshots: list[tuple[int, list[SpectralBasis]]],
                       layer: int) -> None:
    """Basis trajectory of one layer: step column prepended to the basis
    dump columns (index, omega, amplitude, phase_q, phase_k)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "index", "omega", "amplitude", "phase_q", "phase_k"])
        for step, bases in snapshots:
            basis = bases[layer]
            for i in range(basis.n_pairs):
                w.writerow([step, i, repr(float(basis.omega.data[i])),
                            repr(float(basis.amplitude.data[i])),
                            repr(float(basis.phase_q.data[i])),
                            repr(float(basis.phase_k.data[i]))])


def read_snapshot_csv(path: str) -> list[tuple[int, SpectralBasis]]:
    """Inverse of write_snapshot_csv for a single layer's file."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "index", "omega", "amplitude", "phase_q", "phase_k"]:
        raise ValueError(f"{path} is not a basis snapshot CSV")
    by_step: dict[int, list] = {}
    for r in rows[1:]:
        by_step.setdefault(int(r[0]), []).append(r)
    out = []
    for step in sorted(by_step):
        chunk = sorted(by_step[step], key=lambda r: int(r[1]))
        omega = np.array([float(r[2]) for r in chunk])
        amp = np.array([float(r[3]) for r in chunk])
        pq = np.array([float(r[4]) for r in chunk])
        pk = np.array([float(r[5]) for r in chunk])
        phase_q = Tensor(pq)
        phase_k = phase_q if np.array_equal(pq, pk) else Tensor(pk)
        out.append((step, SpectralBasis(Tensor(omega), Tensor(amp), phase_q, phase_k)))
    return out
