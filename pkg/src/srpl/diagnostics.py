"""Post-hoc analyses of trained runs: phase drift, depth geometry,
resonance trajectories, and engine loss comparisons.

Everything here is descriptive. Reports carry measured values (plus the
published reference magnitude for the phase drift) and never judge them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Model, forward_batch
from .spectral_rope import SpectralBasis, mismatch_report
from .tasks import DYCK3, TaskSample, dyck_token_depths, get_task
from .tensor import ShapeError
from .training import RunHistory

# published drift magnitude, shown alongside measurements as context only
REFERENCE_MEAN_SHIFT = 7.6e-4


@dataclass
class PhaseReport:
    delta_q: np.ndarray
    delta_k: np.ndarray
    mean_abs_shift: float
    alternation_rate: float
    reference_mean_shift: float = REFERENCE_MEAN_SHIFT


def _alternation(delta: np.ndarray) -> float:
    if delta.shape[0] < 2:
        return 0.0
    products = delta[:-1] * delta[1:]
    return float((products < 0).sum() / products.shape[0])


def zigzag_report(initial: SpectralBasis, trained: SpectralBasis) -> PhaseReport:
    """Per-index phase drift (trained - initial) on both sides.

    A tied basis contributes the same vector twice, leaving the scalar
    summaries equal to their one-sided values.
    """
    if initial.n_pairs != trained.n_pairs:
        raise ShapeError(
            f"bases disagree: {initial.n_pairs} vs {trained.n_pairs} pairs")
    dq = trained.phase_q.data - initial.phase_q.data
    dk = trained.phase_k.data - initial.phase_k.data
    mean_abs = float(np.mean(np.concatenate([np.abs(dq), np.abs(dk)])))
    rate = 0.5 * (_alternation(dq) + _alternation(dk))
    return PhaseReport(delta_q=dq, delta_k=dk, mean_abs_shift=mean_abs,
                       alternation_rate=rate)


@dataclass
class DepthProbeReport:
    depths: list[int]                      # present depths, ascending
    absent: list[int]                      # depths with zero occupancy
    counts: dict[int, int]
    mean_vectors: dict[int, np.ndarray]
    gram: np.ndarray                       # normalized inner products, present depths
    adjacent_similarity: list[tuple[int, int, float]]
    projection: dict[int, tuple[float, float]]  # top-2 principal coordinates
    assignments: list[np.ndarray] = field(default_factory=list)


def depth_probe(model: Model, samples: list[TaskSample], max_depth: int) -> DepthProbeReport:
    """Bucket final hidden states by the stack depth at each position.

    Depth at a position comes from the pushdown oracle over the sample's
    bracket string (opens count the level they create, closes the level
    they close). Buckets never seen stay out of the Gram matrix and are
    listed as absent.
    """
    if not samples:
        raise ValueError("depth_probe needs at least one sample")
    spec = get_task(DYCK3)
    lengths = {s.input_tokens.shape[0] for s in samples}
    if len(lengths) != 1:
        raise ValueError("depth_probe expects samples of one length")

    assignments = []
    for s in samples:
        full = "".join(spec.detokenize(s.input_tokens)) + spec.vocab[s.target_tokens[-1]]
        depths = dyck_token_depths(full)
        assignments.append(np.array(depths[:s.input_tokens.shape[0]]))

    inputs = np.stack([s.input_tokens for s in samples])
    _, hidden = forward_batch(model, inputs, return_hidden=True)
    h = hidden.data

    buckets: dict[int, list[np.ndarray]] = {}
    for b, depth_row in enumerate(assignments):
        for t, d in enumerate(depth_row):
            buckets.setdefault(int(d), []).append(h[b, t])
    present = sorted(d for d in buckets if 1 <= d <= max_depth)
    absent = [d for d in range(1, max_depth + 1) if d not in buckets]

    counts = {d: len(buckets[d]) for d in present}
    means = {d: np.mean(buckets[d], axis=0) for d in present}
    stacked = np.stack([means[d] for d in present])
    norms = np.linalg.norm(stacked, axis=1, keepdims=True)
    unit = stacked / np.where(norms == 0.0, 1.0, norms)
    gram = unit @ unit.T

    adjacent = [(d, d + 1, float(gram[i, present.index(d + 1)]))
                for i, d in enumerate(present) if d + 1 in counts]

    centered = stacked - stacked.mean(axis=0, keepdims=True)
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    coords = centered @ vecs[:, -2:]
    projection = {d: (float(coords[i, 0]), float(coords[i, 1]))
                  for i, d in enumerate(present)}
    return DepthProbeReport(depths=present, absent=absent, counts=counts,
                            mean_vectors=means, gram=gram,
                            adjacent_similarity=adjacent, projection=projection,
                            assignments=assignments)


@dataclass
class ResonanceTrajectory:
    distance: int
    steps: np.ndarray
    per_layer: np.ndarray  # (snapshots, layers) best cos(omega*N) per layer
    best: np.ndarray       # (snapshots,) max over layers


def resonance_audit(history: RunHistory, task_distance: int) -> ResonanceTrajectory:
    """Best cos(omega * N) across the basis, per snapshot."""
    if task_distance < 1:
        raise ValueError(f"task_distance must be >= 1, got {task_distance}")
    if not history.snapshots:
        raise ValueError("run history carries no basis snapshots")
    steps = np.array([step for step, _ in history.snapshots])
    per_layer = np.array([[mismatch_report(basis, task_distance).best for basis in bases]
                          for _, bases in history.snapshots])
    return ResonanceTrajectory(distance=task_distance, steps=steps,
                               per_layer=per_layer, best=per_layer.max(axis=1))


@dataclass
class LabeledRun:
    task: str
    engine: str
    seed: int
    history: RunHistory


def loss_compare(runs: list[LabeledRun]) -> dict[str, dict]:
    """Per-task table of mean final losses, gain (std - spec)/std, winner."""
    if len(runs) < 2:
        raise ValueError("loss_compare needs at least two labeled runs")
    by_task: dict[str, dict[str, list[LabeledRun]]] = {}
    for run in runs:
        if run.engine not in ("standard", "spectral"):
            raise ValueError(f"unknown engine label {run.engine!r}")
        by_task.setdefault(run.task, {"standard": [], "spectral": []})[run.engine].append(run)
    table = {}
    for task in sorted(by_task):
        groups = by_task[task]
        if not groups["standard"] or not groups["spectral"]:
            raise ValueError(
                f"task {task!r} lacks runs for both engines; labels are mismatched")
        std = float(np.mean([r.history.final_loss for r in groups["standard"]]))
        spec = float(np.mean([r.history.final_loss for r in groups["spectral"]]))
        if spec == std:
            gain, winner = 0.0, "tie"
        else:
            gain = (std - spec) / std if std != 0.0 else 0.0
            winner = "spectral" if spec < std else "standard"
        table[task] = {"standard": std, "spectral": spec, "gain": gain,
                       "winner": winner,
                       "n_runs": (len(groups["standard"]), len(groups["spectral"]))}
    return table


def build_summary(task: str, engine: str, final_loss: float, gain: Optional[float],
                  phase: Optional[PhaseReport],
                  resonance: Optional[ResonanceTrajectory]) -> dict:
    return {
        "task": task,
        "engine": engine,
        "final_loss": final_loss,
        "gain": gain,
        "mean_abs_phase_shift": phase.mean_abs_shift if phase else None,
        "alternation_rate": phase.alternation_rate if phase else None,
        "best_resonance_initial": float(resonance.best[0]) if resonance else None,
        "best_resonance_final": float(resonance.best[-1]) if resonance else None,
    }


# ---------------------------------------------------------------------------
# report files


def write_phase_report_csv(path: str, report: PhaseReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "delta_phase_q", "delta_phase_k"])
        for i in range(report.delta_q.shape[0]):
            w.writerow([i, repr(float(report.delta_q[i])), repr(float(report.delta_k[i]))])


def write_depth_probe_csv(path: str, report: DepthProbeReport) -> None:
    """Gram rows plus projection coordinates, one line per present depth."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", "count", "proj_x", "proj_y"]
                   + [f"sim_d{d}" for d in report.depths])
        for i, d in enumerate(report.depths):
            x, y = report.projection[d]
            w.writerow([d, report.counts[d], repr(x), repr(y)]
                       + [repr(float(v)) for v in report.gram[i]])


def write_resonance_csv(path: str, traj: ResonanceTrajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "best"] + [f"layer{i}" for i in range(traj.per_layer.shape[1])])
        for i, step in enumerate(traj.steps):
            w.writerow([int(step), repr(float(traj.best[i]))]
                       + [repr(float(v)) for v in traj.per_layer[i]])


def write_compare_csv(path: str, table: dict[str, dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "standard_loss", "spectral_loss", "gain", "winner"])
        for task, row in table.items():
            w.writerow([task, repr(row["standard"]), repr(row["spectral"]),
                        repr(row["gain"]), row["winner"]])


def write_curves_csv(path: str, runs: list[LabeledRun]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "engine", "seed", "step", "loss"])
        for run in runs:
            for step, loss in enumerate(run.history.losses, start=1):
                w.writerow([run.task, run.engine, run.seed, step, repr(float(loss))])


def write_summary_json(path: str, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
