"""Command-line front end: gen, train, eval, swap, compare, diagnose.

Exit codes are a stable contract: 0 success, 2 usage, 3 numeric failure,
4 state, 5 format, 6 missing input. Output files are written atomically
(temp file + rename) and input files are never mutated.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diagnostics as D
from . import tasks as K
from . import training as TR
from .model import (CheckpointError, Model, ModelConfig, StateError, build_model,
                    forward_batch, load_checkpoint, save_checkpoint, surgical_swap)
from .spectral_rope import RotationEngineKind
from .training import TrainConfig, TrainingDivergence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_STATE = 4
EXIT_FORMAT = 5
EXIT_MISSING = 6


class UsageError(Exception):
    pass


class FormatError(Exception):
    pass


class MissingInputError(Exception):
    pass


_TASK_ALIASES = {
    "dyck3": K.DYCK3,
    "bio": K.BIO_ROTATION,
    "bio_rotation": K.BIO_ROTATION,
    "mod7": K.MODULO7,
    "modulo7": K.MODULO7,
}


def resolve_task(name: str) -> str:
    try:
        return _TASK_ALIASES[name]
    except KeyError:
        raise UsageError(
            f"unknown task {name!r}; choose from {', '.join(sorted(_TASK_ALIASES))}")


def _atomic(path: str, write_fn) -> None:
    tmp = path + ".tmp"
    write_fn(tmp)
    os.replace(tmp, path)


def thread_budget(n_jobs: int) -> int:
    raw = os.environ.get("SRPL_THREADS", "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise UsageError(f"SRPL_THREADS must be an integer, got {raw!r}")
        if cap < 1:
            raise UsageError("SRPL_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_jobs))


# ---------------------------------------------------------------------------
# config file: `key = value` lines, # comments, unknown keys rejected


def load_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MissingInputError(f"cannot read config file {path}: {exc}")
    out = {}
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{path}:{lineno}: expected `key = value`, got {body!r}")
        key, value = body.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


@dataclass
class Opt:
    type: type
    default: object


# every knob has a documented default; this table is the config-file schema
_COMMON_MODEL_OPTS = {
    "hidden_dim": Opt(int, 128),
    "num_heads": Opt(int, 4),
    "num_layers": Opt(int, 2),
    "max_seq_len": Opt(int, 512),
    "rope_base": Opt(float, 10000.0),
    "untied_phase": Opt(bool, False),
    "freeze_basis": Opt(bool, False),
    "phase_init": Opt(str, "training"),
}

_COMMON_TRAIN_OPTS = {
    "steps": Opt(int, 400),
    "batch_size": Opt(int, 32),
    "lr": Opt(float, 1e-3),
    "basis_lr": Opt(float, 1e-3),
    "snapshot_every": Opt(int, 10),
    "eval_batches": Opt(int, 4),
}

_TASK_OPTS = {
    "max_depth": Opt(int, 12),
    "len": Opt(int, 64),
    "motif_len": Opt(int, 8),
    "noise_len": Opt(int, None),
}


def resolve_options(args: argparse.Namespace, schema: dict[str, Opt]) -> dict:
    """Three-level precedence: explicit flag > config file > default."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        unknown = set(file_cfg) - set(schema)
        if unknown:
            raise UsageError(
                f"unknown config keys: {', '.join(sorted(unknown))}; "
                f"known keys: {', '.join(sorted(schema))}")
    merged = {}
    for name, opt in schema.items():
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            merged[name] = flag_value
        elif name in file_cfg:
            raw = file_cfg[name]
            merged[name] = _parse_bool(raw) if opt.type is bool else opt.type(raw)
        else:
            merged[name] = opt.default
    return merged


def gen_params_for(task: str, opts: dict) -> dict:
    if task == K.DYCK3:
        return {"dyck_max_depth": opts["max_depth"], "dyck_len": opts["len"]}
    if task == K.BIO_ROTATION:
        params = {"motif_len": opts["motif_len"]}
        if opts.get("noise_len") is not None:
            params["noise_len"] = opts["noise_len"]
        return params
    return {}


def model_config_for(task: str, engine: RotationEngineKind, opts: dict) -> ModelConfig:
    return ModelConfig(vocab_size=K.get_task(task).vocab_size,
                       hidden_dim=opts["hidden_dim"], num_heads=opts["num_heads"],
                       num_layers=opts["num_layers"], max_seq_len=opts["max_seq_len"],
                       rope_base=opts["rope_base"], engine=engine,
                       untied_phase=opts["untied_phase"],
                       phase_init=opts["phase_init"],
                       freeze_basis=opts["freeze_basis"])


def train_config_for(opts: dict, seed: int) -> TrainConfig:
    return TrainConfig(steps=opts["steps"], batch_size=opts["batch_size"],
                       learning_rate=opts["lr"], basis_learning_rate=opts["basis_lr"],
                       seed=seed, snapshot_every=opts["snapshot_every"],
                       eval_batches=opts["eval_batches"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    task = resolve_task(args.task)
    opts = resolve_options(args, _TASK_OPTS)
    count = args.count if args.count is not None else 100
    seed = args.seed if args.seed is not None else 0
    if count < 0:
        raise UsageError(f"--count must be >= 0, got {count}")
    spec = K.get_task(task)
    params = gen_params_for(task, opts)
    samples = [K.generate_sample(task, s, **params) for s in range(seed, seed + count)]
    _atomic(args.out, lambda p: K.dump_samples(samples, spec, p))
    print(f"wrote {len(samples)} {task} samples to {args.out}")
    print(f"oracle-valid: {len(samples)}/{len(samples)}")
    return EXIT_OK


def _run_one(task: str, engine: RotationEngineKind, seed: int, opts: dict,
             out_dir: str) -> TR.RunHistory:
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(model_config_for(task, engine, opts), seed)
    history = TR.train(model, task, train_config_for(opts, seed),
                       gen_params=gen_params_for(task, opts))
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.srpl"))
    _atomic(os.path.join(out_dir, "history.csv"),
            lambda p: TR.write_history_csv(p, history.losses))
    for layer in range(len(model.layers)):
        _atomic(os.path.join(out_dir, f"snapshots_layer{layer}.csv"),
                lambda p, i=layer: TR.write_snapshot_csv(p, history.snapshots, i))
    return history


def _bio_distance(opts: dict, seed: int, batch_size: int) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    _, _, samples = K.sample_batch(K.BIO_ROTATION, batch_size, rng,
                                   **gen_params_for(K.BIO_ROTATION, opts))
    return int(round(float(np.mean([s.metadata["distance"] for s in samples]))))


def _phase_summary(history: TR.RunHistory) -> D.PhaseReport:
    first = history.snapshots[0][1]
    last = history.snapshots[-1][1]
    reports = [D.zigzag_report(a, b) for a, b in zip(first, last)]
    return D.PhaseReport(
        delta_q=np.concatenate([r.delta_q for r in reports]),
        delta_k=np.concatenate([r.delta_k for r in reports]),
        mean_abs_shift=float(np.mean([r.mean_abs_shift for r in reports])),
        alternation_rate=float(np.mean([r.alternation_rate for r in reports])))


def _run_summary(task: str, engine: str, history: TR.RunHistory, opts: dict,
                 seed: int, gain=None) -> dict:
    phase = _phase_summary(history) if engine == "spectral" else None
    resonance = None
    if task == K.BIO_ROTATION:
        distance = _bio_distance(opts, seed, opts["batch_size"])
        resonance = D.resonance_audit(history, distance)
    return D.build_summary(task, engine, history.final_loss, gain, phase, resonance)


def cmd_train(args) -> int:
    task = resolve_task(args.task)
    engine = RotationEngineKind(args.engine)
    opts = resolve_options(args, {**_COMMON_MODEL_OPTS, **_COMMON_TRAIN_OPTS,
                                  **_TASK_OPTS})
    seed = args.seed if args.seed is not None else 0
    out_dir = args.out
    history = _run_one(task, engine, seed, opts, out_dir)
    summary = _run_summary(task, engine.value, history, opts, seed)
    _atomic(os.path.join(out_dir, "summary.json"),
            lambda p: D.write_summary_json(p, summary))
    print(f"task={task} engine={engine.value} seed={seed}")
    print(f"steps={opts['steps']} final_loss={history.final_loss:.6f} "
          f"final_accuracy={history.final_accuracy:.4f}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    task = resolve_task(args.task)
    opts = resolve_options(args, _TASK_OPTS)
    model = load_checkpoint(args.checkpoint)
    if model.config.vocab_size != K.get_task(task).vocab_size:
        raise UsageError(
            f"checkpoint vocab {model.config.vocab_size} does not match task {task}")
    n = args.n_samples if args.n_samples is not None else 128
    seed = args.seed if args.seed is not None else 0
    loss, accuracy = TR.evaluate(model, task, n, seed,
                                 gen_params=gen_params_for(task, opts))
    print(f"task={task} n_samples={n} seed={seed}")
    print(f"loss={loss:.6f} accuracy={accuracy:.4f}")
    return EXIT_OK


def swap_probe_delta(before: Model, after: Model, seed: int = 0) -> float:
    """Max |logit difference| over a fixed 64-sequence probe batch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
    seq = min(48, before.config.max_seq_len)
    tokens = rng.integers(0, before.config.vocab_size, size=(64, seq))
    a = forward_batch(before, tokens).data
    b = forward_batch(after, tokens).data
    return float(np.abs(a - b).max())


def cmd_swap(args) -> int:
    model = load_checkpoint(getattr(args, "in"))
    swapped = surgical_swap(model)
    delta = swap_probe_delta(model, swapped, seed=args.seed if args.seed is not None else 0)
    save_checkpoint(swapped, args.out)
    print(f"max |delta logits| over probe batch: {delta}")
    print(f"wrote spectral checkpoint to {args.out}")
    if delta != 0.0:
        print("error: swap changed the model's outputs", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_compare(args) -> int:
    opts = resolve_options(args, {**_COMMON_MODEL_OPTS, **_COMMON_TRAIN_OPTS,
                                  **_TASK_OPTS})
    if args.task is None or args.task == "all":
        tasks = list(K.TASK_NAMES)
    else:
        tasks = [resolve_task(args.task)]
    try:
        seeds = [int(s) for s in (args.seeds or "0").split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma-separated integer list, got {args.seeds!r}")
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)

    cells = [(task, engine) for task in tasks
             for engine in (RotationEngineKind.STANDARD, RotationEngineKind.SPECTRAL)]

    def run_cell(cell):
        task, engine = cell
        runs = []
        for seed in seeds:
            cell_dir = os.path.join(out_dir, f"{task}_{engine.value}_seed{seed}")
            history = _run_one(task, engine, seed, opts, cell_dir)
            runs.append(D.LabeledRun(task=task, engine=engine.value, seed=seed,
                                     history=history))
        return runs

    workers = thread_budget(len(cells))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_runs = [run for runs in pool.map(run_cell, cells) for run in runs]
    else:
        all_runs = [run for cell in cells for run in run_cell(cell)]

    table = D.loss_compare(all_runs)
    _atomic(os.path.join(out_dir, "compare.csv"),
            lambda p: D.write_compare_csv(p, table))
    _atomic(os.path.join(out_dir, "curves.csv"),
            lambda p: D.write_curves_csv(p, all_runs))
    for task in tasks:
        spectral_run = next(r for r in all_runs
                            if r.task == task and r.engine == "spectral"
                            and r.seed == seeds[0])
        summary = _run_summary(task, "spectral", spectral_run.history, opts,
                               seeds[0], gain=table[task]["gain"])
        summary["final_loss"] = table[task]["spectral"]
        _atomic(os.path.join(out_dir, f"summary_{task}.json"),
                lambda p, s=summary: D.write_summary_json(p, s))

    print(f"{'task':<14} {'standard':>10} {'spectral':>10} {'gain':>8} winner")
    for task, row in table.items():
        print(f"{task:<14} {row['standard']:>10.4f} {row['spectral']:>10.4f} "
              f"{100 * row['gain']:>7.1f}% {row['winner']}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.report == "zigzag":
        if not args.snapshots:
            raise MissingInputError("zigzag report requires --snapshots (basis trajectory CSV)")
        snaps = _read_snapshots(args.snapshots)
        report = D.zigzag_report(snaps[0][1], snaps[-1][1])
        out = os.path.join(args.out, "zigzag.csv")
        _atomic(out, lambda p: D.write_phase_report_csv(p, report))
        print(f"mean_abs_shift={report.mean_abs_shift!r} "
              f"alternation_rate={report.alternation_rate:.4f} "
              f"(reference magnitude {report.reference_mean_shift})")
        print(f"wrote {out}")
        return EXIT_OK
    if args.report == "depth":
        if not args.checkpoint:
            raise MissingInputError("depth report requires --checkpoint")
        opts = resolve_options(args, _TASK_OPTS)
        model = load_checkpoint(args.checkpoint)
        if model.config.vocab_size != K.get_task(K.DYCK3).vocab_size:
            raise UsageError("depth probe needs a checkpoint trained on dyck3")
        seed = args.seed if args.seed is not None else 0
        count = args.count if args.count is not None else 100
        samples = [K.gen_dyck3(opts["max_depth"], opts["len"], s)
                   for s in range(seed, seed + count)]
        report = D.depth_probe(model, samples, opts["max_depth"])
        out = os.path.join(args.out, "depth_probe.csv")
        _atomic(out, lambda p: D.write_depth_probe_csv(p, report))
        counts = " ".join(f"d{d}={report.counts[d]}" for d in report.depths)
        print(f"bucket counts: {counts}")
        if report.absent:
            print(f"absent depths: {report.absent}")
        print(f"wrote {out}")
        return EXIT_OK
    # resonance
    if not args.snapshots:
        raise MissingInputError("resonance report requires --snapshots (basis trajectory CSV)")
    if args.distance is None:
        raise MissingInputError("resonance report requires --distance")
    snaps = _read_snapshots(args.snapshots)
    history = TR.RunHistory(losses=np.zeros(0),
                            snapshots=[(s, [b]) for s, b in snaps],
                            final_loss=float("nan"), final_accuracy=float("nan"))
    traj = D.resonance_audit(history, args.distance)
    out = os.path.join(args.out, "resonance.csv")
    _atomic(out, lambda p: D.write_resonance_csv(p, traj))
    print(f"best cos(omega*N): initial={float(traj.best[0])!r} "
          f"final={float(traj.best[-1])!r}")
    print(f"wrote {out}")
    return EXIT_OK


def _read_snapshots(path: str):
    if not os.path.exists(path):
        raise MissingInputError(f"snapshot file {path} does not exist")
    try:
        snaps = TR.read_snapshot_csv(path)
    except ValueError as exc:
        raise FormatError(str(exc))
    if not snaps:
        raise FormatError(f"{path} contains no snapshots")
    return snaps


# ---------------------------------------------------------------------------
# parser


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-depth", dest="max_depth", type=int, default=None,
                   help="dyck3 nesting bound (default 12)")
    p.add_argument("--len", dest="len", type=int, default=None,
                   help="dyck3 string length (default 64)")
    p.add_argument("--motif-len", dest="motif_len", type=int, default=None,
                   help="bio motif length (default 8)")
    p.add_argument("--noise-len", dest="noise_len", type=int, default=None,
                   help="pin the bio noise length instead of sampling 100..200")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    p.add_argument("--num-heads", dest="num_heads", type=int, default=None)
    p.add_argument("--num-layers", dest="num_layers", type=int, default=None)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=None)
    p.add_argument("--rope-base", dest="rope_base", type=float, default=None)
    p.add_argument("--untied-phase", dest="untied_phase", action="store_true",
                   default=None, help="independent q/k phase vectors")
    p.add_argument("--freeze-basis", dest="freeze_basis", action="store_true",
                   default=None, help="spectral engine with all basis flags off")
    p.add_argument("--phase-init", dest="phase_init", choices=["training", "surgical"],
                   default=None, help="phase noise at init vs exact zeros")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=None, help="training steps (default 400)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-3)")
    p.add_argument("--basis-lr", dest="basis_lr", type=float, default=None,
                   help="learning rate for basis parameters (default 1e-3)")
    p.add_argument("--snapshot-every", dest="snapshot_every", type=int, default=None)
    p.add_argument("--eval-batches", dest="eval_batches", type=int, default=None)
    p.add_argument("--config", default=None, help="key = value config file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="srpl",
        description="Learnable-spectrum rotary position embedding lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate task samples to a TSV file")
    g.add_argument("task", help="dyck3 | bio | mod7")
    g.add_argument("--count", type=int, default=None, help="samples to emit (default 100)")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    _add_task_flags(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model, write checkpoint and history")
    t.add_argument("--task", required=True)
    t.add_argument("--engine", choices=["standard", "spectral"], default="standard")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, help="output directory")
    _add_train_flags(t)
    _add_model_flags(t)
    _add_task_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on fresh samples")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)
    _add_task_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("swap", help="standard checkpoint -> spectral, exact outputs")
    s.add_argument("--in", dest="in", required=True, metavar="CHECKPOINT")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="probe batch seed")
    s.set_defaults(func=cmd_swap)

    c = sub.add_parser("compare", help="standard-vs-spectral matrix over tasks and seeds")
    c.add_argument("--task", default="all", help="task name or 'all'")
    c.add_argument("--seeds", default="0", help="comma-separated seed list")
    c.add_argument("--out", required=True, help="output directory")
    _add_train_flags(c)
    _add_model_flags(c)
    _add_task_flags(c)
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("diagnose", help="phase drift, depth geometry, resonance reports")
    d.add_argument("--report", choices=["zigzag", "depth", "resonance"], required=True)
    d.add_argument("--snapshots", default=None, help="basis trajectory CSV")
    d.add_argument("--checkpoint", default=None)
    d.add_argument("--distance", type=int, default=None, help="dependency distance N")
    d.add_argument("--count", type=int, default=None, help="depth probe sample count")
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--out", required=True, help="output directory")
    _add_task_flags(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (CheckpointError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
