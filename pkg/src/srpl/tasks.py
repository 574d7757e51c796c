"""Formal-language tasks: generators, tokenizers, and ground-truth oracles.

Three tasks, one symbol per token, shared conventions: vocab position 0 is
the PAD symbol (also the loss-mask sentinel in targets) and position 1 is
the SEP symbol. Targets are full-length vectors with PAD everywhere the
position does not count toward the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PAD = "_"
SEP = "|"

OPEN_BRACKETS = "([{"
CLOSE_BRACKETS = ")]}"
MATCHING = {"(": ")", "[": "]", "{": "}"}
DNA = "ACGT"
DNA_COMPLEMENT = str.maketrans("ACGT", "TGCA")

DYCK3 = "dyck3"
BIO_ROTATION = "bio_rotation"
MODULO7 = "modulo7"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    vocab: tuple[str, ...]
    seq_format: str
    loss_mask_rule: str

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def sep_id(self) -> int:
        return 1

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def tokenize(self, symbols) -> np.ndarray:
        table = {s: i for i, s in enumerate(self.vocab)}
        try:
            return np.array([table[s] for s in symbols], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in {self.name} vocabulary") from exc

    def detokenize(self, tokens) -> list[str]:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= len(self.vocab)):
            raise ValueError(f"token id out of range for {self.name} vocabulary")
        return [self.vocab[t] for t in tokens]


_SPECS = {
    DYCK3: TaskSpec(
        name=DYCK3,
        vocab=(PAD, SEP) + tuple("()[]{}"),
        seq_format="balanced bracket string; input s[:-1], target s[1:]",
        loss_mask_rule="every target position (next-token over the full string)"),
    BIO_ROTATION: TaskSpec(
        name=BIO_ROTATION,
        vocab=(PAD, SEP) + tuple(DNA),
        seq_format="motif + noise + SEP + reverse_complement(motif); next-token shift",
        loss_mask_rule="only positions emitting the reverse-complement region"),
    MODULO7: TaskSpec(
        name=MODULO7,
        vocab=(PAD, SEP) + tuple("0123456789") + tuple("()+%="),
        seq_format="( a + b + c ) % 7 = r rendered one symbol per token",
        loss_mask_rule="only the answer position"),
}

TASK_NAMES = tuple(_SPECS)


def get_task(name: str) -> TaskSpec:
    try:
        return _SPECS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {', '.join(_SPECS)}")


@dataclass
class TaskSample:
    input_tokens: np.ndarray
    target_tokens: np.ndarray
    seed: int
    metadata: dict = field(default_factory=dict)


def dyck_validate(s: str) -> tuple[bool, int]:
    """Pushdown acceptance plus the maximum stack depth reached."""
    stack = []
    max_depth = 0
    for ch in s:
        if ch in OPEN_BRACKETS:
            stack.append(ch)
            max_depth = max(max_depth, len(stack))
        elif ch in CLOSE_BRACKETS:
            if not stack or MATCHING[stack.pop()] != ch:
                return False, max_depth
        else:
            raise ValueError(f"symbol {ch!r} is not a bracket")
    return not stack, max_depth


def dyck_token_depths(s: str) -> list[int]:
    """Depth at each symbol: opens count the level they create, closes the
    level they close ("((()))" -> 1,2,3,3,2,1)."""
    depths = []
    depth = 0
    for ch in s:
        if ch in OPEN_BRACKETS:
            depth += 1
            depths.append(depth)
        elif ch in CLOSE_BRACKETS:
            depths.append(depth)
            depth -= 1
        else:
            raise ValueError(f"symbol {ch!r} is not a bracket")
    if depth != 0:
        raise ValueError("depth profile requested for an unbalanced string")
    return depths


def _dyck_string(max_depth: int, target_len: int, rng: np.random.Generator) -> str:
    if max_depth < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")
    if target_len < 2 or target_len % 2 != 0:
        raise ValueError(f"target_len must be even and >= 2, got {target_len}")
    if target_len < 2 * max_depth:
        raise ValueError(
            f"target_len {target_len} cannot reach depth {max_depth} (needs >= {2 * max_depth})")

    # random descent, open with probability 1/2 where legal; reflecting
    # boundaries at depth 0 and max_depth give expected depth near max_depth/2
    walk_len = target_len - 2 * max_depth
    chars = []
    stack = []
    zero_boundaries = [0]
    for i in range(walk_len):
        remaining = walk_len - i
        depth = len(stack)
        if depth == 0:
            descend = True
        elif remaining == depth or depth == max_depth:
            descend = False
        else:
            descend = rng.random() < 0.5
        if descend:
            t = int(rng.integers(3))
            stack.append(t)
            chars.append(OPEN_BRACKETS[t])
        else:
            chars.append(CLOSE_BRACKETS[stack.pop()])
        if not stack:
            zero_boundaries.append(i + 1)

    # guarantee one excursion to exactly max_depth: splice a full tower at
    # a uniformly chosen top-level boundary
    types = rng.integers(3, size=max_depth)
    tower = "".join(OPEN_BRACKETS[t] for t in types) \
        + "".join(CLOSE_BRACKETS[t] for t in reversed(types))
    cut = zero_boundaries[int(rng.integers(len(zero_boundaries)))]
    return "".join(chars[:cut]) + tower + "".join(chars[cut:])


def gen_dyck3(max_depth: int, target_len: int, seed: int) -> TaskSample:
    rng = np.random.default_rng(seed)
    s = _dyck_string(max_depth, target_len, rng)
    valid, reached = dyck_validate(s)
    if not valid or reached != max_depth or len(s) != target_len:
        raise AssertionError("dyck generator produced an invalid sample")
    spec = _SPECS[DYCK3]
    tokens = spec.tokenize(s)
    return TaskSample(input_tokens=tokens[:-1], target_tokens=tokens[1:], seed=seed,
                      metadata={"max_depth": max_depth, "length": target_len})


def reverse_complement(m: str) -> str:
    for ch in m:
        if ch not in DNA:
            raise ValueError(f"symbol {ch!r} is not a nucleotide")
    return m.translate(DNA_COMPLEMENT)[::-1]


def gen_bio_rotation(motif_len: int, noise_len: int, seed: int) -> TaskSample:
    if motif_len < 1:
        raise ValueError(f"motif_len must be >= 1, got {motif_len}")
    if not 100 <= noise_len <= 200:
        raise ValueError(f"noise_len must lie in [100, 200], got {noise_len}")
    rng = np.random.default_rng(seed)
    motif = "".join(DNA[t] for t in rng.integers(4, size=motif_len))
    noise = "".join(DNA[t] for t in rng.integers(4, size=noise_len))
    rc = reverse_complement(motif)
    spec = _SPECS[BIO_ROTATION]
    symbols = list(motif) + list(noise) + [SEP] + list(rc)
    tokens = spec.tokenize(symbols)
    inputs = tokens[:-1]
    targets = np.full(inputs.shape, spec.pad_id, dtype=np.int64)
    rc_start = motif_len + noise_len  # target index predicting the first rc symbol
    targets[rc_start:rc_start + motif_len] = tokens[rc_start + 1:rc_start + 1 + motif_len]
    if "".join(spec.detokenize(targets[rc_start:rc_start + motif_len])) != rc:
        raise AssertionError("bio generator target region mismatch")
    return TaskSample(input_tokens=inputs, target_tokens=targets, seed=seed,
                      metadata={"motif": motif, "noise_len": noise_len,
                                "distance": noise_len + 2})


def gen_modulo(seed: int) -> TaskSample:
    rng = np.random.default_rng(seed)
    a, b, c = (int(v) for v in rng.integers(0, 10, size=3))
    r = (a + b + c) % 7
    spec = _SPECS[MODULO7]
    symbols = ["(", str(a), "+", str(b), "+", str(c), ")", "%", "7", "=", str(r)]
    tokens = spec.tokenize(symbols)
    inputs = tokens[:-1]
    targets = np.full(inputs.shape, spec.pad_id, dtype=np.int64)
    targets[-1] = tokens[-1]
    return TaskSample(input_tokens=inputs, target_tokens=targets, seed=seed,
                      metadata={"a": a, "b": b, "c": c, "r": r})


def generate_sample(task: str, seed: int, *, dyck_max_depth: int = 12,
                    dyck_len: int = 64, motif_len: int = 8,
                    noise_len: Optional[int] = None) -> TaskSample:
    """Uniform entry point; bio noise length is drawn from the seed when
    not pinned (uniform over [100, 200], recorded in metadata)."""
    if task == DYCK3:
        return gen_dyck3(dyck_max_depth, dyck_len, seed)
    if task == BIO_ROTATION:
        if noise_len is None:
            noise_len = int(np.random.default_rng(
                np.random.SeedSequence([seed, 1])).integers(100, 201))
        return gen_bio_rotation(motif_len, noise_len, seed)
    if task == MODULO7:
        return gen_modulo(seed)
    raise ValueError(f"unknown task {task!r}")


def sample_batch(task: str, batch_size: int, rng: np.random.Generator,
                 **gen_params) -> tuple[np.ndarray, np.ndarray, list[TaskSample]]:
    """Fixed-shape batch; shorter samples are PAD-suffixed (targets stay
    masked there, and causal attention keeps pads out of content positions)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    spec = get_task(task)
    seeds = rng.integers(0, 2 ** 62, size=batch_size)
    samples = [generate_sample(task, int(s), **gen_params) for s in seeds]
    width = max(s.input_tokens.shape[0] for s in samples)
    inputs = np.full((batch_size, width), spec.pad_id, dtype=np.int64)
    targets = np.full((batch_size, width), spec.pad_id, dtype=np.int64)
    for i, s in enumerate(samples):
        n = s.input_tokens.shape[0]
        inputs[i, :n] = s.input_tokens
        targets[i, :n] = s.target_tokens
    return inputs, targets, samples


def dump_samples(samples: list[TaskSample], spec: TaskSpec, path: str) -> None:
    """One sample per line: input<TAB>target<TAB>key=value metadata,
    symbols space-separated."""
    lines = []
    for s in samples:
        meta = " ".join(f"{k}={v}" for k, v in s.metadata.items())
        lines.append("\t".join([" ".join(spec.detokenize(s.input_tokens)),
                                " ".join(spec.detokenize(s.target_tokens)), meta]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
