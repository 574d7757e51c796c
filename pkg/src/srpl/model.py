"""Toy decoder-only transformer with a pluggable Q/K rotation engine.

Two-layer pre-norm residual blocks: RMSNorm, multi-head causal attention
with per-layer spectral rotation of queries and keys, RMSNorm, 4x GELU
feed-forward. No biases, no weight tying. The fixed-rotation engine and
the learnable engine run the identical kernel; they differ only in which
basis vectors are marked trainable, which is what makes exact-equality
swap experiments possible.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .spectral_rope import (RotationEngineKind, SpectralBasis, geometric_init,
                            spectral_rotate)
from .tensor import Tensor

WEIGHT_INIT_STD = 0.02
MASK_VALUE = -1e30

CHECKPOINT_MAGIC = b"SRPL"
CHECKPOINT_VERSION = 1


class StateError(RuntimeError):
    """Operation not valid for the model's current engine state."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or inconsistent."""


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 128
    num_heads: int = 4
    num_layers: int = 2
    max_seq_len: int = 512
    rope_base: float = 10000.0
    engine: RotationEngineKind = RotationEngineKind.STANDARD
    untied_phase: bool = False
    # "training" adds N(0,1e-3) phase noise at build; "surgical" pins phases
    # to exactly zero so both engines start from the identical function.
    phase_init: str = "training"
    freeze_basis: bool = False

    def __post_init__(self):
        if self.vocab_size < 1 or self.hidden_dim < 1 or self.num_heads < 1 \
                or self.num_layers < 1 or self.max_seq_len < 1:
            raise ValueError("config dimensions must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim {self.head_dim} must be even for pair rotation")
        if self.rope_base <= 0:
            raise ValueError(f"rope_base must be positive, got {self.rope_base}")
        if self.phase_init not in ("training", "surgical"):
            raise ValueError(f"unknown phase_init {self.phase_init!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w_up: Tensor
    w_down: Tensor
    basis: SpectralBasis


@dataclass
class Model:
    config: ModelConfig
    embedding: Tensor
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm: Tensor = None
    w_out: Tensor = None

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable (name, tensor) pairs in a stable order."""
        out = [("embedding", self.embedding)]
        for i, layer in enumerate(self.layers):
            p = f"layer{i}."
            out.extend([(p + "attn_norm", layer.attn_norm), (p + "wq", layer.wq),
                        (p + "wk", layer.wk), (p + "wv", layer.wv),
                        (p + "wo", layer.wo), (p + "ffn_norm", layer.ffn_norm),
                        (p + "w_up", layer.w_up), (p + "w_down", layer.w_down)])
            out.extend((p + "rope." + name, t) for name, t in layer.basis.parameters())
        out.extend([("final_norm", self.final_norm), ("w_out", self.w_out)])
        return out


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministic initialization from seed.

    Dense weights and basis phase noise come from independent seed
    streams, so builds that differ only in engine kind share every
    non-basis weight bit for bit.
    """
    ss = np.random.SeedSequence([seed, 0])
    weight_rng = np.random.default_rng(ss)
    basis_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    h, v = config.hidden_dim, config.vocab_size

    def draw(shape, requires_grad=True):
        return Tensor(weight_rng.normal(0.0, WEIGHT_INIT_STD, size=shape),
                      requires_grad=requires_grad)

    embedding = draw((v, h))
    layers = []
    spectral = config.engine is RotationEngineKind.SPECTRAL
    trainable = spectral and not config.freeze_basis
    mode = config.phase_init if spectral else "surgical"
    if config.freeze_basis:
        mode = "surgical"
    for _ in range(config.num_layers):
        basis = geometric_init(config.head_dim, config.rope_base, mode=mode,
                               untied=config.untied_phase, trainable=trainable,
                               rng=basis_rng if mode == "training" else None)
        layers.append(LayerWeights(
            attn_norm=Tensor(np.ones(h), requires_grad=True),
            wq=draw((h, h)), wk=draw((h, h)), wv=draw((h, h)), wo=draw((h, h)),
            ffn_norm=Tensor(np.ones(h), requires_grad=True),
            w_up=draw((h, 4 * h)), w_down=draw((4 * h, h)),
            basis=basis))
    final_norm = Tensor(np.ones(h), requires_grad=True)
    w_out = draw((h, v))
    return Model(config=config, embedding=embedding, layers=layers,
                 final_norm=final_norm, w_out=w_out)


_mask_cache: dict[int, np.ndarray] = {}


def causal_mask(seq: int) -> np.ndarray:
    mask = _mask_cache.get(seq)
    if mask is None:
        mask = np.triu(np.full((seq, seq), MASK_VALUE), k=1)
        _mask_cache[seq] = mask
    return mask


def _attention(q: Tensor, k: Tensor, v: Tensor, basis: SpectralBasis,
               positions: np.ndarray) -> Tensor:
    """Causal attention over (..., seq, head_dim) with rotated q and k."""
    head_dim = q.shape[-1]
    seq = q.shape[-2]
    qr = spectral_rotate(q, positions, basis, "q")
    kr = spectral_rotate(k, positions, basis, "k")
    qr = T.scale(qr, 1.0 / math.sqrt(head_dim))
    axes = tuple(range(q.data.ndim - 2)) + (q.data.ndim - 1, q.data.ndim - 2)
    scores = T.matmul(qr, T.transpose(kr, axes))
    probs = T.softmax_rows(scores, bias=causal_mask(seq))
    return T.matmul(probs, v)


def attention_layer(q: Tensor, k: Tensor, v: Tensor, basis: SpectralBasis) -> Tensor:
    """Public single-sequence form: inputs are (heads, seq, head_dim)."""
    if q.data.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise T.ShapeError(
            f"attention_layer: q/k/v must share a (heads, seq, head_dim) shape, "
            f"got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != basis.dim:
        raise T.ShapeError(
            f"attention_layer: head_dim {q.shape[-1]} does not match basis dim {basis.dim}")
    return _attention(q, k, v, basis, np.arange(q.shape[-2]))


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, s, h = x.shape
    return T.transpose(T.reshape(x, (b, s, num_heads, h // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, s, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, heads * hd))


def forward_batch(model: Model, tokens: np.ndarray,
                  return_hidden: bool = False):
    """Logits (batch, seq, vocab) for integer tokens (batch, seq).

    With return_hidden, also returns the normalized final hidden states
    (batch, seq, hidden) that feed the output projection.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"forward_batch expects (batch, seq) tokens, got shape {tokens.shape}")
    cfg = model.config
    seq = tokens.shape[1]
    if seq < 1 or seq > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq} outside 1..{cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range for vocab {cfg.vocab_size}")

    positions = np.arange(seq)
    x = T.embedding(model.embedding, tokens)
    for layer in model.layers:
        xn = T.rms_norm(x, layer.attn_norm)
        q = _split_heads(T.matmul(xn, layer.wq), cfg.num_heads)
        k = _split_heads(T.matmul(xn, layer.wk), cfg.num_heads)
        v = _split_heads(T.matmul(xn, layer.wv), cfg.num_heads)
        attn = _merge_heads(_attention(q, k, v, layer.basis, positions))
        x = T.add(x, T.matmul(attn, layer.wo))
        xn = T.rms_norm(x, layer.ffn_norm)
        x = T.add(x, T.matmul(T.gelu(T.matmul(xn, layer.w_up)), layer.w_down))
    hidden = T.rms_norm(x, model.final_norm)
    logits = T.matmul(hidden, model.w_out)
    if return_hidden:
        return logits, hidden
    return logits


def forward(model: Model, tokens: np.ndarray) -> Tensor:
    """Causal logits (seq, vocab) for a single token vector."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError(f"forward expects a 1-D token vector, got shape {tokens.shape}")
    logits = forward_batch(model, tokens[None, :])
    return T.reshape(logits, (tokens.shape[0], model.config.vocab_size))


def surgical_swap(model: Model) -> Model:
    """Fixed-engine model -> learnable-engine model, exactly equal outputs.

    The frequency buffer is extracted from each layer as-is; amplitudes
    start at one and phases at exactly zero, all marked trainable. Every
    non-basis weight is shared by reference, so the swapped model's
    forward pass is the same float-for-float computation.
    """
    if model.config.engine is not RotationEngineKind.STANDARD:
        raise StateError("surgical_swap requires a model with the standard engine")
    cfg = model.config
    new_cfg = ModelConfig(vocab_size=cfg.vocab_size, hidden_dim=cfg.hidden_dim,
                          num_heads=cfg.num_heads, num_layers=cfg.num_layers,
                          max_seq_len=cfg.max_seq_len, rope_base=cfg.rope_base,
                          engine=RotationEngineKind.SPECTRAL,
                          untied_phase=cfg.untied_phase, phase_init="surgical")
    layers = []
    for layer in model.layers:
        n = layer.basis.n_pairs
        pq = Tensor(np.zeros(n))
        pk = pq if not cfg.untied_phase else Tensor(np.zeros(n))
        basis = SpectralBasis(Tensor(layer.basis.omega.data.copy()),
                              Tensor(np.ones(n)), pq, pk,
                              trainable_omega=True, trainable_amplitude=True,
                              trainable_phase=True)
        layers.append(LayerWeights(attn_norm=layer.attn_norm, wq=layer.wq,
                                   wk=layer.wk, wv=layer.wv, wo=layer.wo,
                                   ffn_norm=layer.ffn_norm, w_up=layer.w_up,
                                   w_down=layer.w_down, basis=basis))
    return Model(config=new_cfg, embedding=model.embedding, layers=layers,
                 final_norm=model.final_norm, w_out=model.w_out)


# ---------------------------------------------------------------------------
# checkpoint format: magic "SRPL", version u32, entry count u32, then per
# entry: name_len u32, UTF-8 name, rank u32, dims u32 each, f64 LE payload.
# Feature pairs are interleaved (2j, 2j+1); basis vectors live under
# layer{i}.rope.{omega,amplitude,phase_q,phase_k}.


def _config_entries(cfg: ModelConfig) -> list[tuple[str, np.ndarray]]:
    return [("config.vocab_size", np.float64(cfg.vocab_size)),
            ("config.hidden_dim", np.float64(cfg.hidden_dim)),
            ("config.num_heads", np.float64(cfg.num_heads)),
            ("config.num_layers", np.float64(cfg.num_layers)),
            ("config.max_seq_len", np.float64(cfg.max_seq_len)),
            ("config.rope_base", np.float64(cfg.rope_base)),
            ("config.engine", np.float64(cfg.engine is RotationEngineKind.SPECTRAL)),
            ("config.untied_phase", np.float64(cfg.untied_phase)),
            ("config.phase_init", np.float64(cfg.phase_init == "training")),
            ("config.freeze_basis", np.float64(cfg.freeze_basis))]


def _weight_entries(model: Model) -> list[tuple[str, np.ndarray]]:
    out = [("embedding", model.embedding.data)]
    for i, layer in enumerate(model.layers):
        p = f"layer{i}."
        out.extend([(p + "attn_norm", layer.attn_norm.data), (p + "wq", layer.wq.data),
                    (p + "wk", layer.wk.data), (p + "wv", layer.wv.data),
                    (p + "wo", layer.wo.data), (p + "ffn_norm", layer.ffn_norm.data),
                    (p + "w_up", layer.w_up.data), (p + "w_down", layer.w_down.data)])
        out.extend((p + "rope." + name, arr) for name, arr in layer.basis.named_arrays())
    out.extend([("final_norm", model.final_norm.data), ("w_out", model.w_out.data)])
    return out


def save_checkpoint(model: Model, path: str) -> None:
    entries = _config_entries(model.config) + _weight_entries(model)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint_entries(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    count = r.u32()
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise CheckpointError(f"{path}: implausible tensor rank {rank} for {name!r}")
        dims = tuple(r.u32() for _ in range(rank))
        n_elems = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n_elems)
        entries[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes after entries")
    return entries


def load_checkpoint(path: str) -> Model:
    entries = read_checkpoint_entries(path)

    def grab(name: str) -> np.ndarray:
        if name not in entries:
            raise CheckpointError(f"{path}: missing entry {name!r}")
        return entries[name]

    def scalar(name: str) -> float:
        arr = grab(name)
        if arr.ndim != 0:
            raise CheckpointError(f"{path}: {name!r} should be rank 0, got rank {arr.ndim}")
        return float(arr)

    cfg = ModelConfig(
        vocab_size=int(scalar("config.vocab_size")),
        hidden_dim=int(scalar("config.hidden_dim")),
        num_heads=int(scalar("config.num_heads")),
        num_layers=int(scalar("config.num_layers")),
        max_seq_len=int(scalar("config.max_seq_len")),
        rope_base=scalar("config.rope_base"),
        engine=RotationEngineKind.SPECTRAL if scalar("config.engine")
        else RotationEngineKind.STANDARD,
        untied_phase=bool(scalar("config.untied_phase")),
        phase_init="training" if scalar("config.phase_init") else "surgical",
        freeze_basis=bool(scalar("config.freeze_basis")))

    h, v = cfg.hidden_dim, cfg.vocab_size

    def weight(name: str, shape: tuple) -> Tensor:
        arr = grab(name)
        if arr.shape != shape:
            raise CheckpointError(f"{path}: {name!r} has shape {arr.shape}, expected {shape}")
        return Tensor(arr, requires_grad=True)

    trainable = cfg.engine is RotationEngineKind.SPECTRAL and not cfg.freeze_basis
    n_pairs = cfg.head_dim // 2
    layers = []
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        pq_arr = grab(p + "rope.phase_q")
        pk_arr = grab(p + "rope.phase_k")
        if pq_arr.shape != (n_pairs,) or pk_arr.shape != (n_pairs,):
            raise CheckpointError(f"{path}: basis vectors of layer {i} have wrong length")
        pq = Tensor(pq_arr)
        pk = pq if (not cfg.untied_phase and np.array_equal(pq_arr, pk_arr)) else Tensor(pk_arr)
        basis = SpectralBasis(weight(p + "rope.omega", (n_pairs,)),
                              weight(p + "rope.amplitude", (n_pairs,)), pq, pk,
                              trainable_omega=trainable, trainable_amplitude=trainable,
                              trainable_phase=trainable)
        layers.append(LayerWeights(
            attn_norm=weight(p + "attn_norm", (h,)), wq=weight(p + "wq", (h, h)),
            wk=weight(p + "wk", (h, h)), wv=weight(p + "wv", (h, h)),
            wo=weight(p + "wo", (h, h)), ffn_norm=weight(p + "ffn_norm", (h,)),
            w_up=weight(p + "w_up", (h, 4 * h)), w_down=weight(p + "w_down", (4 * h, h)),
            basis=basis))
    return Model(config=cfg, embedding=weight("embedding", (v, h)), layers=layers,
                 final_norm=weight("final_norm", (h,)), w_out=weight("w_out", (h, v)))
