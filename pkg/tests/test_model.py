import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from srpl import model as M
from srpl import tensor as T
from srpl.spectral_rope import RotationEngineKind, geometric_init
from srpl.tensor import Tensor

from test_spectral_rope import complex_score_reference
from test_tensor import rel_err

SMALL = dict(vocab_size=11, hidden_dim=16, num_heads=2, num_layers=2, max_seq_len=64)


def small_config(**kw):
    args = dict(SMALL)
    args.update(kw)
    return M.ModelConfig(**args)


def batch_loss(model, tokens, targets):
    logits = M.forward_batch(model, tokens)
    b, s, v = logits.shape
    return T.cross_entropy(T.reshape(logits, (b * s, v)), targets.reshape(-1),
                           ignore_index=-1)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=10, hidden_dim=30, num_heads=4)  # not divisible
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=10, hidden_dim=12, num_heads=4)  # head_dim odd
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=0)
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=10, phase_init="sideways")


def test_build_same_seed_bit_identical():
    a = M.build_model(small_config(), seed=7)
    b = M.build_model(small_config(), seed=7)
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        assert_array_equal(ta.data, tb.data)
    tokens = np.arange(10) % 11
    assert_array_equal(M.forward(a, tokens).data, M.forward(b, tokens).data)


def test_build_different_seeds_differ():
    a = M.build_model(small_config(), seed=7)
    b = M.build_model(small_config(), seed=8)
    tokens = np.arange(10) % 11
    assert not np.array_equal(M.forward(a, tokens).data, M.forward(b, tokens).data)


def test_engine_parity_shares_nonbasis_weights():
    std = M.build_model(small_config(engine=RotationEngineKind.STANDARD), seed=3)
    spec = M.build_model(small_config(engine=RotationEngineKind.SPECTRAL,
                                      phase_init="training"), seed=3)
    assert_array_equal(std.embedding.data, spec.embedding.data)
    for ls, lp in zip(std.layers, spec.layers):
        assert_array_equal(ls.wq.data, lp.wq.data)
        assert_array_equal(ls.w_down.data, lp.w_down.data)
        assert_array_equal(ls.basis.omega.data, lp.basis.omega.data)
    assert not np.array_equal(std.layers[0].basis.phase_q.data,
                              spec.layers[0].basis.phase_q.data)


def test_engine_parity_surgical_phase_identical_logits():
    std = M.build_model(small_config(engine=RotationEngineKind.STANDARD), seed=3)
    spec = M.build_model(small_config(engine=RotationEngineKind.SPECTRAL,
                                      phase_init="surgical"), seed=3)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 11, size=(4, 20))
    delta = np.abs(M.forward_batch(std, tokens).data - M.forward_batch(spec, tokens).data)
    assert delta.max() == 0.0


def test_parameter_count_matches_shape_arithmetic():
    v, h = 11, 16
    cfg = small_config(engine=RotationEngineKind.SPECTRAL)
    model = M.build_model(cfg, seed=1)
    per_layer = h + 4 * h * h + h + h * 4 * h + 4 * h * h + 3 * (cfg.head_dim // 2)
    want = v * h + 2 * per_layer + h + h * v
    assert sum(t.size for _, t in model.parameters()) == want
    std = M.build_model(small_config(), seed=1)
    want_std = want - 2 * 3 * (cfg.head_dim // 2)
    assert sum(t.size for _, t in std.parameters()) == want_std


def test_frozen_basis_excluded_from_parameters():
    frozen = M.build_model(small_config(engine=RotationEngineKind.SPECTRAL,
                                        freeze_basis=True), seed=1)
    std = M.build_model(small_config(), seed=1)
    assert [n for n, _ in frozen.parameters()] == [n for n, _ in std.parameters()]


def test_untied_phase_parameter_names():
    cfg = small_config(engine=RotationEngineKind.SPECTRAL, untied_phase=True)
    names = [n for n, _ in M.build_model(cfg, seed=1).parameters()]
    assert "layer0.rope.phase_q" in names and "layer0.rope.phase_k" in names


def test_forward_causality_under_suffix_perturbation():
    model = M.build_model(small_config(), seed=11)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 11, size=24)
    base = M.forward(model, tokens).data
    for t in (5, 12, 23):
        mutated = tokens.copy()
        mutated[t] = (mutated[t] + 3) % 11
        out = M.forward(model, mutated).data
        assert np.abs(out[:t] - base[:t]).max() <= 1e-12


def test_forward_length_one():
    model = M.build_model(small_config(), seed=2)
    out = M.forward(model, np.array([4]))
    assert out.shape == (1, 11)
    assert np.isfinite(out.data).all()


def test_forward_input_errors():
    model = M.build_model(small_config(), seed=2)
    with pytest.raises(ValueError):
        M.forward(model, np.arange(65) % 11)  # beyond max_seq_len
    with pytest.raises(ValueError):
        M.forward(model, np.array([0, 11]))  # out of vocab
    with pytest.raises(ValueError):
        M.forward(model, np.array([0, -1]))


def test_forward_regression_snapshot():
    model = M.build_model(small_config(), seed=11)
    out1 = M.forward(model, np.arange(12) % 11).data
    out2 = M.forward(M.build_model(small_config(), seed=11), np.arange(12) % 11).data
    assert_array_equal(out1, out2)


def test_attention_layer_single_position_returns_v():
    basis = geometric_init(8)
    rng = np.random.default_rng(3)
    q = Tensor(rng.uniform(-1, 1, size=(2, 1, 8)))
    k = Tensor(rng.uniform(-1, 1, size=(2, 1, 8)))
    v = Tensor(rng.uniform(-1, 1, size=(2, 1, 8)))
    out = M.attention_layer(q, k, v, basis)
    assert_allclose(out.data, v.data, atol=1e-15)


def test_attention_layer_zero_scores_average_prefix():
    basis = geometric_init(8)
    seq = 5
    v = np.random.default_rng(4).uniform(-1, 1, size=(1, seq, 8))
    out = M.attention_layer(Tensor(np.zeros((1, seq, 8))), Tensor(np.zeros((1, seq, 8))),
                            Tensor(v.copy()), basis)
    for t in range(seq):
        assert_allclose(out.data[0, t], v[0, :t + 1].mean(axis=0), atol=1e-12)


def test_attention_scores_match_per_pair_oracle():
    rng = np.random.default_rng(5)
    heads, seq, hd = 2, 7, 8
    basis = geometric_init(hd, mode="training", rng=np.random.default_rng(8))
    q0 = rng.uniform(-1, 1, size=(heads, seq, hd))
    k0 = rng.uniform(-1, 1, size=(heads, seq, hd))
    v0 = rng.uniform(-1, 1, size=(heads, seq, hd))
    got = M.attention_layer(Tensor(q0.copy()), Tensor(k0.copy()), Tensor(v0.copy()),
                            basis).data

    omega = basis.omega.data
    amp = basis.amplitude.data
    pq, pk = basis.phase_q.data, basis.phase_k.data
    want = np.empty_like(v0)
    for h in range(heads):
        scores = np.full((seq, seq), -np.inf)
        for m in range(seq):
            for n in range(m + 1):
                scores[m, n] = complex_score_reference(
                    q0[h, m], k0[h, n], m, n, omega, amp, pq, pk) / math.sqrt(hd)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        probs = e / e.sum(axis=-1, keepdims=True)
        want[h] = probs @ v0[h]
    assert np.abs(got - want).max() <= 1e-10


def test_attention_layer_shape_errors():
    basis = geometric_init(8)
    with pytest.raises(T.ShapeError):
        M.attention_layer(Tensor(np.zeros((2, 3, 8))), Tensor(np.zeros((2, 4, 8))),
                          Tensor(np.zeros((2, 3, 8))), basis)
    with pytest.raises(T.ShapeError):
        M.attention_layer(Tensor(np.zeros((2, 3, 6))), Tensor(np.zeros((2, 3, 6))),
                          Tensor(np.zeros((2, 3, 6))), basis)


def test_surgical_swap_exact_equality():
    model = M.build_model(small_config(), seed=21)
    swapped = M.surgical_swap(model)
    assert swapped.config.engine is RotationEngineKind.SPECTRAL
    rng = np.random.default_rng(6)
    tokens = rng.integers(0, 11, size=(8, 24))
    delta = np.abs(M.forward_batch(model, tokens).data
                   - M.forward_batch(swapped, tokens).data)
    assert delta.max() == 0.0


def test_surgical_swap_extracts_geometric_frequencies():
    cfg = small_config()
    swapped = M.surgical_swap(M.build_model(cfg, seed=21))
    want = geometric_init(cfg.hidden_dim // cfg.num_heads, cfg.rope_base).omega.data
    for layer in swapped.layers:
        assert_array_equal(layer.basis.omega.data, want)
        assert_array_equal(layer.basis.amplitude.data, np.ones(cfg.head_dim // 2))
        assert_array_equal(layer.basis.phase_q.data, np.zeros(cfg.head_dim // 2))
        assert layer.basis.trainable_omega and layer.basis.trainable_amplitude


def test_surgical_swap_rejects_spectral_model():
    spec = M.build_model(small_config(engine=RotationEngineKind.SPECTRAL), seed=1)
    with pytest.raises(M.StateError):
        M.surgical_swap(spec)


def test_surgical_swap_gradient_reaches_basis():
    model = M.surgical_swap(M.build_model(small_config(), seed=22))
    rng = np.random.default_rng(7)
    tokens = rng.integers(0, 11, size=(2, 16))
    targets = rng.integers(0, 11, size=(2, 16))
    with T.GradTape() as tape:
        loss = batch_loss(model, tokens, targets)
        tape.backward(loss)
    for layer in model.layers:
        assert layer.basis.omega.grad is not None
        assert np.abs(layer.basis.omega.grad).max() > 0.0
        assert np.abs(layer.basis.amplitude.grad).max() > 0.0


def model_fd_grad(model, tokens, targets, arr: np.ndarray, coords, h=1e-5):
    out = {}
    for idx in coords:
        keep = arr[idx]
        arr[idx] = keep + h
        up = batch_loss(model, tokens, targets).item()
        arr[idx] = keep - h
        down = batch_loss(model, tokens, targets).item()
        arr[idx] = keep
        out[idx] = (up - down) / (2.0 * h)
    return out


def test_end_to_end_basis_gradients_vs_fd():
    cfg = small_config(engine=RotationEngineKind.SPECTRAL, untied_phase=True,
                       phase_init="training")
    model = M.build_model(cfg, seed=33)
    rng = np.random.default_rng(8)
    tokens = rng.integers(0, 11, size=(2, 12))
    targets = rng.integers(0, 11, size=(2, 12))
    with T.GradTape() as tape:
        loss = batch_loss(model, tokens, targets)
        tape.backward(loss)
    checked = 0
    for layer in model.layers:
        for name, t in layer.basis.parameters():
            coords = [(i,) for i in range(t.size)]
            fd = model_fd_grad(model, tokens, targets, t.data, coords)
            for idx, val in fd.items():
                ad = t.grad[idx]
                denom = max(abs(ad), abs(val), 1e-6)
                assert abs(ad - val) / denom < 1e-3, (name, idx)
                checked += 1
    assert checked == 2 * 4 * (cfg.head_dim // 2)


def test_end_to_end_weight_gradients_vs_fd():
    model = M.build_model(small_config(), seed=34)
    rng = np.random.default_rng(9)
    tokens = rng.integers(0, 11, size=(2, 10))
    targets = rng.integers(0, 11, size=(2, 10))
    with T.GradTape() as tape:
        loss = batch_loss(model, tokens, targets)
        tape.backward(loss)
    for _, t in [model.parameters()[i] for i in (0, 2, 8, len(model.parameters()) - 1)]:
        flat_idx = rng.integers(0, t.size, size=3)
        coords = [np.unravel_index(i, t.data.shape) for i in flat_idx]
        fd = model_fd_grad(model, tokens, targets, t.data, coords)
        for idx, val in fd.items():
            ad = t.grad[idx]
            denom = max(abs(ad), abs(val), 1e-6)
            assert abs(ad - val) / denom < 1e-3


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = small_config(engine=RotationEngineKind.SPECTRAL, phase_init="training")
    model = M.build_model(cfg, seed=41)
    path = str(tmp_path / "model.srpl")
    M.save_checkpoint(model, path)
    loaded = M.load_checkpoint(path)
    assert loaded.config == model.config
    for (na, ta), (nb, tb) in zip(model.parameters(), loaded.parameters()):
        assert na == nb
        assert_array_equal(ta.data, tb.data)
    assert loaded.layers[0].basis.tied == model.layers[0].basis.tied
    tokens = np.random.default_rng(10).integers(0, 11, size=(3, 9))
    assert_array_equal(M.forward_batch(model, tokens).data,
                       M.forward_batch(loaded, tokens).data)


def test_checkpoint_untied_stays_untied(tmp_path):
    cfg = small_config(engine=RotationEngineKind.SPECTRAL, untied_phase=True,
                       phase_init="training")
    model = M.build_model(cfg, seed=42)
    path = str(tmp_path / "u.srpl")
    M.save_checkpoint(model, path)
    assert not M.load_checkpoint(path).layers[0].basis.tied


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.srpl"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(str(path))


def test_checkpoint_truncation(tmp_path):
    model = M.build_model(small_config(), seed=1)
    path = tmp_path / "t.srpl"
    M.save_checkpoint(model, str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(str(path))


def test_checkpoint_trailing_garbage(tmp_path):
    model = M.build_model(small_config(), seed=1)
    path = tmp_path / "g.srpl"
    M.save_checkpoint(model, str(path))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(str(path))


def test_checkpoint_unsupported_version(tmp_path):
    model = M.build_model(small_config(), seed=1)
    path = tmp_path / "v.srpl"
    M.save_checkpoint(model, str(path))
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(str(path))


def test_checkpoint_missing_file():
    with pytest.raises(FileNotFoundError):
        M.load_checkpoint("/nonexistent/model.srpl")
