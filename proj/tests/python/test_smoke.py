"""Smoke tests for the python bindings: numpy round trips, kernel equivalence
against straightforward numpy math, recurrent decoding, and a tiny training
run."""

import json
import math

import numpy as np
import pytest

import linattn


def rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


def test_decay_rate_values():
    assert linattn.decay_rate(8, 24, 4, 24) == 1.0
    assert linattn.decay_rate(8, 24, 4, 12) == pytest.approx(math.exp(-2.0))
    assert linattn.decay_rate(8, 24, 8, 12) == pytest.approx(math.exp(-4.0))
    no_temp = linattn.decay_rate(8, 24, 4, 12, use_temperature=False)
    assert no_temp == pytest.approx(math.exp(-4.0))


def test_decay_mask_structure():
    m = linattn.decay_mask(5, 0.5)
    assert m.shape == (5, 5)
    assert np.allclose(np.diag(m), 1.0)
    assert np.all(m[np.triu_indices(5, k=1)] == 0.0)
    assert m[3, 1] == pytest.approx(0.25)


def test_lightning_matches_numpy_reference():
    n, d = 33, 8
    q, k, v = rand((n, d), 1), rand((n, d), 2), rand((n, d), 3)
    lam = 0.9
    mask = linattn.decay_mask(n, lam)
    want = (q @ k.T * mask) @ v
    got = linattn.attention_lightning(q, k, v, lam, tile_rows=8, tile_cols=8)
    ref = linattn.attention_reference(q, k, v, lam)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-10)
    assert np.allclose(ref, want, rtol=1e-12, atol=1e-12)


def test_lightning_grads_match_numpy_formulas():
    n, d = 9, 4
    q, k, v = rand((n, d), 4), rand((n, d), 5), rand((n, d), 6)
    g = rand((n, d), 7)
    lam = 0.8
    mask = linattn.decay_mask(n, lam)
    a = (q @ k.T) * mask
    da = (g @ v.T) * mask
    dq, dk, dv = linattn.attention_lightning_grads(
        q, k, v, g, lam, tile_rows=3, tile_cols=3
    )
    assert np.allclose(dv, a.T @ g, rtol=1e-10, atol=1e-12)
    assert np.allclose(dq, da @ k, rtol=1e-10, atol=1e-12)
    assert np.allclose(dk, da.T @ q, rtol=1e-10, atol=1e-12)


def test_right_product_is_unmasked_attention():
    n, d = 16, 4
    q, k, v = rand((n, d), 8), rand((n, d), 9), rand((n, d), 10)
    assert np.allclose(linattn.right_product(q, k, v), q @ (k.T @ v))


def test_lrpe_preserves_norms_and_relative_positions():
    x = rand((6, 8), 11)
    theta = np.linspace(0.1, 1.0, 4)
    y = linattn.apply_lrpe(x, theta, position_offset=3)
    assert np.allclose(
        np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1)
    )
    # inner products depend only on the position difference
    q, k = rand((1, 2), 12), rand((1, 2), 13)
    th = np.array([0.7])
    dots = {}
    for s, t in [(2, 0), (5, 3), (7, 5)]:
        qs = linattn.apply_lrpe(q, th, position_offset=s)
        kt = linattn.apply_lrpe(k, th, position_offset=t)
        dots[(s, t)] = (qs @ kt.T).item()
    vals = list(dots.values())
    assert vals[0] == pytest.approx(vals[1], abs=1e-12)
    assert vals[1] == pytest.approx(vals[2], abs=1e-12)


def test_srmsnorm_property():
    x = rand((5, 16), 14)
    y = linattn.srmsnorm(x)
    assert np.allclose(np.linalg.norm(y, axis=1), math.sqrt(16.0))


def test_sglu_matches_numpy():
    x, wv, wu, wo = rand((4, 6), 15), rand((6, 10), 16), rand((6, 10), 17), rand((10, 6), 18)
    assert np.allclose(linattn.sglu(x, wv, wu, wo), ((x @ wv) * (x @ wu)) @ wo)


def test_recurrent_head_reproduces_parallel_rows():
    n, hd, lam = 20, 4, 0.9
    q, k, v = rand((n, hd), 19), rand((n, hd), 20), rand((n, hd), 21)
    mask = linattn.decay_mask(n, lam)
    want = (q @ k.T * mask) @ v
    head = linattn.RecurrentHead(hd, lam, algo="robust")
    for t in range(n):
        o = head.step(q[t], k[t], v[t])
        assert np.allclose(o, want[t], rtol=1e-10, atol=1e-12)
    assert head.position == n
    assert head.first_nonfinite is None
    assert head.kv.shape == (hd, hd)


def test_origin_head_overflows_where_robust_does_not():
    rng = np.random.default_rng(22)
    origin = linattn.RecurrentHead(4, 0.5, algo="origin")
    robust = linattn.RecurrentHead(4, 0.5, algo="robust")
    for _ in range(1200):
        q = rng.standard_normal(4)
        k = rng.standard_normal(4)
        k /= np.linalg.norm(k)
        v = rng.standard_normal(4)
        origin.step(q, k, v)
        robust.step(q, k, v)
    assert origin.first_nonfinite is not None  # double precision: near t=1024
    assert robust.first_nonfinite is None


def test_lm_model_trains_and_decodes(tmp_path):
    config = {
        "layers": 2,
        "dim": 32,
        "heads": 2,
        "vocab": 257,
        "seed": 3,
        "train": {"lr": 3e-3, "warmup_steps": 5, "total_steps": 40,
                  "batch": 2, "seq_len": 32},
    }
    model = linattn.LmModel.from_config(json.dumps(config))
    assert model.num_params > 0
    losses = model.train_on("jived fox nymph grabs quick waltz. " * 8, 40)
    assert losses[-1] < 0.6 * losses[0]

    echoed = model.decode("jived", steps=0)
    assert echoed == "jived"
    generated = model.decode("jived", steps=12)
    assert generated.startswith("jived")
    assert len(generated) == len("jived") + 12

    path = tmp_path / "model.bin"
    model.save(str(path))
    back = linattn.LmModel.load(str(path))
    assert back.decode("jived", steps=12) == generated
    assert json.loads(back.config_json())["dim"] == 32
