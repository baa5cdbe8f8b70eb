import math

import numpy as np
import pytest

from treepl import dsnn
from treepl.dsnn import (
    DualStreamNet,
    NetworkConfig,
    adam_step,
    cosine_lr,
    forward,
    init_model,
    load_model,
    loss_and_gradients,
    predict_proba,
    save_model,
    train,
)
from treepl.errors import FormatError, ValidationError

from oracles import batch, finite_difference_check, perturb

TINY = NetworkConfig(hsi_dims=(3, 4, 2), als_dims=(2, 3, 2), decoder_dims=(4, 3, 2), dropout=0.0)
SMALL = NetworkConfig(hsi_dims=(5, 6, 4), als_dims=(3, 4, 3), decoder_dims=(7, 5, 3), dropout=0.2)


def test_config_checks():
    with pytest.raises(ValidationError, match="decoder input"):
        NetworkConfig((3, 4), (2, 3), (6, 2))
    with pytest.raises(ValidationError):
        NetworkConfig((3, 4), (2, 3), (7, 2), dropout=1.0)
    cfg = NetworkConfig.for_data(430, 24, 18)
    assert cfg.hsi_dims == (430, 256, 128, 64) and cfg.als_dims == (24, 128, 128, 64)
    assert cfg.decoder_dims == (128, 128, 18)
    assert (cfg.dropout, cfg.batch_size, cfg.epochs, cfg.lr, cfg.weight_decay) == (0.2, 512, 300, 1e-4, 1e-4)


def test_init_deterministic_and_structured():
    a, b = init_model(SMALL, seed=4), init_model(SMALL, seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert np.all(a.params["hsi.0.gamma"] == 1) and np.all(a.params["hsi.0.beta"] == 0)
    assert np.all(a.buffers["dec.0.running_var"] == 1) and np.all(a.params["dec.1.b"] == 0)
    # final layers of each stream are plain linear
    assert "hsi.1.gamma" not in a.params and "dec.1.gamma" not in a.params


def test_he_init_std():
    cfg = NetworkConfig((256, 64, 8), (4, 8), (16, 2))
    w = init_model(cfg, seed=0).params["hsi.0.W"]
    assert w.size >= 10**4
    assert abs(w.std() / math.sqrt(2 / 256) - 1) < 0.1


def test_zero_net_uniform_output():
    m = init_model(TINY)
    for k in m.params:
        if k.endswith((".W", ".b")):
            m.params[k][:] = 0
    x = batch(np.random.default_rng(0), TINY, 5)
    assert np.all(forward(m, x[0], x[1]) == 0)
    assert np.allclose(predict_proba(m, x[0][:1], x[1][:1]), 0.5)


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(1)
    m = init_model(SMALL, seed=1)
    x = batch(rng, SMALL, 64)
    _, cache = forward(m, x[0] * 5 + 3, x[1], train=True, rng=rng)
    blocks = [e for e in cache if e[1] == "block"]
    assert blocks
    for _, _, (h, xhat, inv_std, bn, mask) in blocks:
        assert np.abs(xhat.mean(axis=0)).max() < 1e-5
        assert np.abs(xhat.var(axis=0) - 1).max() < 1e-4 * 10  # eps=1e-5 shrinks var slightly


def _reference_forward(m, xh, xa):
    """Straight-line eval-mode arithmetic for the TINY layout."""
    p, b = m.params, m.buffers

    def block(x, key):
        a = x @ p[key + ".W"] + p[key + ".b"]
        a = (a - b[key + ".running_mean"]) / np.sqrt(b[key + ".running_var"] + 1e-5)
        a = p[key + ".gamma"] * a + p[key + ".beta"]
        return 0.5 * a * (1 + np.tanh(math.sqrt(2 / math.pi) * (a + 0.044715 * a ** 3)))

    zh = block(xh, "hsi.0") @ p["hsi.1.W"] + p["hsi.1.b"]
    za = block(xa, "als.0") @ p["als.1.W"] + p["als.1.b"]
    z = np.concatenate([zh, za], axis=1)
    return block(z, "dec.0") @ p["dec.1.W"] + p["dec.1.b"]


def test_forward_matches_reference():
    rng = np.random.default_rng(2)
    m = perturb(init_model(TINY, seed=2, dtype=np.float64), rng)
    for k in m.buffers:
        m.buffers[k] = rng.uniform(0.5, 1.5, m.buffers[k].shape)
    xh, xa, _ = batch(rng, TINY, 7)
    assert np.allclose(forward(m, xh, xa), _reference_forward(m, xh, xa), rtol=1e-12, atol=1e-12)


def test_forward_input_errors():
    m = init_model(TINY)
    with pytest.raises(ValidationError, match="empty"):
        forward(m, np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        forward(m, np.zeros((2, 4)), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        loss_and_gradients(m, np.zeros((2, 3)), np.zeros((2, 2)), [0, 2])


def test_uniform_logits_loss():
    m = init_model(TINY)
    m.params["dec.1.W"][:] = 0
    x = batch(np.random.default_rng(0), TINY, 6)
    loss, _ = loss_and_gradients(m, *x)
    assert loss == pytest.approx(math.log(2))


@pytest.mark.parametrize("cfg", [TINY, SMALL])
def test_gradients_match_finite_differences(cfg):
    n_params, worst = finite_difference_check(cfg)
    assert n_params <= 300
    assert max(worst.values()) < 1e-4, worst


def test_duplicate_samples_symmetric():
    rng = np.random.default_rng(5)
    m = perturb(init_model(TINY, seed=5, dtype=np.float64), rng)
    xh, xa, y = batch(rng, TINY, 4)
    xh[3], xa[3], y[3] = xh[1], xa[1], y[1]
    logits, _ = forward(m, xh, xa, train=True, rng=np.random.default_rng(0))
    assert np.array_equal(logits[1], logits[3])
    _, g1 = loss_and_gradients(m, xh, xa, y)
    perm = [0, 3, 2, 1]
    _, g2 = loss_and_gradients(m, xh[perm], xa[perm], y[perm])
    assert all(np.allclose(g1[k], g2[k], atol=1e-14) for k in g1)


def _scalar_model(value=0.0):
    p = {"x.W": np.array([value]), "x.b": np.array([value])}
    z = lambda: {k: np.zeros_like(v) for k, v in p.items()}
    return DualStreamNet(TINY, p, {}, z(), z())


def test_adam_zero_gradient_no_decay():
    m = _scalar_model(0.7)
    adam_step(m, {"x.W": np.zeros(1), "x.b": np.zeros(1)}, 0.1, weight_decay=0.0)
    assert m.params["x.W"][0] == 0.7 and m.params["x.b"][0] == 0.7


def test_adam_first_step_hand_trace():
    m = _scalar_model(0.0)
    adam_step(m, {"x.W": np.ones(1), "x.b": np.ones(1)}, 0.1, weight_decay=0.0)
    # m = 0.1, v = 0.001; bias corrected both are 1, step = lr / (1 + eps)
    assert m.params["x.W"][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    adam_step(m, {"x.W": np.ones(1), "x.b": np.ones(1)}, 0.1, weight_decay=0.0)
    m1 = 0.9 * 0.1 + 0.1
    v1 = 0.999 * 0.001 + 0.001
    step2 = 0.1 * (m1 / (1 - 0.81)) / (math.sqrt(v1 / (1 - 0.999 ** 2)) + 1e-8)
    assert m.params["x.W"][0] == pytest.approx(-0.1 / (1 + 1e-8) - step2, rel=1e-12)


def test_weight_decay_only_on_weights():
    m = _scalar_model(2.0)
    adam_step(m, {"x.W": np.zeros(1), "x.b": np.zeros(1)}, 0.1, weight_decay=0.5)
    assert 0 < m.params["x.W"][0] < 2.0 and m.params["x.b"][0] == 2.0


def test_cosine_schedule():
    assert cosine_lr(0, 1e-4, 300) == 1e-4
    assert cosine_lr(150, 1e-4, 300) == pytest.approx(0.5e-4)
    assert cosine_lr(225, 1e-4, 300) == pytest.approx(0.5e-4 * (1 + math.cos(0.75 * math.pi)), abs=1e-12)
    assert abs(cosine_lr(225, 1e-4, 300) - 1.4645e-5) < 1e-9
    assert cosine_lr(299, 1e-4, 300) < 1e-8


def _toy(rng, n=200):
    y = rng.integers(0, 2, n)
    xh = rng.normal(size=(n, 4)) + 2.5 * (2 * y[:, None] - 1)
    xa = rng.normal(size=(n, 2))
    return xh, xa, y


def test_train_separable_toy():
    rng = np.random.default_rng(0)
    cfg = NetworkConfig((4, 16, 8), (2, 8, 4), (12, 8, 2), batch_size=32, epochs=50, lr=1e-3)
    m = init_model(cfg)
    hist = train(m, _toy(rng), _toy(rng, 100), cfg)
    assert len(hist) == 50 and hist[-1]["val_macro_f1"] >= 0.95
    assert {"epoch", "lr", "train_loss", "val_loss", "val_macro_f1"} <= set(hist[0])
    assert m.mode == "eval"


def test_train_deterministic():
    rng = np.random.default_rng(1)
    data = _toy(rng, 150)
    cfg = NetworkConfig((4, 8, 4), (2, 4, 4), (8, 4, 2), batch_size=40, epochs=5, lr=1e-3, seed=3)
    runs = []
    for _ in range(2):
        m = init_model(cfg)
        runs.append((train(m, data, data, cfg), m))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1].params[k], runs[1][1].params[k]) for k in runs[0][1].params)


def test_train_rejects_empty():
    with pytest.raises(ValidationError):
        train(init_model(TINY), (np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0, int)))


def test_running_stats_track_distribution():
    rng = np.random.default_rng(4)
    n = 2048
    xh = rng.normal(1.5, 2.0, (n, 4))
    xa = rng.normal(-1.0, 0.5, (n, 2))
    y = (xh[:, 0] > 1.5).astype(int)
    cfg = NetworkConfig((4, 8, 4), (2, 4, 4), (8, 4, 2), batch_size=256, epochs=20, lr=1e-3, dropout=0.0)
    m = init_model(cfg)
    train(m, (xh, xa, y), None, cfg)
    a = xh.astype(np.float32) @ m.params["hsi.0.W"] + m.params["hsi.0.b"]
    se_mean = a.std(axis=0) / math.sqrt(cfg.batch_size)
    assert np.all(np.abs(m.buffers["hsi.0.running_mean"] - a.mean(axis=0)) < 3 * se_mean)
    se_var = a.var(axis=0) * math.sqrt(2 / (cfg.batch_size - 1))
    assert np.all(np.abs(m.buffers["hsi.0.running_var"] - a.var(axis=0, ddof=1)) < 3 * se_var)


def test_predict_batch_independence():
    rng = np.random.default_rng(6)
    m = perturb(init_model(SMALL, seed=6), rng)
    for k in m.buffers:
        m.buffers[k] = rng.uniform(0.5, 1.5, m.buffers[k].shape).astype(np.float32)
    xh, xa, _ = batch(rng, SMALL, 1500)
    full = predict_proba(m, xh, xa)
    assert np.abs(full.sum(axis=1) - 1).max() < 1e-6
    for i in (0, 17, 1023, 1024, 1499):
        assert np.array_equal(predict_proba(m, xh[i : i + 1], xa[i : i + 1])[0], full[i])
    assert np.array_equal(predict_proba(m, xh, xa), full)


def test_label_permutation_symmetry():
    rng = np.random.default_rng(8)
    xh, xa = rng.normal(size=(120, 5)), rng.normal(size=(120, 3))
    y = rng.integers(0, 3, 120)
    perm = np.array([2, 0, 1])  # class c is renamed perm[c]
    cfg = SMALL.__class__(**{**SMALL.__dict__, "epochs": 4, "batch_size": 32, "lr": 1e-3})
    a = init_model(cfg, dtype=np.float64)
    b = init_model(cfg, dtype=np.float64)
    inv = np.argsort(perm)
    b.params["dec.1.W"] = a.params["dec.1.W"][:, inv].copy()
    b.params["dec.1.b"] = a.params["dec.1.b"][inv].copy()
    train(a, (xh, xa, y), None, cfg)
    train(b, (xh, xa, perm[y]), None, cfg)
    pa, pb = predict_proba(a, xh, xa), predict_proba(b, xh, xa)
    assert np.allclose(pb[:, perm], pa, atol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    m = init_model(SMALL, seed=9)
    train(m, batch(rng, SMALL, 50), None, SMALL.__class__(**{**SMALL.__dict__, "epochs": 2, "batch_size": 16}))
    save_model(m, tmp_path / "m.bin", {"note": 1})
    back, extra = load_model(tmp_path / "m.bin")
    assert extra == {"note": 1} and back.step == m.step and back.cfg == m.cfg and back.mode == "eval"
    for d in ("params", "buffers", "adam_m", "adam_v"):
        assert all(np.array_equal(getattr(back, d)[k], getattr(m, d)[k]) for k in getattr(m, d))
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == b"TPLDSNN1"
    (tmp_path / "bad.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"nope" * 10)
    with pytest.raises(FormatError):
        load_model(tmp_path / "junk.bin")


def test_gelu_grad_matches_numeric():
    x = np.linspace(-5, 5, 101)
    num = (dsnn.gelu(x + 1e-6) - dsnn.gelu(x - 1e-6)) / 2e-6
    assert np.allclose(dsnn.gelu_grad(x), num, atol=1e-8)
