import numpy as np
import pytest

from biwrist import contrastive as ct
from biwrist import model as mdl
from biwrist import tensor as tz
from biwrist import train as tr
from biwrist.errors import InvalidArgument, NumericalError
from biwrist.windowing import MASK, WindowSet


def t64(x):
    return tz.Tensor(np.asarray(x, dtype=np.float64))


# --- jitter -------------------------------------------------------------------

def test_jitter_sigma_zero_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((256, 12))
    np.testing.assert_array_equal(ct.jitter(x, 0.0, np.random.default_rng(1)), x)


def test_jitter_noise_std_in_band():
    rng = np.random.default_rng(2)
    x = np.zeros((256, 12))
    noise = ct.jitter(x, 0.05, rng) - x
    assert 0.045 <= noise.std() <= 0.055


def test_jitter_seeded():
    x = np.zeros((64, 12))
    a = ct.jitter(x, 0.05, np.random.default_rng(3))
    b = ct.jitter(x, 0.05, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


# --- time warp ----------------------------------------------------------------

def test_warp_unit_multipliers_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((256, 12))
    out = ct.time_warp(x, knots=4, sigma=0.0, rng=np.random.default_rng(5))
    assert np.abs(out - x).max() < 1e-9


def test_warp_pins_endpoints():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((256, 3))
    out = ct.time_warp(x, knots=4, sigma=0.3, rng=np.random.default_rng(7))
    assert np.abs(out[0] - x[0]).max() < 1e-9
    assert np.abs(out[-1] - x[-1]).max() < 1e-9
    assert out.shape == x.shape


def test_warp_positions_strictly_increasing():
    for seed in range(30):
        pos = ct.warp_positions(256, 4, 0.3, np.random.default_rng(seed))
        assert (np.diff(pos) > 0).all()
        assert pos[0] == 0.0 and pos[-1] == 255.0


# --- pair construction ----------------------------------------------------------

def test_make_batch_pairs_deterministic():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((6, 64, 12)).astype(np.float32)
    cfg = ct.AugmentConfig(seed=1)
    a1, p1, c1 = ct.make_batch_pairs(X, cfg, seed=3)
    a2, p2, c2 = ct.make_batch_pairs(X, cfg, seed=3)
    np.testing.assert_array_equal(p1, p2)
    assert c1 == c2
    assert a1 is X  # anchors are the clean windows


def test_make_batch_pairs_positive_differs():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((4, 64, 12)).astype(np.float32)
    _, positives, _ = ct.make_batch_pairs(X, ct.AugmentConfig(seed=2), seed=0)
    for i in range(4):
        assert not np.array_equal(positives[i], X[i])


def test_augmentation_choice_is_balanced():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((10000, 8, 2)).astype(np.float32)
    _, _, choices = ct.make_batch_pairs(X, ct.AugmentConfig(seed=3), seed=0)
    frac = np.mean([c == "warp" for c in choices])
    assert 0.48 <= frac <= 0.52


# --- info_nce -------------------------------------------------------------------

def brute_force_nce(Z, Zp, tau):
    B = Z.shape[0]
    zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    pn = Zp / np.linalg.norm(Zp, axis=1, keepdims=True)
    total = 0.0
    for i in range(B):
        num = np.exp(np.dot(zn[i], pn[i]) / tau)
        den = sum(np.exp(np.dot(zn[i], pn[j]) / tau) for j in range(B))
        total += -np.log(num / den)
    return total / B


def test_info_nce_matches_brute_force():
    rng = np.random.default_rng(11)
    Z = rng.standard_normal((8, 16))
    Zp = rng.standard_normal((8, 16))
    got = float(ct.info_nce(t64(Z), t64(Zp), 0.1).data)
    assert abs(got - brute_force_nce(Z, Zp, 0.1)) < 1e-9


def test_info_nce_identical_embeddings_ln_b():
    Z = np.tile(np.arange(1.0, 5.0), (32, 1))
    loss = float(ct.info_nce(t64(Z), t64(Z.copy()), 0.1).data)
    assert abs(loss - np.log(32.0)) < 1e-9


def test_info_nce_aligned_orthogonal_near_zero():
    # positives: own = anchor; others orthogonal. B=4, tau=0.05
    Z = np.eye(4)
    loss = float(ct.info_nce(t64(Z), t64(Z.copy()), 0.05).data)
    assert loss < 1e-8


def test_info_nce_scale_invariance():
    rng = np.random.default_rng(12)
    Z = rng.standard_normal((6, 8))
    Zp = rng.standard_normal((6, 8))
    base = float(ct.info_nce(t64(Z), t64(Zp), 0.1).data)
    for c in (0.01, 3.0, 250.0):
        scaled = float(ct.info_nce(t64(c * Z), t64(c * Zp), 0.1).data)
        assert abs(scaled - base) < 1e-9


def test_info_nce_nonnegative():
    rng = np.random.default_rng(13)
    for _ in range(10):
        Z = rng.standard_normal((5, 7))
        Zp = rng.standard_normal((5, 7))
        assert float(ct.info_nce(t64(Z), t64(Zp), 0.1).data) >= 0.0


def test_info_nce_zero_norm_rejected():
    Z = np.ones((3, 4))
    Zp = np.ones((3, 4))
    Zp[1] = 0.0
    with pytest.raises(NumericalError):
        ct.info_nce(t64(Z), t64(Zp), 0.1)


def test_info_nce_gradient():
    rng = np.random.default_rng(14)
    z = tz.parameter(rng.standard_normal((4, 6)), dtype=np.float64)
    zp = tz.parameter(rng.standard_normal((4, 6)), dtype=np.float64)

    def f():
        return ct.info_nce(z, zp, 0.1)

    assert tz.grad_check(f, {"z": z, "zp": zp}) < 1e-6


def test_ssl_config_validation():
    with pytest.raises(InvalidArgument):
        ct.SslConfig(temperature=0.0)


# --- harness -------------------------------------------------------------------

def make_ws(n=40, T=24, seed=0):
    rng = np.random.default_rng(seed)
    groups = np.array([("HC", "PD", "DD")[i % 3] for i in range(n)])
    y1 = np.array([{"HC": 0, "PD": 1, "DD": MASK}[g] for g in groups], np.int8)
    y2 = np.array([{"HC": MASK, "PD": 0, "DD": 1}[g] for g in groups], np.int8)
    subjects = np.array([f"{g}_{i % 8}" for i, g in enumerate(groups)])
    return WindowSet(X=rng.standard_normal((n, T, 12)).astype(np.float32),
                     y1=y1, y2=y2, groups=groups, subjects=subjects,
                     tasks=np.array(["t"] * n), offsets=np.zeros(n, np.int64))


TINY = mdl.ModelConfig(d=8, n_layers=1, n_heads=2, ff_dim=16, dropout=0.1, T=24)


def test_label_fraction_subset():
    ws = make_ws(n=48)
    full = ct.label_fraction_subset(ws, 1.0, seed=0)
    assert len(full) == len(ws)
    part = ct.label_fraction_subset(ws, 0.5, seed=0)
    for g in ("HC", "PD", "DD"):
        total = len(set(ws.subjects[ws.groups == g]))
        kept = len(set(part.subjects[part.groups == g]))
        assert kept == int(np.ceil(0.5 * total))
    again = ct.label_fraction_subset(ws, 0.5, seed=0)
    np.testing.assert_array_equal(part.subjects, again.subjects)
    assert set(part.subjects) <= set(ws.subjects)


def test_pretrain_descends_and_never_reads_labels():
    ws = make_ws(n=30, T=24, seed=1)
    scfg = ct.SslConfig(epochs=2, batch_size=10, seed=5)
    tcfg = tr.TrainConfig(lr=3e-3, seed=5, max_epochs=1)
    params, info = ct.pretrain(ws, TINY, scfg, tcfg)
    assert info["history"][-1]["ssl_loss"] < info["first_step_loss"]

    poisoned = make_ws(n=30, T=24, seed=1)
    poisoned.y1[:] = 1
    poisoned.y2[:] = 0
    params2, _ = ct.pretrain(poisoned, TINY, scfg, tcfg)
    for name in params:
        np.testing.assert_array_equal(params[name].data, params2[name].data)


def test_pretrain_checkpoint_loads_into_fine_tune(tmp_path):
    ws = make_ws(n=24, T=24, seed=2)
    scfg = ct.SslConfig(epochs=1, batch_size=8, seed=6)
    tcfg = tr.TrainConfig(seed=6, max_epochs=1, batch_size=8)
    params, _ = ct.pretrain(ws, TINY, scfg, tcfg)
    path = tmp_path / "ssl.bwt"
    mdl.save_checkpoint(path, params, TINY)
    loaded, cfg, _ = mdl.load_checkpoint(path)
    arrays = {k: v.data for k, v in loaded.items()}
    result = ct.fine_tune(arrays, ws, make_ws(n=12, T=24, seed=3), cfg, tcfg)
    # heads were re-initialized, not copied from the checkpoint
    assert not np.array_equal(result.params["head.h1.W"].data, loaded["head.h1.W"].data)


def test_linear_probe_freezes_encoder():
    ws_train, ws_val = make_ws(n=36, T=24, seed=4), make_ws(n=12, T=24, seed=5)
    pre = {k: v.data.copy() for k, v in mdl.init_params(TINY, seed=7).items()}
    tcfg = tr.TrainConfig(seed=7, max_epochs=2, batch_size=12)
    report, params = ct.linear_probe(pre, ws_train, ws_val, TINY, tcfg)
    assert report["encoder_grads_zero"]
    for name, arr in pre.items():
        if not name.startswith("head."):
            np.testing.assert_array_equal(params[name].data, arr)
    assert 0.0 <= report["head_hc_pd"]["accuracy"] <= 1.0
