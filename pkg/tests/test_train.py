import numpy as np
import pytest

from biwrist import model as mdl
from biwrist import tensor as tz
from biwrist import train as tr
from biwrist.windowing import MASK, WindowSet


def make_ws(n=24, T=32, seed=0):
    rng = np.random.default_rng(seed)
    groups = np.array([("HC", "PD", "DD")[i % 3] for i in range(n)])
    y1 = np.array([{"HC": 0, "PD": 1, "DD": MASK}[g] for g in groups], np.int8)
    y2 = np.array([{"HC": MASK, "PD": 0, "DD": 1}[g] for g in groups], np.int8)
    return WindowSet(
        X=rng.standard_normal((n, T, 12)).astype(np.float32),
        y1=y1, y2=y2, groups=groups,
        subjects=np.array([f"s{i % 6}" for i in range(n)]),
        tasks=np.array(["t"] * n), offsets=np.zeros(n, np.int64))


def probs(rows):
    return tz.Tensor(np.asarray(rows, dtype=np.float64))


# --- masked loss -------------------------------------------------------------

def test_masked_ce_perfect_hc():
    loss, n = tr.masked_ce(probs([[1.0, 0.0]]), probs([[0.5, 0.5]]), [0], [MASK])
    assert n == 1
    assert abs(float(loss.data)) < 1e-9


def test_masked_ce_pd_uniform_is_ln2():
    loss, n = tr.masked_ce(probs([[0.5, 0.5]]), probs([[0.5, 0.5]]), [1], [0])
    assert n == 2
    assert abs(float(loss.data) - np.log(2.0)) < 1e-9


def test_masked_ce_mixed_batch_is_ln2():
    loss, n = tr.masked_ce(probs([[0.5, 0.5], [0.3, 0.7]]), probs([[0.9, 0.1], [0.5, 0.5]]),
                           [0, MASK], [MASK, 1])
    assert n == 2
    assert abs(float(loss.data) - np.log(2.0)) < 1e-9


def test_masked_ce_all_masked_skips():
    loss, n = tr.masked_ce(probs([[0.5, 0.5]]), probs([[0.5, 0.5]]), [MASK], [MASK])
    assert loss is None and n == 0


def test_masked_head_logit_gradient_exactly_zero():
    logits1 = tz.parameter(np.array([[0.2, -0.1], [0.4, 0.3], [1.0, -1.0]]), dtype=np.float64)
    logits2 = tz.parameter(np.array([[0.1, 0.5], [-0.2, 0.2], [0.3, 0.3]]), dtype=np.float64)
    loss, _ = tr.masked_ce(tz.softmax(logits1), tz.softmax(logits2),
                           [0, 1, MASK], [MASK, 0, 1])
    loss.backward()
    np.testing.assert_array_equal(logits1.grad[2], [0.0, 0.0])
    np.testing.assert_array_equal(logits2.grad[0], [0.0, 0.0])
    assert (logits1.grad[:2] != 0).any() and (logits2.grad[1:] != 0).any()


def test_masked_ce_invariant_to_batch_order():
    rng = np.random.default_rng(1)
    p1 = rng.dirichlet([1, 1], size=10)
    p2 = rng.dirichlet([1, 1], size=10)
    y1 = np.array([0, 1, MASK, 0, 1, MASK, 1, 0, MASK, 1])
    y2 = np.array([MASK, 0, 1, MASK, 0, 1, 0, MASK, 1, 0])
    a, _ = tr.masked_ce(probs(p1), probs(p2), y1, y2)
    perm = rng.permutation(10)
    b, _ = tr.masked_ce(probs(p1[perm]), probs(p2[perm]), y1[perm], y2[perm])
    assert abs(float(a.data) - float(b.data)) < 1e-12


# --- optimizer stack ---------------------------------------------------------

def _one_param(value, **cfg_kw):
    cfg = tr.TrainConfig(**cfg_kw)
    p = tz.parameter(np.array(value), dtype=np.float64)
    return cfg, {"w": p}, p


def test_adamw_zero_grad_no_decay_is_identity():
    cfg, params, p = _one_param([1.0, -2.0], weight_decay=0.0)
    opt = tr.AdamW(params, cfg)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_zero_grad_decay_scales_exactly():
    cfg, params, p = _one_param([1.0, -2.0, 0.5], lr=5e-4, weight_decay=0.01)
    theta0 = p.data.copy()
    opt = tr.AdamW(params, cfg)
    p.grad = np.zeros(3)
    opt.step()
    np.testing.assert_array_equal(p.data, theta0 - 5e-4 * (0.01 * theta0))


def test_adamw_descends_quadratic():
    cfg, params, p = _one_param(1.0, lr=0.05, weight_decay=0.0)
    opt = tr.AdamW(params, cfg)
    p.grad = p.data.copy()  # grad of theta^2/2
    opt.step()
    assert abs(float(p.data)) < 1.0


def test_adamw_aborts_on_nonfinite():
    from biwrist.errors import NumericalError
    cfg, params, p = _one_param([1.0], weight_decay=0.0)
    opt = tr.AdamW(params, cfg)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericalError):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0])


def test_clip_grad_norm():
    a = tz.parameter(np.zeros(3), dtype=np.float64)
    b = tz.parameter(np.zeros(4), dtype=np.float64)
    a.grad = np.array([0.3, 0.0, 0.4])
    b.grad = np.zeros(4)
    assert tr.clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(0.5)
    np.testing.assert_array_equal(a.grad, [0.3, 0.0, 0.4])

    a.grad = np.array([4.0, 0.0, 0.0])
    tr.clip_grad_norm({"a": a}, 1.0)
    assert abs(np.linalg.norm(a.grad) - 1.0) < 1e-9

    a.grad = np.zeros(3)
    tr.clip_grad_norm({"a": a}, 1.0)
    np.testing.assert_array_equal(a.grad, np.zeros(3))


def test_plateau_constant_when_improving():
    sched = tr.PlateauScheduler(1.0)
    for v in [5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25]:
        lr = sched.step(v)
    assert lr == 1.0


def test_plateau_halves_after_six_equal():
    sched = tr.PlateauScheduler(1.0)
    lrs = [sched.step(1.0) for _ in range(6)]
    assert lrs == [1.0] * 5 + [0.5]


def test_plateau_two_plateaus_quarter():
    sched = tr.PlateauScheduler(1.0)
    for v in [1.0] * 6 + [0.5] + [0.5] * 5:
        lr = sched.step(v)
    assert lr == 0.25


# --- metrics -----------------------------------------------------------------

def test_metrics_exclude_masked():
    ws = make_ws(n=12, T=16, seed=2)
    cfg = mdl.ModelConfig(d=8, n_layers=1, n_heads=2, ff_dim=16, dropout=0.0, T=16)
    params = mdl.init_params(cfg, seed=0)
    report = tr.evaluate(params, cfg, ws)
    assert report["n_active"]["head_hc_pd"] == int((ws.y1 != MASK).sum())
    assert report["n_active"]["head_pd_dd"] == int((ws.y2 != MASK).sum())
    for head in ("head_hc_pd", "head_pd_dd"):
        assert 0.0 <= report[head]["accuracy"] <= 1.0
        assert 0.0 <= report[head]["macro_f1"] <= 1.0


def test_classification_metrics_known_case():
    m = tr.classification_metrics([0, 1, 1, 0], [0, 1, 0, 0], 2)
    assert m["accuracy"] == pytest.approx(0.75)
    # class0: P=2/2... predicted 0 twice, both correct: P=1, R=2/3, F1=0.8
    # class1: P=1/2, R=1/1, F1=2/3
    assert m["macro_f1"] == pytest.approx((0.8 + 2 / 3) / 2)


# --- fold driver -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_sets():
    return make_ws(n=36, T=16, seed=3), make_ws(n=12, T=16, seed=4)


TINY_MODEL = mdl.ModelConfig(d=8, n_layers=1, n_heads=2, ff_dim=16, dropout=0.1, T=16)


def test_train_fold_deterministic(tiny_sets, tmp_path):
    train_ws, val_ws = tiny_sets
    cfg = tr.TrainConfig(max_epochs=2, batch_size=8, seed=9)
    r1 = tr.train_fold(train_ws, val_ws, TINY_MODEL, cfg, out_dir=tmp_path / "a")
    r2 = tr.train_fold(train_ws, val_ws, TINY_MODEL, cfg, out_dir=tmp_path / "b")
    assert r1.history == r2.history
    assert (tmp_path / "a" / "loss_curve.csv").read_bytes() == \
           (tmp_path / "b" / "loss_curve.csv").read_bytes()
    for name in r1.params:
        np.testing.assert_array_equal(r1.params[name].data, r2.params[name].data)


def test_train_fold_restores_best_epoch(tiny_sets):
    train_ws, val_ws = tiny_sets
    cfg = tr.TrainConfig(max_epochs=3, batch_size=8, seed=5)
    result = tr.train_fold(train_ws, val_ws, TINY_MODEL, cfg)
    best = min(result.history, key=lambda h: h["val_loss"])
    assert result.best_epoch == best["epoch"]
    assert result.val_metrics["loss"] == pytest.approx(best["val_loss"])


def test_train_three_class_runs(tiny_sets):
    train_ws, val_ws = tiny_sets
    cfg3 = mdl.ModelConfig(d=8, n_layers=1, n_heads=2, ff_dim=16, dropout=0.0, T=16,
                           mode="three_class")
    result = tr.train_fold(train_ws, val_ws, cfg3, tr.TrainConfig(max_epochs=1, batch_size=8, seed=6))
    report = result.val_metrics
    assert set(report["per_class"]) == {"HC", "PD", "DD"}
    assert 0.0 <= report["overall"]["accuracy"] <= 1.0


def test_frozen_subset_stays_frozen(tiny_sets):
    train_ws, val_ws = tiny_sets
    heads = {"head.h1.W", "head.h1.b", "head.h2.W", "head.h2.b"}
    init = {k: v.data.copy() for k, v in mdl.init_params(TINY_MODEL, seed=11).items()}
    result = tr.train_fold(train_ws, val_ws, TINY_MODEL,
                           tr.TrainConfig(max_epochs=1, batch_size=8, seed=11),
                           init=init, trainable=heads)
    for name, p in result.params.items():
        if name in heads:
            assert not np.array_equal(p.data, init[name])
        else:
            np.testing.assert_array_equal(p.data, init[name])


def test_three_class_majority_bias_on_imbalanced_windows():
    # window-majority PD set (no DHWT rebalancing): brief training favors
    # the majority class, the failure mode the two-head decomposition avoids
    from biwrist import ingest, windowing

    cohort = ingest.synth_cohort(n_per_class=4, duration_s=10.0, seed=21)
    ws = windowing.window_cohort(cohort, bandpass=True)
    keep = np.zeros(len(ws), dtype=bool)
    keep |= ws.groups == "PD"
    for g in ("HC", "DD"):  # one subject's windows each: PD dominates
        subj = sorted(set(ws.subjects[ws.groups == g]))[0]
        keep |= ws.subjects == subj
    imb = ws.subset(keep)
    assert imb.group_counts()["PD"] > max(imb.group_counts()["HC"], imb.group_counts()["DD"])

    cfg3 = mdl.ModelConfig(d=16, n_layers=1, n_heads=2, ff_dim=32, dropout=0.1,
                           mode="three_class")
    result = tr.train_fold(imb, imb, cfg3, tr.TrainConfig(max_epochs=1, batch_size=16, seed=0))
    per_class = result.val_metrics["per_class"]
    assert per_class["PD"] >= per_class["HC"]
    assert per_class["PD"] >= per_class["DD"]


def test_aggregate_metrics_population_std():
    folds = [{"head_hc_pd": {"accuracy": a, "macro_f1": a}, "head_pd_dd": {"accuracy": 1.0, "macro_f1": 1.0}}
             for a in (0.8, 1.0)]
    agg = tr.aggregate_metrics(folds)
    assert agg["head_hc_pd"]["accuracy"]["mean"] == pytest.approx(0.9)
    assert agg["head_hc_pd"]["accuracy"]["std"] == pytest.approx(0.1)  # population formula
    assert agg["head_pd_dd"]["accuracy"]["std"] == 0.0
