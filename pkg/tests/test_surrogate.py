import json

import numpy as np
import pytest

from mpgroup.neural import loss
from mpgroup.portfolio import ProductLine, synth_dc, synth_term_life
from mpgroup.surrogate import (
    Dataset,
    SizeError,
    SurrogateEnsemble,
    TrainConfig,
    evaluate,
    member_losses,
    member_seeds,
    nearest_rank_percentile,
    split,
    train_ensemble,
    train_surrogate,
    write_history_csv,
)

SMALL = TrainConfig(hidden=6, recurrent_hidden=6, max_epochs=8, patience=3, batch_size=32)


@pytest.fixture(scope="module")
def dc_split():
    return split(Dataset.from_portfolio(synth_dc(400)), seed=0)


def test_split_sizes():
    ds = Dataset.from_portfolio(synth_dc(1000))
    s = split(ds, seed=3)
    assert (len(s.train), len(s.validation), len(s.test)) == (525, 175, 300)
    every = np.concatenate([s.indices[k] for k in ("train", "validation", "test")])
    assert sorted(every) == list(range(1000))


def test_split_deterministic():
    ds = Dataset.from_portfolio(synth_dc(100))
    a, b, c = split(ds, 1), split(ds, 1), split(ds, 2)
    assert np.array_equal(a.indices["test"], b.indices["test"])
    assert not np.array_equal(a.indices["test"], c.indices["test"])


def test_split_too_small():
    with pytest.raises(SizeError):
        split(Dataset.from_portfolio(synth_dc(5)))


def test_dataset_from_portfolio():
    ds = Dataset.from_portfolio(synth_term_life(50))
    assert ds.Z.shape == (50, 5) and ds.Y.shape == (50, 41)
    assert np.abs(ds.Z).max() <= 1


def test_training_deterministic_and_restores_best(dc_split):
    a = train_surrogate(dc_split, SMALL)
    b = train_surrogate(dc_split, SMALL)
    assert a.history == b.history
    assert np.array_equal(a.network.predict(dc_split.test.Z), b.network.predict(dc_split.test.Z))
    val = loss("MSE", a.network.predict(dc_split.validation.Z), dc_split.validation.Y)[0]
    best = min(h[2] for h in a.history)
    assert val == pytest.approx(best, rel=1e-12)
    assert a.history[a.best_epoch - 1][2] == best


def test_training_reduces_loss(dc_split):
    cfg = TrainConfig(hidden=8, recurrent_hidden=8, max_epochs=30, patience=30, lr=0.01)
    res = train_surrogate(dc_split, cfg)
    first = res.history[0][2]
    assert min(h[2] for h in res.history) < 0.5 * first


def test_early_stopping(dc_split):
    cfg = TrainConfig(hidden=4, recurrent_hidden=4, max_epochs=200, patience=2, lr=0.05)
    res = train_surrogate(dc_split, cfg)
    # training stops within `patience` epochs of the best one
    assert len(res.history) <= max(res.best_epoch, 0) + cfg.patience
    assert len(res.history) < cfg.max_epochs


def test_scale_layer_range(dc_split):
    res = train_surrogate(dc_split, SMALL)
    s = res.network.scale_layer
    assert s.mode == "linear"
    assert s.lo == min(dc_split.train.Y.min(), 0.0) and s.hi == dc_split.train.Y.max()


def test_term_life_uses_log_scale():
    s = split(Dataset.from_portfolio(synth_term_life(200)))
    res = train_surrogate(s, TrainConfig(hidden=4, recurrent_hidden=4, max_epochs=2))
    assert res.network.scale_layer.mode == "log"


def test_config_from_dict():
    assert TrainConfig.from_dict({"hidden": 3}).hidden == 3
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"hiden": 3})


def test_member_settings():
    assert member_losses(3, "mixed") == ["MSE", "MAE", "MSE"]
    with pytest.raises(ValueError):
        member_losses(2, "huber")
    seeds = member_seeds(0, 3)
    assert len(set(seeds)) == 3 and seeds == member_seeds(0, 3)


def test_ensemble_is_member_mean(dc_split, tmp_path):
    ens, results = train_ensemble(dc_split, SMALL, n_members=2, losses="mixed")
    Z = dc_split.test.Z[:20]
    expected = (results[0].network.predict(Z) + results[1].network.predict(Z)) / 2
    np.testing.assert_allclose(ens.predict(Z), expected, rtol=1e-14)
    assert ens.member_losses == ["MSE", "MAE"]
    path = tmp_path / "ens.json"
    ens.save(path)
    back = SurrogateEnsemble.load(path)
    np.testing.assert_array_equal(back.predict(Z), ens.predict(Z))
    assert back.line is ProductLine.DC_PLAN
    assert json.loads(path.read_text())["format"] == "mpgroup-ensemble"


def test_ensemble_parallel_matches_serial(dc_split):
    a, _ = train_ensemble(dc_split, SMALL, n_members=2, workers=1)
    b, _ = train_ensemble(dc_split, SMALL, n_members=2, workers=2)
    Z = dc_split.test.Z
    np.testing.assert_array_equal(a.predict(Z), b.predict(Z))


def test_ensemble_input_gradient(dc_split):
    ens, _ = train_ensemble(dc_split, SMALL, n_members=2)
    z = dc_split.test.Z[:3]
    u = np.random.default_rng(0).standard_normal((3, 43))
    ens.forward(z)
    g = ens.input_gradient(u)
    eps = 1e-6
    for k in range(5):
        d = np.zeros_like(z)
        d[:, k] = eps
        fd = (np.sum(u * ens.predict(z + d)) - np.sum(u * ens.predict(z - d))) / (2 * eps)
        assert g[:, k].sum() == pytest.approx(fd, rel=1e-5)


def test_nearest_rank_percentile():
    assert nearest_rank_percentile(np.arange(1, 101), 0.99) == 99
    assert nearest_rank_percentile([5.0], 0.99) == 5.0
    assert nearest_rank_percentile(np.arange(1, 11), 0.5) == 5
    assert np.isnan(nearest_rank_percentile([], 0.99))


class _Offset:
    def __init__(self, delta):
        self.delta = delta

    def predict(self, Z):
        return self.delta


def test_evaluate_hand_example():
    Y = np.array([[1.0, 2.0], [9.0, 8.0]])
    ds = Dataset(ProductLine.DC_PLAN, np.zeros((2, 5)), np.zeros((2, 5)), Y)
    r = evaluate(_Offset(Y + np.array([[1.0, 0.0], [0.0, 0.0]])), ds)
    assert r.mean_e_t == pytest.approx(0.25)
    assert r.mean_re_t == pytest.approx(0.25)
    assert r.mean_wre_t == pytest.approx(0.1 / 4)
    assert r.per_t["mean_wre"] == pytest.approx([0.05, 0.0])
    assert r.per_t["aggregate_re"] == pytest.approx([0.1, 0.0])
    assert r.pc99_abs_e == 1.0 and r.pc99_abs_wre == pytest.approx(0.1)


def test_evaluate_zero_paths_and_files(tmp_path):
    Y = np.array([[1.0, 0.0], [3.0, 0.0]])
    ds = Dataset(ProductLine.DC_PLAN, np.zeros((2, 5)), np.zeros((2, 5)), Y)
    r = evaluate(_Offset(Y + 0.5), ds)
    # re/wre undefined where the values (or totals) vanish; e is not
    assert r.mean_e_t == pytest.approx(0.5)
    assert r.mean_re_t == pytest.approx((0.5 + 0.5 / 3) / 2)
    assert np.isnan(r.per_t["mean_wre"][1])
    assert sum(b["count"] for b in r.re_by_volume_bucket) == 2
    r.save_json(tmp_path / "r.json")
    r.save_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().startswith("stat,t,value\nmean_e_t,all,0.5\n")


def test_evaluate_perfect_model(dc_split):
    ds = dc_split.test
    r = evaluate(_Offset(ds.Y), ds)
    assert r.mean_abs_wre_t == 0 and r.mean_abs_re_t == 0


def test_write_history(tmp_path):
    write_history_csv(tmp_path / "h.csv", [(1, 2.0, 3.0)])
    assert (tmp_path / "h.csv").read_text() == "epoch,train_loss,val_loss\n1,2.0,3.0\n"


def test_evaluate_empty():
    ds = Dataset(ProductLine.DC_PLAN, np.zeros((0, 5)), np.zeros((0, 5)), np.zeros((0, 43)))
    with pytest.raises(SizeError):
        evaluate(_Offset(0), ds)


def test_linear_toy_target_learned():
    # a target linear in one feature is representable, so training should nail it
    rng = np.random.default_rng(0)
    Z = rng.uniform(-1, 1, (600, 5))
    Y = 1000 * (1.5 + 0.5 * Z[:, :1]) * (1 + 0.02 * np.arange(43))[None, :]
    s = split(Dataset(ProductLine.DC_PLAN, Z.copy(), Z, Y), 0)
    cfg = TrainConfig(hidden=16, recurrent_hidden=16, max_epochs=200, patience=200, lr=0.01)
    res = train_surrogate(s, cfg)
    assert evaluate(res.network, s.validation).mean_abs_re_t < 0.01


def test_mixed_losses_differ_with_same_seed(dc_split):
    ens, _ = train_ensemble(dc_split, SMALL, n_members=2, losses="mixed", seeds=[4, 4])
    a, b = (m.get_weights() for m in ens.members)
    assert any(not np.array_equal(x, y) for x, y in zip(a, b))


def test_report_invariants(dc_split):
    ens, _ = train_ensemble(dc_split, SMALL, n_members=1)
    ds = dc_split.test
    r = evaluate(ens, ds)
    assert abs(r.mean_wre_t) <= r.pc99_abs_wre
    assert abs(r.mean_e_t) <= r.pc99_abs_e
    perm = np.random.default_rng(0).permutation(len(ds))
    r2 = evaluate(ens, ds.subset(perm))
    assert r2.pc99_abs_wre == r.pc99_abs_wre
    assert r2.mean_abs_wre_t == pytest.approx(r.mean_abs_wre_t, rel=1e-12)
    np.testing.assert_allclose(r2.per_t["aggregate_re"], r.per_t["aggregate_re"], rtol=1e-10)


def test_single_member_ensemble(dc_split):
    ens, (res,) = train_ensemble(dc_split, SMALL, n_members=1)
    np.testing.assert_array_equal(ens.predict(dc_split.test.Z), res.network.predict(dc_split.test.Z))


def test_singleton_wre_equals_re():
    Y = np.array([[2.0, 4.0, 0.0]])
    ds = Dataset(ProductLine.DC_PLAN, np.zeros((1, 5)), np.zeros((1, 5)), Y)
    r = evaluate(_Offset(Y * 1.1), ds)
    assert r.mean_wre_t == pytest.approx(r.mean_re_t)
