import csv
import json

import numpy as np
import pytest

from secemb import simrec as sr
from secemb.dp import DpConfig
from secemb.ring import DEFAULT_PARAMS as P


def synthetic(seed=0, n_users=30, n_items=64, per_user=12, d=4):
    """Low-rank ratings with known factors; returns (split dataset, P, Q)."""
    rng = np.random.default_rng(seed)
    pu = rng.normal(0, 0.6, (n_users, d))
    qi = rng.normal(0, 0.6, (n_items, d))
    users, items = [], []
    for u in range(n_users):
        chosen = rng.choice(n_items, per_user, replace=False)
        users += [u] * per_user
        items += list(chosen)
    users, items = np.array(users), np.array(items)
    ratings = 3.0 + np.einsum("nk,nk->n", pu[users], qi[items])
    ds = sr.Dataset(n_users, n_items, users, items, ratings, np.zeros(len(users), np.int64))
    return sr.split_train_test(rng, ds, 0.8), pu, qi


def hyper(**kw):
    base = dict(d=4, lr=0.05, rounds=3, clients_per_round=6, m_prime=10, eval_every=1, seed=3)
    base.update(kw)
    return sr.MfHyper(**base)


# -- data -----------------------------------------------------------------------------


def test_load_small_file(tmp_path):
    f = tmp_path / "u.data"
    f.write_text("7\t3\t4\t100\n2\t3\t5\t101\n7\t9\t1\t102\n")
    ds = sr.load_movielens(f)
    assert (ds.n_users, ds.n_items, len(ds)) == (2, 2, 3)
    assert ds.users.tolist() == [1, 0, 1] and ds.items.tolist() == [0, 0, 1]
    assert ds.ratings.tolist() == [4.0, 5.0, 1.0]


@pytest.mark.parametrize("line", ["1\t2\t3\n", "1\tx\t3\t4\n", "0\t2\t3\t4\n"])
def test_load_malformed_reports_line(tmp_path, line):
    f = tmp_path / "u.data"
    f.write_text("1\t1\t5\t1\n" + line)
    with pytest.raises(sr.DataError, match=r"u\.data:2"):
        sr.load_movielens(f)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        sr.load_movielens(tmp_path / "nope")


def test_ml100k_counts(ml100k):
    ds = sr.load_movielens(ml100k, "ml-100k")
    assert (ds.n_users, ds.n_items, len(ds)) == sr.KNOWN_DATASETS["ml-100k"]


def test_split_is_per_user(rng):
    ds, _, _ = synthetic()
    split = sr.split_train_test(rng, ds, 0.75)
    for u in range(ds.n_users):
        mine = split.users == u
        assert split.train[mine].sum() == round(0.75 * mine.sum())
    with pytest.raises(sr.DataError):
        sr.split_train_test(rng, ds, 0.0)
    with pytest.raises(sr.DataError):
        _ = sr.Dataset(1, 1, ds.users[:1], ds.items[:1], ds.ratings[:1], ds.timestamps[:1]).test


# -- model ------------------------------------------------------------------------------


def test_item_gradient_matches_finite_difference(rng):
    h = sr.MfHyper(d=5, lr=0.01, reg=0.03)
    p0 = rng.normal(0, 1, 5)
    row = rng.normal(0, 1, (1, 6))
    client = sr.ClientState(0, p0.copy(), 0.2, np.array([0]), np.array([4.0]))
    grad, _ = sr.local_train_mf(client, row, h, rng, mu=1.0)

    def loss(r):
        e = p0 @ r[:5] + 0.2 + r[5] + 1.0 - 4.0
        return 0.5 * e**2 + 0.5 * h.reg * (r @ r)

    eps = 1e-6
    fd = [(loss(row[0] + eps * np.eye(6)[k]) - loss(row[0] - eps * np.eye(6)[k])) / (2 * eps) for k in range(6)]
    np.testing.assert_allclose(grad[0], fd, rtol=1e-6, atol=1e-8)
    assert not np.array_equal(client.p, p0)


def test_user_without_ratings(rng):
    client = sr.ClientState(0, np.ones(3), 0.0, np.zeros(0, np.int64), np.zeros(0))
    grad, _ = sr.local_train_mf(client, np.zeros((0, 4)), sr.MfHyper(d=3), rng)
    assert grad.shape == (0, 4) and np.array_equal(client.p, np.ones(3))


def test_hyper_validation():
    with pytest.raises(ValueError):
        sr.MfHyper(d=0)
    with pytest.raises(ValueError):
        sr.MfHyper(aggregation="median")


def test_perfect_predictor_scores_near_zero():
    ds, pu, qi = synthetic()
    w = sr.build_world(ds, hyper(center=False))
    for c in w.clients:
        c.p, c.bias = pu[c.user].copy(), 3.0
    real = np.zeros((ds.n_items, 5))
    real[:, :4] = qi
    w.servers[0].table = w.servers[1].table = P.quantize(real)
    assert sr.evaluate_rmse(w) < 0.05


def test_constant_predictor():
    ds, _, _ = synthetic()
    expect = np.sqrt(np.mean((ds.ratings[ds.test] - ds.ratings[ds.train].mean()) ** 2))
    assert sr.rmse_of_constant(ds) == pytest.approx(expect)


def test_constant_predictor_ml100k(ml100k):
    ds = sr.split_train_test(np.random.default_rng(0), sr.load_movielens(ml100k))
    assert 1.0 < sr.rmse_of_constant(ds) < 1.25


def test_training_reduces_error():
    ds, _, _ = synthetic(n_users=40, per_user=20)
    h = hyper(init_std=0.3, lr=0.2, clients_per_round=20, m_prime=20, aggregation="sum")
    w = sr.build_world(ds, h, "plaintext")
    before = sr.evaluate_rmse(w)
    sr.run_experiment(w, rounds=60)
    assert sr.evaluate_rmse(w) < before


# -- pipelines --------------------------------------------------------------------------


def _run(variant, rounds=2, **kw):
    ds, _, _ = synthetic()
    w = sr.build_world(ds, hyper(), variant, crypto_seed=11, **kw)
    for _ in range(rounds):
        sr.run_round(w)
    return w


def test_deterministic_replay():
    a, b = _run("final"), _run("final")
    assert np.array_equal(a.table, b.table)
    assert [e.nbytes for e in a.ledger.entries] == [e.nbytes for e in b.ledger.entries]


@pytest.mark.parametrize("variant", ["final", "rowenc", "init", "baseline"])
def test_pipeline_matches_plaintext(variant):
    ref = _run("plaintext")
    w = _run(variant)
    assert np.array_equal(w.table, ref.table)
    assert sr.evaluate_rmse(w) == sr.evaluate_rmse(ref)
    assert all(np.array_equal(a.p, b.p) for a, b in zip(w.clients, ref.clients))


def test_recompute_mode_matches():
    assert np.array_equal(_run("final", cache_paths=False).table, _run("plaintext").table)


def test_os_entropy_matches_plaintext():
    ds, _, _ = synthetic()
    w = sr.build_world(ds, hyper(), "final", crypto_seed=None)
    sr.run_round(w)
    assert np.array_equal(w.table, _run("plaintext", rounds=1).table)


def test_dropout_matches_plaintext():
    ref = _run("plaintext", dropout=0.5)
    w = _run("final", dropout=0.5)
    assert np.array_equal(w.table, ref.table)
    assert any(r.survivors < r.participants for r in w.history)
    assert not w.servers[0].path_cache and not w.servers[1].path_cache


def test_dp_matches_plaintext():
    dp = DpConfig(epsilon=1.0, delta=1e-5, delta2=1.0)
    ref = _run("plaintext", dp=dp)
    w = _run("final", dp=dp)
    assert np.array_equal(w.table, ref.table)
    assert not np.array_equal(w.table, _run("final").table)


def test_fork_is_independent():
    w = _run("plaintext", rounds=1)
    f = w.fork("final")
    sr.run_round(f)
    assert f.variant == "final" and w.round_index == 1 and f.round_index == 2
    with pytest.raises(ValueError):
        w.fork("bogus")


def test_warm_start_matches_full_plaintext():
    ds, _, _ = synthetic()
    a = sr.build_world(ds, hyper(), "final", crypto_seed=1)
    sr.run_experiment(a, rounds=3, warm_start_rounds=2)
    b = sr.build_world(ds, hyper(), "plaintext")
    sr.run_experiment(b, rounds=3)
    assert a.variant == "final" and np.array_equal(a.table, b.table)
    assert len(a.ledger.select(rnd=2)) > 0 and not a.ledger.select(rnd=0)


def test_ledger_matches_theory():
    w = _run("final", rounds=1)
    for e in w.ledger.entries:
        assert e.theory_bits / 8 <= e.nbytes <= 1.10 * e.theory_bits / 8 + 64
    assert w.ledger.per_user(direction="up", stage="retrieval") > 0
    with pytest.raises(ValueError):
        w.ledger.record(0, 0, "sideways", "retrieval", 1, 1)


def test_m_prime_from_secure_average():
    ds, _, _ = synthetic()
    w = sr.build_world(ds, hyper(m_prime=None, alpha=1.0), "final", crypto_seed=0)
    counts = np.bincount(ds.users[ds.train], minlength=ds.n_users)
    assert w.m_prime == int(np.ceil(counts.mean()))


def test_build_world_rejects_bad_input():
    ds, _, _ = synthetic()
    with pytest.raises(ValueError):
        sr.build_world(ds, hyper(), "other")
    with pytest.raises(ValueError):
        sr.build_world(ds, hyper(), dropout=1.0)
    with pytest.raises(ValueError):
        sr.build_world(ds, hyper(clients_per_round=999))


# -- reporting --------------------------------------------------------------------------


def test_report_files(tmp_path):
    ds, _, _ = synthetic()
    w = sr.build_world(ds, hyper(), "final", crypto_seed=2)
    report = sr.run_experiment(w)
    csv_path, json_path = report.write(tmp_path)
    rows = list(csv.DictReader(csv_path.open()))
    assert len(rows) == 3 * 3 and {r["stage"] for r in rows} == {"retrieval", "aggregation", "total"}
    summary = json.loads(json_path.read_text())
    assert summary["rounds_run"] == 3 and summary["config"]["variant"] == "final"
    assert summary["final_rmse"] == pytest.approx(sr.evaluate_rmse(w))
    assert summary["ratios"]["upload_reduction_vs_baseline"] > 0


def test_cost_model_matches_ledger():
    w = _run("final", rounds=1)
    model = sr.cost_model(w.m, w.m_prime, w.row_len, 0)
    assert w.ledger.per_user(direction="up") == model["secemb_up_bytes"]
    assert w.ledger.per_user(direction="down") == model["secemb_down_bytes"]
    b = _run("baseline", rounds=1)
    assert b.ledger.per_user(direction="up") == model["baseline_up_bytes"]
    assert b.ledger.per_user(direction="down") == model["baseline_down_bytes"]


def test_ablation_orders_variants():
    ds, _, _ = synthetic(n_items=256, per_user=12)
    w = sr.build_world(ds, hyper(m_prime=12), "final", crypto_seed=4)
    res = sr.ablation(w, n_clients=3)
    up = {v: r["up_bytes_per_user"] for v, r in res.items()}
    assert up["init"] > up["rowenc"] > up["final"]
    assert w.round_index == 0
