import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffrec import nn
from diffrec.data import InteractionMatrix
from diffrec.errors import ConfigError, DataError
from diffrec.latent import (ClusterModel, LatentConfig, LatentModel, build_clusters, count_params,
                            decode, diffrec_param_count, encode, gaussian_kl, gamma_at,
                            infer_latent, item_embeddings_svd, kmeans, latent_param_counts,
                            split_latent_dims, train_latent, vae_loss, vae_terms)
from diffrec.schedule import build_schedule

from .oracles import finite_diff_grad, power_iteration_svd, rel_err


def blobs(seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [10, 0], [0, 10]], float)
    X = np.vstack([c + rng.normal(0, 0.5, (30, 2)) for c in centers])
    return X, np.repeat(np.arange(3), 30)


def same_partition(a, b):
    return len(set(zip(a.tolist(), b.tolist()))) == len(set(a.tolist())) == len(set(b.tolist()))


def test_kmeans_recovers_separated_blobs():
    X, truth = blobs()
    assert same_partition(kmeans(X, 3, seed=0), truth)


def test_kmeans_deterministic_for_seed():
    X, _ = blobs(1)
    assert np.array_equal(kmeans(X, 3, seed=4), kmeans(X, 3, seed=4))


def test_kmeans_too_many_clusters():
    with pytest.raises(ConfigError):
        kmeans(np.zeros((2, 2)), 3)


def test_kmeans_identical_points_no_empty_cluster():
    a = kmeans(np.zeros((5, 2)), 3, seed=0)
    assert set(a.tolist()) == {0, 1, 2}


@given(st.integers(0, 1000), st.integers(1, 6))
def test_kmeans_every_cluster_nonempty(seed, C):
    X = np.random.default_rng(seed).standard_normal((12, 3))
    assert np.bincount(kmeans(X, C, seed), minlength=C).min() >= 1


def test_svd_matches_power_iteration():
    rng = np.random.default_rng(0)
    M = (rng.random((40, 25)) < 0.3).astype(float)
    emb = item_embeddings_svd(M, 4)
    vals, vecs = power_iteration_svd(M, 4)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=0), vals, rtol=1e-6)
    for k in range(4):
        v = vecs[k] * np.sign(vecs[k][np.abs(vecs[k]).argmax()])
        np.testing.assert_allclose(emb[:, k] / vals[k], v, atol=1e-5)


def test_svd_sparse_path_agrees_with_dense():
    rng = np.random.default_rng(1)
    M = (rng.random((400, 300)) < 0.05).astype(float)
    emb = item_embeddings_svd(M, 8)
    _, s, _ = np.linalg.svd(M)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=0), s[:8], rtol=1e-8)


def test_svd_all_zero_raises():
    with pytest.raises(DataError):
        item_embeddings_svd(np.zeros((3, 3)), 2)


def test_split_latent_dims():
    assert split_latent_dims([1, 1], 300) == [150, 150]
    assert split_latent_dims([2000, 810], 300) == [214, 86]
    assert split_latent_dims([10000, 1, 1], 5) == [3, 1, 1]
    with pytest.raises(ConfigError):
        split_latent_dims([1, 1, 1], 2)


@given(st.lists(st.integers(1, 500), min_size=1, max_size=8), st.integers(8, 400))
def test_split_latent_dims_properties(sizes, total):
    d = split_latent_dims(sizes, total)
    assert sum(d) == total and min(d) >= 1


def tiny_model(sizes=(3, 2), latent=(2, 1), seed=0, vae_hidden=4):
    assign = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    assign = np.random.default_rng(seed).permutation(assign)
    cl = ClusterModel(assign, list(latent))
    return LatentModel.create(cl, hidden=(2,), vae_hidden_total=vae_hidden, rng=np.random.default_rng(seed), emb_dim=2)


def test_scatter_is_bijection():
    m = tiny_model()
    members = np.concatenate(m.clusters.members)
    assert sorted(members.tolist()) == list(range(m.clusters.n_items))
    # decoder biases tagged per item land on the right global slot
    for c, idx in enumerate(m.clusters.members):
        m.params[f"dec{c}.W1"][:] = 0.0
        m.params[f"dec{c}.b1"][:] = idx + 100.0
    out = decode(m, np.zeros((1, m.clusters.latent_total))).data[0]
    np.testing.assert_array_equal(out, np.arange(m.clusters.n_items) + 100.0)


def test_zero_decoder_gives_index_tiebreak_order():
    from diffrec.evaluate import rank_items
    m = tiny_model()
    for k in m.params:
        if k.startswith("dec"):
            m.params[k][:] = 0.0
    s = decode(m, np.ones((1, m.clusters.latent_total))).data[0]
    assert rank_items(s, None, 5).tolist() == [0, 1, 2, 3, 4]


def test_encode_deterministic_uses_means():
    m = tiny_model()
    x = np.array([[1.0, 0, 1, 0, 1]])
    z1, stats = encode(m, x, deterministic=True)
    z2, _ = encode(m, x, deterministic=True)
    assert np.array_equal(z1.data, z2.data)
    np.testing.assert_array_equal(z1.data, np.concatenate([s[0].data for s in stats], axis=1))


def test_kl_nonnegative_and_zero_at_standard_normal():
    mu = np.zeros((2, 3))
    assert np.all(gaussian_kl(nn.Tensor(mu), nn.Tensor(mu)).data == 0.0)
    rng = np.random.default_rng(0)
    assert np.all(gaussian_kl(nn.Tensor(rng.standard_normal((4, 3))),
                              nn.Tensor(rng.standard_normal((4, 3)))).data > 0)


@given(st.floats(-20, 20))
def test_multinomial_term_shift_invariant_per_category(c):
    m = tiny_model()
    x = np.array([[1.0, 0, 1, 0, 1]])
    base = vae_terms(m, x, None, 0.0, deterministic=True)[2].data
    m.params["dec0.b1"] = m.params["dec0.b1"] + c
    np.testing.assert_allclose(vae_terms(m, x, None, 0.0, deterministic=True)[2].data, base, atol=1e-9)


def test_vae_loss_gradient_check():
    m = tiny_model(latent=(1, 1), seed=1, vae_hidden=2)
    vae_keys = [k for k in m.params if not k.startswith("den")]
    sub = nn.ParamStore({k: m.params[k] for k in vae_keys})
    assert sub.n_params() <= 50
    x = np.array([[1.0, 0, 1, 0, 1], [0, 1, 1, 0, 0]])

    def loss(p):
        return vae_loss(m, x, np.random.default_rng(7), 0.3, params=p)

    with nn.GradTape() as tape:
        w = tape.watch(m.params)
        L = loss(w)
    g = tape.gradient(L, w)
    fd = finite_diff_grad(lambda: float(loss(m.params).data), sub)
    assert rel_err([g[k] for k in vae_keys], [fd[k] for k in vae_keys]) < 1e-4


def test_gamma_zero_kl_contributes_nothing():
    m = tiny_model(seed=2)
    x = np.array([[1.0, 0, 1, 0, 1]])

    def grads(gamma, kl_only):
        with nn.GradTape() as tape:
            w = tape.watch(m.params)
            neg, _, nll, kl = vae_terms(m, x, np.random.default_rng(3), gamma, params=w)
            L = nn.mean(nn.sub(neg, nll)) if kl_only else nn.mean(neg)
        return tape.gradient(L, w) if L.requires_grad else None

    assert grads(0.0, True) is None or all(not v.any() for v in grads(0.0, True).values())
    g0 = grads(0.0, False)
    with nn.GradTape() as tape:
        w = tape.watch(m.params)
        nll = vae_terms(m, x, np.random.default_rng(3), 0.0, params=w)[2]
        L = nn.mean(nll)
    gn = tape.gradient(L, w)
    for k in g0:
        assert np.array_equal(g0[k], gn[k])


def test_gamma_anneal_linear():
    assert gamma_at(0, 0.3, 100) == 0.0
    assert gamma_at(50, 0.3, 100) == pytest.approx(0.15)
    assert gamma_at(500, 0.3, 100) == 0.3
    assert gamma_at(0, 0.3, 0) == 0.3


def test_param_counts_formula_matches_tensors():
    m = tiny_model()
    c = count_params(m)
    f = latent_param_counts(m.clusters.sizes, m.clusters.latent_dims, m.vae_hidden, (2,), 2)
    assert c == f


def test_ml1m_shaped_reduction():
    full = diffrec_param_count(2810)
    assert full == 3_622_210
    for sizes in ([1405, 1405], [2500, 310], [2809, 1]):
        lat = latent_param_counts(sizes, split_latent_dims(sizes, 300), [150, 150])
        assert lat["total"] < full
        assert 1 - lat["total"] / full >= 0.30


def test_latent_smaller_only_above_break_even():
    # totals grow by 301 (latent) vs 1201 (full) params per item at the default widths
    def smaller(n):
        sizes = [n // 2, n - n // 2]
        return latent_param_counts(sizes, split_latent_dims(sizes, 300), [150, 150])["total"] \
            < diffrec_param_count(n)
    assert not smaller(500) and not smaller(551)
    assert smaller(552) and smaller(2810)


@given(st.integers(200, 5000), st.integers(0, 10_000))
def test_more_clusters_never_more_vae_params(n, seed):
    rng = np.random.default_rng(seed)
    prev = None
    for C in (1, 2, 3, 4, 5, 6):
        cuts = np.sort(rng.choice(np.arange(1, n), C - 1, replace=False)) if C > 1 else []
        sizes = np.diff(np.concatenate([[0], cuts, [n]])).tolist()
        width = 300 // C
        c = latent_param_counts(sizes, split_latent_dims(sizes, 300), [width] * C)
        ed = c["encoders"] + c["decoders"]
        if prev is not None:
            assert ed <= prev
        prev = ed


def _toy(n_users=80, n_items=40, seed=0):
    rng = np.random.default_rng(seed)
    u, i = np.nonzero(rng.random((n_users, n_items)) < 0.15)
    return InteractionMatrix.from_arrays(n_users, n_items, u, i)


def test_build_clusters_covers_items():
    cl = build_clusters(_toy(), 3, latent_total=30, embed_dim=8)
    assert sum(cl.sizes) == 40 and cl.latent_total == 30 and min(cl.sizes) >= 1


def test_cluster_file(tmp_path):
    cl = ClusterModel(np.array([1, 0, 1]), [2, 3])
    cl.write(tmp_path / "c.tsv", ["a", "b", "c"])
    assert (tmp_path / "c.tsv").read_text() == "a\t1\nb\t0\nc\t1\n"


def test_latent_training_runs_and_is_deterministic():
    data = _toy()
    cfg = LatentConfig(epochs=3, batch_size=32, hidden=(16,), clusters=2, latent_total=12, vae_hidden=12,
                       cluster_embed_dim=8)
    a = train_latent(data, cfg)
    b = train_latent(data, cfg)
    assert np.isfinite([e.loss for e in a.log]).all()
    assert np.isfinite(a.lam) and a.lam > 0
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
    s = infer_latent(a.model, a.sched, data.dense([0, 1]))
    assert s.shape == (2, 40) and np.array_equal(s, infer_latent(a.model, a.sched, data.dense([0, 1])))


def test_single_cluster_matches_unclustered_pipeline():
    data = _toy()
    cfg = LatentConfig(epochs=2, batch_size=40, hidden=(8,), clusters=1, latent_total=10, vae_hidden=10, lam="0.5")
    a = train_latent(data, cfg)
    cl = ClusterModel(np.zeros(40, dtype=int), [10])
    rng = np.random.default_rng(cfg.seed)
    m = LatentModel.create(cl, cfg.hidden, 10, rng, cfg.emb_dim, 0.0)
    b = train_latent(data, cfg, model=m, rng=rng)
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()


def test_explicit_lambda_and_bad_lambda():
    assert LatentConfig(lam="0.1").lam == "0.1"
    with pytest.raises(ConfigError):
        LatentConfig(lam="-1")
    with pytest.raises(ConfigError):
        LatentConfig(lam="abc")
