import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maic import arm as A
from maic import mvae as M

N_PIX, N_J = 25, 3


def tiny(seed=0, mask=None):
    return M.init_model(N_PIX, N_J, latent_dim=4, hidden_enc=6, hidden_q=5, hidden_v=7, seed=seed,
                        precision_mask=mask)


@pytest.fixture
def batch(rng):
    return rng.uniform(0, 1, (4, N_PIX)), rng.normal(0, 0.5, (4, N_J))


@pytest.fixture(scope="module")
def image_data():
    arm, cam = A.ArmModel(), A.CameraConfig(16, 16)
    rng = np.random.default_rng(2)
    X_q = np.array([0.31, -0.47, 0.38]) + 0.3 * rng.standard_normal((30, 3))
    return arm, cam, X_q


def fd_grad(model, y_v, y_q, kl=0.0, h=1e-5):
    out = {}
    for k, p in model.params.items():
        flat = p.reshape(-1)
        g = np.empty(flat.size)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            lp = M.loss(model, y_v, y_q, kl)
            flat[j] = old - h
            lm = M.loss(model, y_v, y_q, kl)
            flat[j] = old
            g[j] = (lp - lm) / (2 * h)
        out[k] = g.reshape(p.shape)
    return out


def test_model_validation():
    m = tiny()
    bad = dict(m.params)
    bad["Wq2"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        M.MvaeModel(bad, m.precision_mask)
    with pytest.raises(ValueError):
        M.MvaeModel(m.params, -np.ones(N_PIX))
    with pytest.raises(ValueError):
        M.MvaeModel({k: v for k, v in m.params.items() if k != "bv2"}, m.precision_mask)
    with pytest.raises(ValueError):
        M.MvaeModel(m.params, m.precision_mask, visual_variance=np.zeros(N_PIX))
    assert (m.latent_dim, m.n_pixels, m.n_joints) == (4, N_PIX, N_J)
    with pytest.raises(ValueError):
        M.TrainConfig(learning_rate=-1.0)


def test_image_dataset(image_data):
    arm, cam, X_q = image_data
    V1, Q1 = M.build_image_dataset(arm, cam, X_q, n_jitter=2, seed=4)
    V2, Q2 = M.build_image_dataset(arm, cam, X_q, n_jitter=2, seed=4)
    assert np.array_equal(V1, V2) and np.array_equal(Q1, Q2)
    assert len(V1) == len(X_q) * 3 and V1.shape[1] == 256
    assert np.array_equal(Q1[: len(X_q)], X_q)
    mask = M.precision_mask(V1).reshape(16, 16)
    assert mask[0, 0] == 0 and mask[-1, -1] == 0 and mask.max() > 0


def test_precision_mask_examples(rng):
    assert np.array_equal(M.precision_mask(np.ones((5, 4))), np.zeros(4))
    X = np.zeros((4, 2))
    X[:2, 0] = 1.0
    assert M.precision_mask(X)[0] == pytest.approx(4.0)
    Y = rng.uniform(0, 1, (10, 6))
    assert np.allclose(M.precision_mask(Y), M.precision_mask(Y[rng.permutation(10)]), rtol=1e-12, atol=0)
    with pytest.raises(ValueError):
        M.precision_mask(np.ones((1, 3)))


def test_loss_zero_for_perfect_reconstruction():
    m = tiny()
    m.params["We1"][:] = 0.0  # constant latent, so targets can be the model's own outputs
    z = M.encode(m, np.zeros(N_PIX), np.zeros(N_J))
    y_v, y_q = M.decode_v(m, z)[None], M.decode_q(m, z)[None]
    assert M.loss(m, y_v, y_q) == 0.0


def test_loss_matches_elementwise_evaluation(rng, batch):
    y_v, y_q = batch
    for mask in (None, rng.uniform(0, 3, N_PIX)):
        m = tiny(1, mask)
        pi = np.zeros(N_PIX) if mask is None else mask
        total_v = total_q = 0.0
        for i in range(4):
            z = M.encode(m, y_v[i], y_q[i])
            gv, gq = M.decode_v(m, z), M.decode_q(m, z)
            for p in range(N_PIX):
                total_v += ((1 + pi[p]) * gv[p] - y_v[i, p]) ** 2
            for j in range(N_J):
                total_q += (gq[j] - y_q[i, j]) ** 2
        expected = total_v / (4 * N_PIX) + total_q / (4 * N_J)
        assert M.loss(m, y_v, y_q) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("kl", [0.0, 0.3])
def test_gradients_match_finite_differences(rng, batch, kl):
    m = tiny(2, rng.uniform(0, 3, N_PIX))
    val, g = M.loss_and_grad(m, *batch, kl_weight=kl)
    assert val == pytest.approx(M.loss(m, *batch, kl), abs=1e-14)
    fd = fd_grad(m, *batch, kl)
    for k in M.PARAM_NAMES:
        assert np.linalg.norm(g[k] - fd[k]) <= 1e-4 * max(np.linalg.norm(fd[k]), 1e-8), k


def test_training_with_zero_rate_changes_nothing(batch):
    m = tiny()
    out, hist = M.train(m, *batch, M.TrainConfig(epochs=3, batch_size=2, learning_rate=0.0))
    assert all(np.array_equal(out.params[k], m.params[k]) for k in M.PARAM_NAMES) and len(hist) == 3


def test_training_is_deterministic_and_decreases(image_data):
    arm, cam, X_q = image_data
    V, Q = M.build_image_dataset(arm, cam, X_q, n_jitter=1)
    m = M.init_model(V.shape[1], 3, latent_dim=4, hidden_enc=16, hidden_q=8, hidden_v=16,
                     precision_mask=M.precision_mask(V))
    cfg = M.TrainConfig(epochs=60, batch_size=8, learning_rate=1e-2, seed=3)
    a, ha = M.train(m, V, Q, cfg)
    b, hb = M.train(m, V, Q, cfg)
    assert np.array_equal(ha, hb) and all(np.array_equal(a.params[k], b.params[k]) for k in M.PARAM_NAMES)
    assert ha[-1] < ha[0]
    assert a.meta["train"]["epochs"] == 60
    ma = M.moving_average(ha, 20)
    assert ma[-1] < ma[0]


def test_training_divergence_names_the_epoch(batch):
    y_v, y_q = batch
    y_q = y_q.copy()
    y_q[0, 0] = np.nan
    with pytest.raises(M.TrainingDiverged) as info:
        M.train(tiny(), y_v, y_q, M.TrainConfig(epochs=2, batch_size=4))
    assert info.value.epoch == 0


def test_training_input_checks(batch):
    with pytest.raises(ValueError):
        M.train(tiny(), *batch, M.TrainConfig(batch_size=10))
    with pytest.raises(ValueError):
        M.train(tiny(), batch[0], batch[1][:2], M.TrainConfig(batch_size=2))


def test_decoders_are_deterministic_and_bounded(rng):
    m = tiny(3)
    z = rng.normal(size=4)
    assert np.array_equal(M.decode_q(m, z), M.decode_q(m, z))
    imgs = M.decode_v(m, rng.normal(0, 5, (1000, 4)))
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_encode_shapes(batch):
    m = tiny()
    y_v, y_q = batch
    assert M.encode(m, y_v, y_q).shape == (4, 4)
    assert np.allclose(M.encode(m, y_v[0].reshape(5, 5), y_q[0]), M.encode(m, y_v, y_q)[0])


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["q", "v"]), st.integers(0, 10_000))
def test_jacobian_transpose_product_matches_finite_differences(decoder, seed):
    rng = np.random.default_rng(seed)
    m = tiny(seed % 7)
    z = rng.normal(size=4)
    f = (lambda x: M.decode_q(m, x)) if decoder == "q" else (lambda x: M.decode_v(m, x))
    r = rng.normal(size=N_J if decoder == "q" else N_PIX)
    h = 1e-5
    J = np.stack([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    got = M.jacobian_transpose_product(m, decoder, z, r)
    assert np.linalg.norm(got - J.T @ r) <= 1e-4 * max(np.linalg.norm(J.T @ r), 1e-10)


def test_jacobian_transpose_product_edge_cases(rng):
    m = tiny()
    z = rng.normal(size=4)
    assert np.array_equal(M.jacobian_transpose_product(m, "q", z, np.zeros(N_J)), np.zeros(4))
    # with tiny first-layer weights the joint decoder is affine in z to first order
    m.params["Wq1"] *= 1e-7
    m.params["bq1"][:] = 0.0
    r = rng.normal(size=N_J)
    lin = m.params["Wq1"] @ (m.params["Wq2"] @ r)
    assert np.allclose(M.jacobian_transpose_product(m, "q", z, r), lin, rtol=1e-10, atol=0)
    with pytest.raises(ValueError):
        M.jacobian_transpose_product(m, "q", z, np.zeros(2))
    with pytest.raises(ValueError):
        M.jacobian_transpose_product(m, "x", z, r)


def test_predict_image_applies_the_mask(rng):
    mask = rng.uniform(0, 2, N_PIX)
    m = tiny(0, mask)
    z = rng.normal(size=4)
    assert np.allclose(M.predict_image(m, z), (1 + mask) * M.decode_v(m, z))


def test_visual_variance_floor(batch):
    m = M.fit_visual_variance(tiny(), *batch, floor=0.05)
    assert m.visual_variance.shape == (N_PIX,) and m.visual_variance.min() >= 0.05
    perfect = M.fit_visual_variance(tiny(), *batch, floor=1e3)
    assert np.all(perfect.visual_variance == 1e3)


def test_save_and_load(tmp_path, batch):
    m = M.fit_visual_variance(tiny(5, np.linspace(0, 1, N_PIX)), *batch)
    m.meta["loss_history"] = [1.0, 0.5]
    p = tmp_path / "m.bin"
    m.save(p)
    r = M.MvaeModel.load(p)
    assert all(np.array_equal(r.params[k], m.params[k]) for k in M.PARAM_NAMES)
    assert np.array_equal(r.precision_mask, m.precision_mask) and np.array_equal(r.visual_variance,
                                                                                m.visual_variance)
    assert r.meta["loss_history"] == [1.0, 0.5]


def test_moving_average():
    assert np.allclose(M.moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
    assert M.moving_average([1.0], 20).size == 0
