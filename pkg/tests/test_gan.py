import numpy as np
import pytest

from kggan import autodiff as ad
from kggan.classifier import SoftmaxClassifier
from kggan.features import FeatureSet
from kggan.gae import ClassEmbeddingTable
from kggan.gan import (
    GanConfig, SeenClassifier, critic_forward, discriminator_loss, generate, generator_forward,
    generator_loss, gradient_penalty, init_discriminator, init_generator, interpolate,
    load_checkpoint, pretrain_seen_classifier, save_checkpoint, synthesize_unseen, train_gan,
)
from kggan.nn import Adam, ParameterSet

import gradcheck
from oracles import critic_np, generator_np, log_softmax_np


def params(arrays):
    return ParameterSet({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


def linear_critic(w_feat, n_cond):
    """A critic whose value is w_feat . x + const (leaky unit kept in its positive region)."""
    return params({"D.W1": np.concatenate([w_feat, np.zeros(n_cond)])[None, :],
                   "D.b1": [1e6], "D.W2": [[1.0]], "D.b2": [0.0]})


def uniform_seen(n, dim):
    return SeenClassifier(SoftmaxClassifier(tuple(f"s{i}" for i in range(n)), np.zeros((n, dim))))


# -- generator ------------------------------------------------------------------------

def test_zero_generator_outputs_zero(rng):
    p = params({"G.W1": np.zeros((6, 5)), "G.b1": np.zeros(6), "G.W2": np.zeros((4, 6)), "G.b2": np.zeros(4)})
    np.testing.assert_array_equal(generate(rng.normal(size=2), rng.normal(size=3), p), np.zeros(4))


def test_generate_is_deterministic_and_non_negative(rng):
    p = init_generator(rng, 2, 3, 8, 5, np.float64)
    z, g = rng.normal(size=(10, 2)), rng.normal(size=(10, 3))
    a, b = generate(z, g, p), generate(z, g, p)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (10, 5) and (a >= 0).all()


@pytest.mark.parametrize("seed", range(5))
def test_generator_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    raw = {"G.W1": rng.normal(size=(7, 5)), "G.b1": rng.normal(size=7),
           "G.W2": rng.normal(size=(4, 7)), "G.b2": rng.normal(size=4)}
    z, g = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    np.testing.assert_allclose(generate(z, g, params(raw)), generator_np(raw, z, g), atol=1e-12)


def test_generator_dimension_error(rng):
    p = init_generator(rng, 2, 3, 8, 5, np.float64)
    with pytest.raises(ad.ShapeError):
        generate(np.zeros(3), np.zeros(3), p)


@pytest.mark.parametrize("seed", range(5))
def test_critic_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    raw = {"D.W1": rng.normal(size=(6, 7)), "D.b1": rng.normal(size=6),
           "D.W2": rng.normal(size=(1, 6)), "D.b2": rng.normal(size=1)}
    x, g = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(critic_forward(params(raw), x, g).data, critic_np(raw, x, g), atol=1e-12)


# -- interpolation and penalty -----------------------------------------------------------------

def test_interpolate_endpoints_and_midpoint(rng):
    x, xh = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_array_equal(interpolate(x, xh, 1.0), x)
    np.testing.assert_array_equal(interpolate(x, xh, 0.0), xh)
    np.testing.assert_array_equal(interpolate([2.0, 0.0], [0.0, 2.0], 0.5), [1.0, 1.0])


def test_interpolate_stays_in_box(rng):
    x, xh = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    out = interpolate(x, xh, rng.uniform(size=(50, 1)))
    assert (out >= np.minimum(x, xh) - 1e-15).all() and (out <= np.maximum(x, xh) + 1e-15).all()


def test_interpolate_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        interpolate(np.zeros(3), np.zeros(4), 0.5)


@pytest.mark.parametrize("norm,expected", [(1.0, 0.0), (3.0, 4.0)])
def test_penalty_of_linear_critic(rng, norm, expected):
    w = rng.normal(size=5)
    d = linear_critic(norm * w / np.linalg.norm(w), 2)
    gp = gradient_penalty(d, rng.normal(size=(8, 5)), rng.normal(size=(8, 2)))
    np.testing.assert_allclose(gp.data, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_penalty_matches_finite_difference_input_gradient(seed):
    rng = np.random.default_rng(seed)
    d, x, g, x_hat, eps = gradcheck.discriminator_instance(rng)
    xt = eps * x + (1 - eps) * x_hat
    h = 1e-6
    fd = np.zeros_like(xt)
    for i in range(xt.shape[0]):
        for j in range(xt.shape[1]):
            up, dn = xt.copy(), xt.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd[i, j] = (critic_np(d, up, g)[i] - critic_np(d, dn, g)[i]) / (2 * h)
    ref = np.mean((np.linalg.norm(fd, axis=1) - 1) ** 2)
    assert abs(gradient_penalty(params(d), xt, g).data - ref) <= 1e-6


def test_penalty_is_non_negative(rng):
    for _ in range(20):
        d = init_discriminator(rng, 4, 3, 6, np.float64)
        assert gradient_penalty(d, rng.normal(size=(5, 4)), rng.normal(size=(5, 3))).data >= 0


# -- losses ---------------------------------------------------------------------------------------

def test_generator_loss_without_classification_term(rng):
    gp, dp = init_generator(rng, 2, 3, 8, 4, np.float64), init_discriminator(rng, 4, 3, 8, np.float64)
    z, g = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    labels = ["s0"] * 6
    loss = generator_loss(z, labels, g, gp, dp, uniform_seen(2, 4), lam=0.0)
    x_hat = generator_forward(gp, z, g)
    np.testing.assert_allclose(loss.data, -critic_forward(dp, x_hat, g).data.mean(), rtol=1e-14)


def test_uniform_classifier_term_is_lambda_log_ten(rng):
    gp, dp = init_generator(rng, 2, 3, 8, 4, np.float64), init_discriminator(rng, 4, 3, 8, np.float64)
    z, g = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    labels = [f"s{i}" for i in range(6)]
    seen = uniform_seen(10, 4)
    diff = generator_loss(z, labels, g, gp, dp, seen, 0.01).data - generator_loss(z, labels, g, gp, dp, seen, 0.0).data
    np.testing.assert_allclose(diff, -0.01 * np.log(0.1), rtol=1e-12)
    assert abs(diff - 0.02303) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_generator_loss_matches_term_oracle(seed):
    rng = np.random.default_rng(seed)
    p, d, z, g, theta, y = gradcheck.generator_instance(rng)
    seen = SeenClassifier(SoftmaxClassifier(("a", "b", "c"), theta))
    labels = [("a", "b", "c")[i] for i in y]
    got = generator_loss(z, labels, g, params(p), params(d), seen, 0.01).data
    x_hat = generator_np(p, z, g)
    ref = -critic_np(d, x_hat, g).mean() - 0.01 * log_softmax_np(x_hat @ theta.T)[np.arange(len(y)), y].mean()
    assert abs(got - ref) <= 1e-10


def test_generator_loss_rejects_unseen_label(rng):
    gp, dp = init_generator(rng, 2, 3, 8, 4, np.float64), init_discriminator(rng, 4, 3, 8, np.float64)
    with pytest.raises(ValueError, match="u9"):
        generator_loss(np.zeros((1, 2)), ["u9"], np.zeros((1, 3)), gp, dp, uniform_seen(2, 4), 0.01)


def test_zero_networks_give_minus_beta():
    z = lambda *s: np.zeros(s)
    dp = params({"D.W1": z(6, 7), "D.b1": z(6), "D.W2": z(1, 6), "D.b2": z(1)})
    loss = discriminator_loss(z(5, 4), z(5, 3), z(5, 4), 0.3, dp, beta=10.0)
    np.testing.assert_allclose(loss.data, -10.0)


def test_identical_batches_cancel(rng):
    dp = init_discriminator(rng, 4, 3, 8, np.float64)
    x, g = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    assert discriminator_loss(x, g, x.copy(), 0.5, dp, beta=0.0).data == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_discriminator_loss_matches_term_oracle(seed):
    rng = np.random.default_rng(seed)
    d, x, g, x_hat, eps = gradcheck.discriminator_instance(rng)
    got = discriminator_loss(x, g, x_hat, eps, params(d), beta=10.0).data
    assert abs(got - gradcheck.discriminator_loss_np(d, x, g, x_hat, eps, 10.0)) <= 1e-8


def test_negative_beta_is_rejected(rng):
    dp = init_discriminator(rng, 4, 3, 8, np.float64)
    with pytest.raises(ValueError):
        discriminator_loss(np.zeros((1, 4)), np.zeros((1, 3)), np.zeros((1, 4)), 0.5, dp, beta=-1.0)
    with pytest.raises(ValueError):
        GanConfig(beta=-1.0)


@pytest.mark.parametrize("seed", range(10))
def test_gan_gradients_match_finite_differences(seed):
    assert gradcheck.generator_case(seed) <= 1e-4
    assert gradcheck.discriminator_case(seed) <= 1e-4
    assert gradcheck.discriminator_case(seed, beta=10.0) <= 1e-3
    assert gradcheck.penalty_case(seed) <= 1e-3


def test_small_critic_step_widens_the_gap(rng):
    dp = init_discriminator(rng, 4, 3, 8, np.float64)
    x, xh, g = rng.normal(size=(16, 4)) + 1, rng.normal(size=(16, 4)), rng.normal(size=(16, 3))
    before = discriminator_loss(x, g, xh, 0.5, dp, beta=0.0).data
    Adam(dp, lr=1e-4).step(dp.grads(ad.neg(discriminator_loss(x, g, xh, 0.5, dp, beta=0.0))))
    assert discriminator_loss(x, g, xh, 0.5, dp, beta=0.0).data > before


# -- seen classifier --------------------------------------------------------------------------------

def two_blobs(rng, n=100):
    x = np.concatenate([rng.normal(size=(n, 2)) + [4, 4], rng.normal(size=(n, 2)) - [4, 4]])
    return FeatureSet.build(x, ["a"] * n + ["b"] * n, "seen")


def test_seen_classifier_separates_blobs(rng):
    fs = two_blobs(rng)
    clf = pretrain_seen_classifier(fs)
    assert clf.frozen
    acc = np.mean(np.array(clf.clf.predict(fs.x)) == np.array(fs.labels))
    assert acc >= 0.99


def test_seen_classifier_needs_two_classes(rng):
    with pytest.raises(ValueError):
        pretrain_seen_classifier(FeatureSet.build(rng.normal(size=(5, 2)), ["a"] * 5, "seen"))


def test_untrained_classifier_is_uniform(rng):
    np.testing.assert_allclose(uniform_seen(4, 3).clf.proba(rng.normal(size=(5, 3))), 0.25)


def test_duplicated_samples_give_same_boundary(rng):
    from kggan.classifier import SoftmaxConfig
    fs = two_blobs(rng, 20)
    cfg = SoftmaxConfig(lr=0.05, epochs=50, batch_size=None)
    twice = FeatureSet.concat([fs, fs])
    a = pretrain_seen_classifier(fs, config=cfg).theta
    b = pretrain_seen_classifier(twice, config=cfg).theta
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- training, checkpoints, synthesis ------------------------------------------------------------------

def toy_setup(rng, n_seen=3, dim=4, emb=3):
    labels = [f"s{i}" for i in range(n_seen)]
    x = np.concatenate([np.abs(rng.normal(size=(20, dim))) + i for i in range(n_seen)])
    fs = FeatureSet.build(x, [y for y in labels for _ in range(20)], "seen")
    names = tuple(labels) + ("u0", "u1")
    table = ClassEmbeddingTable(names, rng.normal(size=(len(names), emb)), np.zeros((len(names), 0)))
    cfg = GanConfig(noise_dim=2, feature_dim=dim, hidden_g=8, hidden_d=8, batch_size=8, steps=4, lr=1e-3)
    return fs, table, cfg


def test_zero_steps_return_glorot_initialisation(rng):
    fs, table, cfg = toy_setup(rng)
    cfg.steps, cfg.init = 0, "glorot"
    ckpt = train_gan(fs, table, cfg)
    init_rng = np.random.default_rng(cfg.seed)
    g0 = init_generator(init_rng, 2, 3, 8, 4, np.float32).arrays()
    d0 = init_discriminator(init_rng, 4, 3, 8, np.float32).arrays()
    for k in g0:
        np.testing.assert_array_equal(ckpt.generator[k], g0[k])
    for k in d0:
        np.testing.assert_array_equal(ckpt.discriminator[k], d0[k])
    assert ckpt.step == 0 and ckpt.history == []


def test_data_initialisation_standardises_the_outer_layers(rng):
    fs, table, cfg = toy_setup(rng)
    cfg.steps = 0
    ckpt = train_gan(fs, table, cfg)
    plain = train_gan(fs, table, GanConfig.from_dict({**cfg.to_dict(), "init": "glorot"}))
    x = fs.x.astype(np.float32)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    g, g0 = ckpt.generator, plain.generator
    np.testing.assert_allclose(g["G.b2"], mu, rtol=1e-6)
    np.testing.assert_allclose(g["G.W2"], g0["G.W2"] * sd[:, None], rtol=1e-6)
    np.testing.assert_array_equal(g["G.W1"], g0["G.W1"])
    d, d0 = ckpt.discriminator, plain.discriminator
    # the critic's first layer sees standardised features: W x + b == W0 (x - mu) / sd + b0
    xs = x[:5]
    got = xs @ d["D.W1"][:, :4].T + d["D.b1"]
    want = ((xs - mu) / sd) @ d0["D.W1"][:, :4].T + d0["D.b1"]
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)
    np.testing.assert_array_equal(d["D.W1"][:, 4:], d0["D.W1"][:, 4:])
    np.testing.assert_array_equal(d["D.W2"], d0["D.W2"])


def test_unknown_init_is_rejected():
    with pytest.raises(ValueError, match="init"):
        GanConfig(init="he")


def test_training_is_deterministic_with_finite_log(rng):
    fs, table, cfg = toy_setup(rng)
    a, b = train_gan(fs, table, cfg), train_gan(fs, table, cfg)
    for k in a.generator:
        np.testing.assert_array_equal(a.generator[k], b.generator[k])
    assert len(a.history) == 4
    assert all(np.isfinite([h["L_G"], h["L_D"], h["GP"]]).all() for h in a.history)


def test_missing_seen_embedding(rng):
    fs, table, cfg = toy_setup(rng)
    short = ClassEmbeddingTable(table.classes[1:], table.gc[1:], table.ga[1:])
    with pytest.raises(ValueError, match="s0"):
        train_gan(fs, short, cfg)


def test_feature_dimension_mismatch(rng):
    fs, table, cfg = toy_setup(rng)
    cfg.feature_dim = 9
    with pytest.raises(ValueError, match="dimension"):
        train_gan(fs, table, cfg)


def test_checkpoint_round_trip_and_resume(rng, tmp_path):
    fs, table, cfg = toy_setup(rng)
    full = train_gan(fs, table, cfg)
    cfg_half = GanConfig(**{**cfg.to_dict(), "steps": 2})
    half = train_gan(fs, table, cfg_half, seen_clf=full.seen_classifier)
    save_checkpoint(half, tmp_path / "g.ckpt")
    assert (tmp_path / "g.ckpt").read_bytes().startswith(b"KGGANCKPT")
    back = load_checkpoint(tmp_path / "g.ckpt")
    assert back.step == 2
    for k in half.generator:
        np.testing.assert_array_equal(back.generator[k], half.generator[k])
    resumed = train_gan(fs, table, cfg, resume=back)
    assert resumed.step == 4
    for k in full.generator:
        np.testing.assert_array_equal(resumed.generator[k], full.generator[k])
    for k in full.discriminator:
        np.testing.assert_array_equal(resumed.discriminator[k], full.discriminator[k])
    assert [h["L_G"] for h in resumed.history] == [h["L_G"] for h in full.history[2:]]


def test_periodic_checkpoints(rng):
    fs, table, cfg = toy_setup(rng)
    cfg.checkpoint_every = 2
    seen = []
    train_gan(fs, table, cfg, on_checkpoint=lambda c: seen.append(c.step))
    assert seen == [2, 4]


def test_synthesis_counts_and_reproducibility(rng):
    fs, table, cfg = toy_setup(rng)
    ckpt = train_gan(fs, table, cfg)
    syn = synthesize_unseen(ckpt, table, ["u0", "u1"], 7, seed=3)
    assert len(syn) == 14 and syn.provenance == ("synthetic",) * 14
    assert syn.labels == ("u0",) * 7 + ("u1",) * 7
    assert synthesize_unseen(ckpt, table, ["u0", "u1"], 7, seed=3).digest() == syn.digest()
    assert synthesize_unseen(ckpt, table, ["u0", "u1"], 7, seed=4).digest() != syn.digest()


def test_empty_synthesis_keeps_schema(rng):
    fs, table, cfg = toy_setup(rng)
    syn = synthesize_unseen(train_gan(fs, table, cfg), table, ["u0"], 0)
    assert len(syn) == 0 and syn.dim == 4


def test_twenty_five_unseen_classes(rng):
    fs, _, cfg = toy_setup(rng)
    names = [f"s{i}" for i in range(3)] + [f"u{i}" for i in range(25)]
    table = ClassEmbeddingTable(tuple(names), rng.normal(size=(28, 3)), np.zeros((28, 0)))
    syn = synthesize_unseen(train_gan(fs, table, cfg), table, names[3:], 300)
    assert syn.x.shape == (7500, 4)


def test_shared_noise_and_equal_embeddings_give_equal_features(rng):
    fs, table, cfg = toy_setup(rng)
    gc = table.gc.copy()
    gc[4] = gc[3]
    twin = ClassEmbeddingTable(table.classes, gc, table.ga)
    ckpt = train_gan(fs, twin, cfg)
    syn = synthesize_unseen(ckpt, twin, ["u0", "u1"], 5, shared_noise=True)
    np.testing.assert_array_equal(syn.rows_of("u0"), syn.rows_of("u1"))


def test_synthesis_needs_embeddings(rng):
    fs, table, cfg = toy_setup(rng)
    with pytest.raises(ValueError, match="zz"):
        synthesize_unseen(train_gan(fs, table, cfg), table, ["zz"], 3)
