import numpy as np
import pytest

from estloco import nn
from estloco.env import BIPED_DIMS
from estloco.policy import (GROUP_NAMES, LOG_STD_BOUNDS, ActorCritic, Batch, LossWeights, NetworkSizes,
                            actor_forward, auto_encoder_loss, critic_forward, estimation_loss, gaussian_log_prob,
                            kl_standard_normal, loss_and_grad, make_comparison_group)
from oracles import central_difference, diag_gaussian_density, relative_error, straight_line_mlp

D = BIPED_DIMS
SMALL = NetworkSizes((8, 6), (7, 5), (5, 6), (6, 4), -0.5)


def make(group, sizes=None, dims=D):
    return ActorCritic(make_comparison_group(group), dims, sizes)


def random_batch(ac, rng, n=5):
    d = ac.dims
    return Batch(rng.standard_normal((n, d.obs)), rng.standard_normal((n, d.history, d.obs)),
                 rng.standard_normal((n, d.priv)), rng.standard_normal((n, d.cmd)),
                 rng.standard_normal((n, d.est)), rng.standard_normal((n, d.act)),
                 rng.standard_normal(n) - 3.0, rng.standard_normal((n, ac.spec.latent_dim)),
                 rng.standard_normal(n), rng.standard_normal(n))


# -- comparison groups ----------------------------------------------------------

EXPECTED = {
    "EstNet": (("velocity",), 0, False),
    "Key1": (("velocity",), 16, True),
    "Key2": (("velocity", "foot_hmap"), 16, True),
    "FullEst": (("velocity", "height", "foot_hmap"), 16, True),
    "IrrEst": (("height",), 16, True),
    "Implicit": ((), 16, True),
}
EST_WIDTH = {"EstNet": 2, "Key1": 2, "Key2": 12, "FullEst": 13, "IrrEst": 1, "Implicit": 0}


@pytest.mark.parametrize("group", GROUP_NAMES)
def test_group_table(group):
    spec = make_comparison_group(group)
    explicit, latent, decoder = EXPECTED[group]
    assert set(spec.explicit) == set(explicit)
    assert (spec.latent_dim, spec.decoder, spec.n_est) == (latent, decoder, EST_WIDTH[group])


def test_unknown_group_rejected():
    with pytest.raises(ValueError):
        make_comparison_group("Oracle")


@pytest.mark.parametrize("group", GROUP_NAMES)
def test_network_widths(group):
    ac = make(group)
    spec = ac.spec
    assert ac.nets["encoder"].widths[0] == 50 * 15
    assert ac.nets["encoder"].n_out == spec.n_est + 2 * spec.latent_dim
    assert ac.nets["backbone"].widths[0] == 15 + spec.n_est + spec.latent_dim + 4
    assert ac.nets["backbone"].n_out == 4
    assert ac.nets["critic"].widths[0] == 15 + 24 + 4
    assert ("decoder" in ac.nets) == spec.decoder
    if spec.decoder:
        assert ac.nets["decoder"].widths[0] == spec.n_est + spec.latent_dim
        assert ac.nets["decoder"].n_out == 15
    assert ac.n_params == sum(n.n_params for n in ac.nets.values()) + 4


@pytest.mark.parametrize("group", GROUP_NAMES)
def test_backbone_groups_partition_input(group):
    ac = make(group)
    idx = np.concatenate(list(ac.backbone_groups().values()))
    assert np.array_equal(np.sort(idx), np.arange(ac.backbone_width))


# -- forward --------------------------------------------------------------------

def test_implicit_has_no_estimate_and_sixteen_latents():
    ac = make("Implicit")
    rng = np.random.default_rng(0)
    p = ac.init_params(rng)
    out = actor_forward(ac, p, rng.standard_normal((3, 50, 15)), rng.standard_normal((3, 15)),
                        rng.standard_normal((3, 4)))
    assert out.est.shape == (3, 0) and out.z.shape == (3, 16)


def test_estnet_has_no_reconstruction():
    ac = make("EstNet")
    rng = np.random.default_rng(0)
    out = actor_forward(ac, ac.init_params(rng), np.zeros((2, 50, 15)), np.zeros((2, 15)), np.zeros((2, 4)))
    assert out.recon is None and out.z.shape == (2, 0) and out.est.shape == (2, 2)


def test_history_shape_checked():
    ac = make("FullEst")
    with pytest.raises(ValueError):
        actor_forward(ac, ac.init_params(np.random.default_rng(0)), np.zeros((2, 49, 15)), np.zeros((2, 15)),
                      np.zeros((2, 4)))


def test_deterministic_forward_repeats():
    ac = make("Key2")
    rng = np.random.default_rng(1)
    p = ac.init_params(rng) + 0.1 * rng.standard_normal(ac.n_params)
    args = (rng.standard_normal((4, 50, 15)), rng.standard_normal((4, 15)), rng.standard_normal((4, 4)))
    a, b = actor_forward(ac, p, *args), actor_forward(ac, p, *args)
    for x, y in zip(a, b):
        assert (x is None and y is None) or np.array_equal(x, y)
    assert np.array_equal(a.action, a.mean) and not a.eps_z.any()


def test_action_mean_bounded():
    ac = make("FullEst")
    rng = np.random.default_rng(2)
    p = ac.init_params(rng) + 3.0 * rng.standard_normal(ac.n_params)
    out = actor_forward(ac, p, 5 * rng.standard_normal((16, 50, 15)), 5 * rng.standard_normal((16, 15)),
                        rng.standard_normal((16, 4)))
    assert np.all(np.abs(out.mean) <= 1.0)


def test_log_prob_matches_density_oracle():
    ac = make("FullEst")
    rng = np.random.default_rng(3)
    p = ac.init_params(rng)
    p[ac.slices["log_std"]] = [-0.3, 0.2, -1.0, 0.5]
    out = actor_forward(ac, p, rng.standard_normal((6, 50, 15)), rng.standard_normal((6, 15)),
                        rng.standard_normal((6, 4)), rng=rng, stochastic=True)
    std = np.exp(p[ac.slices["log_std"]])
    for i in range(6):
        ref = np.log(diag_gaussian_density(out.action[i], out.mean[i], std))
        assert out.log_prob[i] == pytest.approx(ref, abs=1e-10)


def test_log_prob_function_direct():
    x, m, ls = np.array([0.4, -1.0]), np.array([0.0, 0.5]), np.array([0.1, -0.7])
    ref = np.log(diag_gaussian_density(x, m, np.exp(ls)))
    assert gaussian_log_prob(x, m, ls) == pytest.approx(ref, abs=1e-12)


def test_critic_matches_duplicate_evaluator_and_zero_net():
    ac = make("FullEst", SMALL)
    rng = np.random.default_rng(4)
    p = rng.standard_normal(ac.n_params)
    obs, priv, cmd = rng.standard_normal((3, 15)), rng.standard_normal((3, 24)), rng.standard_normal((3, 4))
    ref = straight_line_mlp(p[ac.slices["critic"]], ac.nets["critic"].widths, np.hstack([obs, priv, cmd]))[:, 0]
    assert np.allclose(critic_forward(ac, p, obs, priv, cmd), ref, atol=1e-12)
    assert not critic_forward(ac, np.zeros(ac.n_params), obs, priv, cmd).any()


def test_project_clamps_log_std():
    ac = make("Implicit", SMALL)
    p = np.zeros(ac.n_params)
    p[ac.slices["log_std"]] = [-9.0, 0.0, 3.0, 1.0]
    ac.project(p)
    assert np.array_equal(p[ac.slices["log_std"]], [LOG_STD_BOUNDS[0], 0.0, LOG_STD_BOUNDS[1], 1.0])


# -- auxiliary losses -----------------------------------------------------------

def test_estimation_loss_hand_values():
    w = LossWeights()
    spec = make_comparison_group("EstNet")
    target = np.zeros((1, 13))
    assert estimation_loss(np.array([[0.1, 0.0]]), target, spec, w) == pytest.approx(0.005, abs=1e-15)
    assert estimation_loss(np.zeros((1, 2)), target, spec, w) == 0.0
    assert estimation_loss(np.zeros((4, 0)), np.ones((4, 13)), make_comparison_group("Implicit"), w) == 0.0


def test_estimation_loss_weights_each_slice():
    w = LossWeights()
    spec = make_comparison_group("FullEst")
    target = np.zeros((1, 13))
    est = np.ones((1, 13))  # layout: velocity 2, height 1, heightmap 10
    assert estimation_loss(est, target, spec, w) == pytest.approx(1.0 + 2.0 + 0.5, abs=1e-14)


def test_estimation_loss_ignores_rest_of_privileged_state():
    # Only the first 13 columns of the privileged vector are targets.
    spec, w = make_comparison_group("FullEst"), LossWeights()
    rng = np.random.default_rng(0)
    est, priv = rng.standard_normal((5, 13)), rng.standard_normal((5, 24))
    other = priv.copy()
    other[:, 13:] = rng.standard_normal((5, 11))
    assert estimation_loss(est, priv[:, :13], spec, w) == estimation_loss(est, other[:, :13], spec, w)


def test_autoencoder_loss_closed_forms():
    w = LossWeights()
    obs = np.ones((3, 15))
    assert auto_encoder_loss(obs.copy(), obs, np.zeros((3, 16)), np.zeros((3, 16)), w) == 0.0
    m = 0.7
    loss = auto_encoder_loss(obs.copy(), obs, np.full((3, 16), m), np.zeros((3, 16)), w)
    assert loss == pytest.approx(w.beta_vae * (16 * m * m / 2) / 16, rel=1e-12)
    assert auto_encoder_loss(None, obs, np.zeros((3, 0)), np.zeros((3, 0)), w) == 0.0


def test_kl_nonnegative_and_zero_only_at_standard_normal():
    rng = np.random.default_rng(6)
    mean, logvar = rng.standard_normal((200, 4)), rng.standard_normal((200, 4))
    assert np.all(kl_standard_normal(mean, logvar) > 0)
    assert np.all(kl_standard_normal(np.zeros((2, 4)), np.zeros((2, 4))) == 0)


# -- composite loss ---------------------------------------------------------------

def test_ratio_one_policy_loss_is_negative_mean_advantage():
    ac = make("FullEst", SMALL, D._replace(history=3))
    rng = np.random.default_rng(7)
    p = ac.init_params(rng)
    b = random_batch(ac, rng)
    est, mu, logvar, _ = ac.encode(p, b.history)
    z = mu + np.exp(0.5 * logvar) * b.eps_z
    mean = ac.backbone_mean(p, ac.backbone_input(b.obs, est, z, b.cmd))
    b = b._replace(old_log_prob=gaussian_log_prob(b.actions, mean, ac.log_std(p)))
    _, _, stats = loss_and_grad(ac, p, b, LossWeights())
    assert stats["policy_loss"] == pytest.approx(-np.mean(b.advantages), abs=1e-12)
    assert abs(stats["approx_kl"]) < 1e-15


@pytest.mark.parametrize("ratio,adv,expected", [(1.3, 1.0, 1.2), (0.5, 1.0, 0.5), (0.5, -1.0, -0.8),
                                                (1.3, -1.0, -1.3)])
def test_clip_surrogate_hand_values(ratio, adv, expected):
    ac = make("Implicit", SMALL, D._replace(history=3))
    rng = np.random.default_rng(8)
    p = ac.init_params(rng)
    b = random_batch(ac, rng, n=1)
    est, mu, logvar, _ = ac.encode(p, b.history)
    z = mu + np.exp(0.5 * logvar) * b.eps_z
    mean = ac.backbone_mean(p, ac.backbone_input(b.obs, est, z, b.cmd))
    logp = gaussian_log_prob(b.actions, mean, ac.log_std(p))
    b = b._replace(old_log_prob=logp - np.log(ratio), advantages=np.array([adv]))
    _, _, stats = loss_and_grad(ac, p, b, LossWeights(clip=0.2))
    assert -stats["policy_loss"] == pytest.approx(expected, abs=1e-12)
    assert -stats["policy_loss"] <= ratio * adv + 1e-12


@pytest.mark.parametrize("group", GROUP_NAMES + ("Plain",))
def test_loss_gradient_matches_finite_differences(group):
    spec = make_comparison_group(group)
    dims = D._replace(history=3 if spec.encoder else 0)
    ac = ActorCritic(spec, dims, SMALL)
    rng = np.random.default_rng(9)
    p = ac.init_params(rng) + 0.3 * rng.standard_normal(ac.n_params)
    b = random_batch(ac, rng)
    w = LossWeights(clip=10.0)  # keep every sample inside the clip window: the loss is smooth there
    _, grad, _ = loss_and_grad(ac, p, b, w)
    num = [central_difference(lambda q: loss_and_grad(ac, q, b, w)[0], p, i) for i in range(ac.n_params)]
    assert relative_error(grad, num, floor=1e-4) < 1e-4


@pytest.mark.parametrize("path", ["policy", "estimation", "reconstruction"])
def test_encoder_receives_gradient_from_each_path(path):
    ac = make("FullEst", SMALL, D._replace(history=3))
    rng = np.random.default_rng(10)
    p = ac.init_params(rng) + 0.3 * rng.standard_normal(ac.n_params)
    b = random_batch(ac, rng)
    zero = dict(c_vel=0.0, c_hmap=0.0, c_height=0.0, beta_vae=0.0, c_pred=0.0, value_coef=0.0, entropy_coef=0.0)
    if path == "policy":
        w = LossWeights(clip=10.0, **zero)
    else:
        b = b._replace(advantages=np.zeros_like(b.advantages))
        keep = {"estimation": ("c_vel", "c_hmap", "c_height"), "reconstruction": ("c_pred",)}[path]
        w = LossWeights(**{**zero, **{k: 1.0 for k in keep}})
    _, grad, _ = loss_and_grad(ac, p, b, w)
    assert np.linalg.norm(grad[ac.slices["encoder"]]) > 1e-6


# -- deployed shapes ----------------------------------------------------------------

@pytest.mark.parametrize("group", GROUP_NAMES)
def test_deployed_network_gradients(group):
    """Sampled-coordinate finite-difference check of every network at deployed widths."""
    ac = make(group)
    rng = np.random.default_rng(12)
    params = ac.init_params(rng)
    for name, spec in ac.nets.items():
        p = params[ac.slices[name]]
        x = rng.standard_normal((3, spec.n_in))
        cot = rng.standard_normal((3, spec.n_out))
        _, cache = nn.forward(p, spec, x, return_cache=True)
        gp, gx = nn.backward(p, spec, cache, cot)
        f_p = lambda q: np.sum(cot * nn.forward(q, spec, x))
        f_x = lambda v: np.sum(cot * nn.forward(p, spec, v))
        pi = rng.choice(spec.n_params, size=40, replace=False)
        xi = rng.choice(x.size, size=min(40, x.size), replace=False)
        assert relative_error(gp[pi], [central_difference(f_p, p, i) for i in pi]) < 1e-4, name
        assert relative_error(gx.ravel()[xi], [central_difference(f_x, x, i) for i in xi]) < 1e-4, name
    f, vjp = ac.backbone_jacobian_fn(params)
    x = rng.standard_normal((2, ac.backbone_width))
    cot = rng.standard_normal((2, 4))
    num = [central_difference(lambda v: np.sum(cot * f(v)), x, i) for i in range(x.size)]
    assert relative_error(vjp(x, cot).ravel(), num) < 1e-4
