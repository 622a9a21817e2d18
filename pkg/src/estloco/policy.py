"""Asymmetric actor-critic with an estimating auto-encoder in front of the policy.

The encoder ``mu`` reads 0.5 s of past proprioception and emits explicit
estimates (regressed to ground truth) plus the mean and log-variance of an
implicit latent. The decoder ``eta`` predicts the current frame from the
estimates and the sampled latent. The backbone ``psi`` maps the current
frame, estimates, latent and command to a Gaussian action distribution. The
critic sees the current frame, the privileged state and the command.

All parameters live in one flat vector so a single Adam state covers them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .env import BIPED_DIMS, Dims

GROUP_NAMES = ("EstNet", "Key1", "Key2", "FullEst", "IrrEst", "Implicit")

# Explicit slices of the estimation target e_t, in e_t order.
EST_SLICES = {"velocity": slice(0, 2), "height": slice(2, 3), "foot_hmap": slice(3, 13)}
EST_ORDER = ("velocity", "height", "foot_hmap")
LOG_STD_BOUNDS = (-4.0, 1.0)
_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class EstimationSpec:
    name: str
    explicit: tuple = ()
    latent_dim: int = 16
    decoder: bool = True
    encoder: bool = True

    def __post_init__(self):
        unknown = set(self.explicit) - set(EST_SLICES)
        if unknown:
            raise ValueError(f"unknown explicit estimates {sorted(unknown)}")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")
        if self.decoder and not self.encoder:
            raise ValueError("a decoder needs an encoder")
        # Canonical order so that layouts never depend on how the tuple was written.
        object.__setattr__(self, "explicit", tuple(k for k in EST_ORDER if k in self.explicit))

    @property
    def est_index(self) -> np.ndarray:
        """Positions in e_t of the explicitly estimated components."""
        parts = [np.arange(EST_SLICES[k].start, EST_SLICES[k].stop) for k in self.explicit]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)

    @property
    def n_est(self) -> int:
        return int(self.est_index.size)

    def est_layout(self) -> dict:
        """Slice of each explicit estimate inside the estimate vector."""
        out, offset = {}, 0
        for k in self.explicit:
            width = EST_SLICES[k].stop - EST_SLICES[k].start
            out[k] = slice(offset, offset + width)
            offset += width
        return out


def make_comparison_group(name: str) -> EstimationSpec:
    table = {
        "EstNet": EstimationSpec("EstNet", ("velocity",), 0, False),
        "Key1": EstimationSpec("Key1", ("velocity",), 16, True),
        "Key2": EstimationSpec("Key2", ("velocity", "foot_hmap"), 16, True),
        "FullEst": EstimationSpec("FullEst", ("velocity", "foot_hmap", "height"), 16, True),
        "IrrEst": EstimationSpec("IrrEst", ("height",), 16, True),
        "Implicit": EstimationSpec("Implicit", (), 16, True),
        # Internal: plain actor-critic without an encoder (used by the sanity task).
        "Plain": EstimationSpec("Plain", (), 0, False, encoder=False),
    }
    if name not in table:
        raise ValueError(f"unknown comparison group {name!r}; expected one of {GROUP_NAMES}")
    return table[name]


@dataclass(frozen=True)
class NetworkSizes:
    backbone: tuple = (256, 128, 64)
    encoder: tuple = (128, 64, 32)
    decoder: tuple = (32, 64, 128)
    critic: tuple = (256, 128, 64)
    init_log_std: float = -1.0


@dataclass(frozen=True)
class LossWeights:
    c_vel: float = 1.0
    c_hmap: float = 0.5
    c_height: float = 2.0
    beta_vae: float = 50.0
    c_pred: float = 2.0
    clip: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.005

    def estimate_coef(self, key: str) -> float:
        return {"velocity": self.c_vel, "foot_hmap": self.c_hmap, "height": self.c_height}[key]


class ActOutput(NamedTuple):
    action: np.ndarray     # sampled (stochastic) or mean action in normalized units
    log_prob: np.ndarray
    mean: np.ndarray
    est: np.ndarray        # explicit estimates e-hat
    z: np.ndarray          # latent fed to the backbone
    recon: np.ndarray | None
    eps_z: np.ndarray      # reparameterization noise (zeros when deterministic)


class ActorCritic:
    """Network specs plus the flat parameter layout for one comparison group."""

    def __init__(self, spec: EstimationSpec, dims: Dims = BIPED_DIMS, sizes: NetworkSizes | None = None):
        self.spec = spec
        self.dims = dims
        self.sizes = sizes or NetworkSizes()
        s = self.sizes
        n_est, lat = spec.n_est, spec.latent_dim
        if spec.encoder and dims.history < 1:
            raise ValueError("an encoder needs a non-empty history")
        if n_est and spec.est_index.max() >= dims.est:
            raise ValueError("explicit estimate exceeds the estimation target width")
        self.nets = {}
        if spec.encoder:
            self.nets["encoder"] = nn.MlpSpec((dims.history * dims.obs,) + tuple(s.encoder) + (n_est + 2 * lat,))
        if spec.decoder:
            self.nets["decoder"] = nn.MlpSpec((n_est + lat,) + tuple(s.decoder) + (dims.obs,))
        self.backbone_width = dims.obs + n_est + lat + dims.cmd
        self.nets["backbone"] = nn.MlpSpec((self.backbone_width,) + tuple(s.backbone) + (dims.act,))
        self.nets["critic"] = nn.MlpSpec((dims.obs + dims.priv + dims.cmd,) + tuple(s.critic) + (1,))
        self.slices, offset = {}, 0
        for name, net in self.nets.items():
            self.slices[name] = slice(offset, offset + net.n_params)
            offset += net.n_params
        self.slices["log_std"] = slice(offset, offset + dims.act)
        self.n_params = offset + dims.act

    # -- parameters ------------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        params = np.zeros(self.n_params)
        for name, net in self.nets.items():
            gain = 1.0 if name == "critic" else 0.01
            params[self.slices[name]] = nn.init_params(net, rng, output_gain=gain)
        params[self.slices["log_std"]] = self.sizes.init_log_std
        return params

    def part(self, params: np.ndarray, name: str) -> np.ndarray:
        return params[self.slices[name]]

    def project(self, params: np.ndarray) -> np.ndarray:
        """Clamp the log-std block to its admissible range (in place)."""
        ls = params[self.slices["log_std"]]
        np.clip(ls, *LOG_STD_BOUNDS, out=ls)
        return params

    def backbone_groups(self) -> dict:
        """Named index partition of the backbone input."""
        d, spec = self.dims, self.spec
        groups, offset = {"proprioception": np.arange(0, d.obs)}, d.obs
        names = {"velocity": "velocity_estimate", "foot_hmap": "foot_heightmap_estimate",
                 "height": "height_estimate"}
        for key, sl in spec.est_layout().items():
            groups[names[key]] = np.arange(offset + sl.start, offset + sl.stop)
        offset += spec.n_est
        if spec.latent_dim:
            groups["implicit_latent"] = np.arange(offset, offset + spec.latent_dim)
            offset += spec.latent_dim
        groups["command"] = np.arange(offset, offset + d.cmd)
        return groups

    # -- forward pieces --------------------------------------------------------

    def encode(self, params, history):
        """Encoder outputs (e-hat, latent mean, latent log-variance) plus its cache."""
        spec, b = self.spec, history.shape[0]
        if not spec.encoder:
            return np.zeros((b, 0)), np.zeros((b, 0)), np.zeros((b, 0)), None
        flat = history.reshape(b, -1)
        out, cache = nn.forward(self.part(params, "encoder"), self.nets["encoder"], flat, return_cache=True)
        n, lat = spec.n_est, spec.latent_dim
        return out[:, :n], out[:, n:n + lat], out[:, n + lat:], cache

    def backbone_input(self, obs, est, z, cmd) -> np.ndarray:
        return np.concatenate([obs, est, z, cmd], axis=1)

    def backbone_mean(self, params, x, return_cache=False):
        y, cache = nn.forward(self.part(params, "backbone"), self.nets["backbone"], x, return_cache=True)
        mean = np.tanh(y)
        return (mean, cache) if return_cache else mean

    def backbone_jacobian_fn(self, params):
        """Callables for saliency: F(x) and the vector-Jacobian product of F."""
        spec = self.nets["backbone"]
        p = self.part(params, "backbone")

        def f(x):
            return np.tanh(nn.forward(p, spec, x))

        def vjp(x, cot):
            y, cache = nn.forward(p, spec, x, return_cache=True)
            return nn.backward(p, spec, cache, cot * (1.0 - np.tanh(y) ** 2))[1]

        return f, vjp

    def log_std(self, params) -> np.ndarray:
        return np.clip(self.part(params, "log_std"), *LOG_STD_BOUNDS)

    def value(self, params, obs, priv, cmd) -> np.ndarray:
        x = np.concatenate([obs, priv, cmd], axis=1)
        return nn.forward(self.part(params, "critic"), self.nets["critic"], x)[:, 0]

    def act(self, params, history, obs, cmd, rng: np.random.Generator | None, stochastic: bool) -> ActOutput:
        est, mu_z, logvar, _ = self.encode(params, history)
        if stochastic:
            eps_z = rng.standard_normal(mu_z.shape)
            z = mu_z + np.exp(0.5 * logvar) * eps_z
        else:
            eps_z = np.zeros_like(mu_z)
            z = mu_z
        recon = None
        if self.spec.decoder:
            recon = nn.forward(self.part(params, "decoder"), self.nets["decoder"], np.concatenate([est, z], axis=1))
        mean = self.backbone_mean(params, self.backbone_input(obs, est, z, cmd))
        log_std = self.log_std(params)
        if stochastic:
            action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        else:
            action = mean
        return ActOutput(action, gaussian_log_prob(action, mean, log_std), mean, est, z, recon, eps_z)


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    u = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * u * u - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * (1.0 + _LOG_2PI)))


def actor_forward(ac: ActorCritic, params, history, obs, cmd, rng=None, stochastic: bool = False) -> ActOutput:
    if history.shape[1:] != (ac.dims.history, ac.dims.obs):
        raise ValueError(f"history must have shape (B, {ac.dims.history}, {ac.dims.obs})")
    return ac.act(params, history, obs, cmd, rng, stochastic)


def critic_forward(ac: ActorCritic, params, obs, priv, cmd) -> np.ndarray:
    return ac.value(params, obs, priv, cmd)


def estimation_loss(est, target, spec: EstimationSpec, weights: LossWeights) -> float:
    """Weighted mean-squared error of each present explicit estimate."""
    total = 0.0
    for key, sl in spec.est_layout().items():
        diff = est[:, sl] - target[:, EST_SLICES[key]]
        total += weights.estimate_coef(key) * float(np.mean(diff * diff))
    return total


def kl_standard_normal(mean, logvar) -> np.ndarray:
    """Per-sample KL(N(mean, exp(logvar)) || N(0, I))."""
    return 0.5 * np.sum(mean * mean + np.exp(logvar) - 1.0 - logvar, axis=-1)


def auto_encoder_loss(recon, obs, mean, logvar, weights: LossWeights) -> float:
    """Prediction error plus the latent-size-normalized, beta-weighted KL."""
    if recon is None:
        return 0.0
    loss = weights.c_pred * float(np.mean((recon - obs) ** 2))
    if mean.shape[-1]:
        loss += weights.beta_vae * float(np.mean(kl_standard_normal(mean, logvar))) / mean.shape[-1]
    return loss


class Batch(NamedTuple):
    obs: np.ndarray
    history: np.ndarray
    priv: np.ndarray
    cmd: np.ndarray
    target: np.ndarray      # e_t
    actions: np.ndarray
    old_log_prob: np.ndarray
    eps_z: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def loss_and_grad(ac: ActorCritic, params, batch: Batch, weights: LossWeights):
    """Composite PPO loss and its exact gradient with respect to the flat parameters."""
    spec, n = ac.spec, batch.obs.shape[0]
    grad = np.zeros_like(params)
    n_est, lat = spec.n_est, spec.latent_dim

    # Encoder and latent (reparameterized with the rollout's noise).
    est, mu_z, logvar, enc_cache = ac.encode(params, batch.history)
    std_z = np.exp(0.5 * logvar)
    z = mu_z + std_z * batch.eps_z
    g_est = np.zeros_like(est)
    g_z = np.zeros_like(z)
    g_mu = np.zeros_like(mu_z)
    g_logvar = np.zeros_like(logvar)

    # Policy surrogate and entropy.
    x = ac.backbone_input(batch.obs, est, z, batch.cmd)
    mean, bb_cache = ac.backbone_mean(params, x, return_cache=True)
    raw_log_std = ac.part(params, "log_std")
    log_std = np.clip(raw_log_std, *LOG_STD_BOUNDS)
    log_prob = gaussian_log_prob(batch.actions, mean, log_std)
    ratio = np.exp(log_prob - batch.old_log_prob)
    adv = batch.advantages
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - weights.clip, 1.0 + weights.clip) * adv
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    entropy = gaussian_entropy(log_std)
    g_logp = -np.where(surr1 <= surr2, adv * ratio, 0.0) / n
    inv_var = np.exp(-2.0 * log_std)
    resid = batch.actions - mean
    g_mean = g_logp[:, None] * resid * inv_var
    g_ls = np.sum(g_logp[:, None] * (resid * resid * inv_var - 1.0), axis=0) - weights.entropy_coef
    in_range = (raw_log_std >= LOG_STD_BOUNDS[0]) & (raw_log_std <= LOG_STD_BOUNDS[1])
    grad[ac.slices["log_std"]] = g_ls * in_range
    g_pre = g_mean * (1.0 - mean * mean)
    g_bb, g_x = nn.backward(ac.part(params, "backbone"), ac.nets["backbone"], bb_cache, g_pre)
    grad[ac.slices["backbone"]] = g_bb
    d = ac.dims.obs
    g_est += g_x[:, d:d + n_est]
    g_z += g_x[:, d + n_est:d + n_est + lat]

    # Explicit estimation.
    est_loss = estimation_loss(est, batch.target, spec, weights)
    for key, sl in spec.est_layout().items():
        width = sl.stop - sl.start
        g_est[:, sl] += weights.estimate_coef(key) * 2.0 * (est[:, sl] - batch.target[:, EST_SLICES[key]]) / (n * width)

    # Predictive reconstruction and KL.
    ae_loss = 0.0
    if spec.decoder:
        dec_in = np.concatenate([est, z], axis=1)
        recon, dec_cache = nn.forward(ac.part(params, "decoder"), ac.nets["decoder"], dec_in, return_cache=True)
        ae_loss = auto_encoder_loss(recon, batch.obs, mu_z, logvar, weights)
        g_recon = weights.c_pred * 2.0 * (recon - batch.obs) / recon.size
        g_dec, g_in = nn.backward(ac.part(params, "decoder"), ac.nets["decoder"], dec_cache, g_recon)
        grad[ac.slices["decoder"]] = g_dec
        g_est += g_in[:, :n_est]
        g_z += g_in[:, n_est:]
        if lat:
            scale = weights.beta_vae / (lat * n)
            g_mu += scale * mu_z
            g_logvar += scale * 0.5 * (np.exp(logvar) - 1.0)

    if spec.encoder:
        g_mu += g_z
        g_logvar += g_z * batch.eps_z * 0.5 * std_z
        g_out = np.concatenate([g_est, g_mu, g_logvar], axis=1)
        g_enc, _ = nn.backward(ac.part(params, "encoder"), ac.nets["encoder"], enc_cache, g_out,
                               need_input_grad=False)
        grad[ac.slices["encoder"]] = g_enc

    # Critic.
    cx = np.concatenate([batch.obs, batch.priv, batch.cmd], axis=1)
    value, c_cache = nn.forward(ac.part(params, "critic"), ac.nets["critic"], cx, return_cache=True)
    value = value[:, 0]
    value_loss = float(np.mean((value - batch.returns) ** 2))
    g_v = weights.value_coef * 2.0 * (value - batch.returns)[:, None] / n
    grad[ac.slices["critic"]] = nn.backward(ac.part(params, "critic"), ac.nets["critic"], c_cache, g_v,
                                            need_input_grad=False)[0]

    total = policy_loss + weights.value_coef * value_loss - weights.entropy_coef * entropy + est_loss + ae_loss
    stats = {
        "loss": total, "policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy,
        "estimation_loss": est_loss, "autoencoder_loss": ae_loss,
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > weights.clip)),
    }
    return total, grad, stats
