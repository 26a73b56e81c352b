"""Training objectives with analytic gradients.

Every loss draws its noise (dropout masks, reparameterization noise, prior
codes) from the ``rng`` it is handed, in a fixed order, so re-running a loss
with a generator in the same state reproduces it exactly. That is what the
finite-difference checks rely on.

Sign conventions: ``elbo_loss``, ``gen_adv_loss`` and ``joint_vg_loss`` are
minimized over the encoder/decoder weights. ``disc_loss`` is the critic
objective and is *maximized* over the discriminator weights; its gradient is
returned as-is and the caller ascends it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import genmodel as gm
from .neural import gaussian_sample, make_dropout_masks, mlp_backward


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray]
    parts: dict[str, float] = field(default_factory=dict)


def _masks(spec, rng, batch, dropout):
    return make_dropout_masks(spec, rng, batch) if dropout else None


def kl_gaussian(post: gm.GaussianPosterior) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean KL(N(mu, exp(log_var)) || N(0, I)) and its gradients."""
    mu, lv = post.mu, post.log_var
    B = mu.shape[0]
    var = np.exp(lv)
    kl = 0.5 * np.sum(mu * mu + var - lv - 1.0) / B
    return float(kl), mu / B, 0.5 * (var - 1.0) / B


def elbo_loss(cfg: gm.ModelConfig, params: gm.ModelParams, x: np.ndarray, a: np.ndarray,
              rng: np.random.Generator, dropout: bool = True) -> LossValue:
    """Negative ELBO: KL to the unit prior plus half squared reconstruction error."""
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    if B == 0:
        raise ValueError("elbo_loss needs a non-empty batch")
    enc_masks = _masks(cfg.encoder_spec, rng, B, dropout)
    post, raw_lv, enc_cache = gm.encoder_forward(cfg, params, x, a, enc_masks)
    eps = gaussian_sample(rng, B, cfg.latent_dim)
    std = np.exp(0.5 * post.log_var)
    z = post.mu + std * eps
    dec_masks = _masks(cfg.decoder_spec, rng, B, dropout)
    x_rec, dec_cache = gm.decoder_forward(cfg, params, z, a, dec_masks)

    diff = x_rec - x
    recon = 0.5 * float(np.sum(diff * diff)) / B
    kl, dkl_mu, dkl_lv = kl_gaussian(post)

    g_g, g_in = mlp_backward(dec_cache, diff / B)
    dz = g_in[:, :cfg.latent_dim]
    d_mu = dz + dkl_mu
    d_lv = (dz * eps * 0.5 * std + dkl_lv) * ((raw_lv >= gm.LOGVAR_MIN) & (raw_lv <= gm.LOGVAR_MAX))
    g_e, _ = mlp_backward(enc_cache, np.hstack([d_mu, d_lv]))
    return LossValue(kl + recon, {"theta_e": g_e, "theta_g": g_g}, {"kl": kl, "recon": recon})


def _fake_features(cfg, params, x, a, rng, dropout):
    """Generator samples from the prior and decoder samples for the critic."""
    B = a.shape[0]
    z_prior = gaussian_sample(rng, B, cfg.latent_dim)
    x_gen = gm.decode(cfg, params, z_prior, a, _masks(cfg.decoder_spec, rng, B, dropout))
    if cfg.de_term_z == "posterior":
        post = gm.encode(cfg, params, x, a, _masks(cfg.encoder_spec, rng, B, dropout))
        z_de = gm.reparameterize(rng, post)
    else:
        z_de = gaussian_sample(rng, B, cfg.latent_dim)
    x_de = gm.decode(cfg, params, z_de, a, _masks(cfg.decoder_spec, rng, B, dropout))
    return x_gen, x_de


def _log_sigmoid(s):
    return -np.logaddexp(0.0, -s)


def _sigmoid(s):
    return np.exp(_log_sigmoid(s))


def disc_loss(cfg: gm.ModelConfig, params: gm.ModelParams, x: np.ndarray, a: np.ndarray,
              rng: np.random.Generator, dropout: bool = True) -> LossValue:
    """Critic objective: real score minus the generator and decoder fake scores.

    Fake features are constants here; only ``theta_d`` receives a gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    B = x.shape[0]
    if B == 0:
        raise ValueError("disc_loss needs a non-empty batch")
    x_gen, x_de = _fake_features(cfg, params, x, a, rng, dropout)

    value = 0.0
    grad = np.zeros_like(params.theta_d)
    parts = {}
    for name, feats, sign in (("real", x, 1.0), ("gen", x_gen, -1.0), ("de", x_de, -1.0)):
        s, cache = gm.disc_forward(cfg, params, feats, a, _masks(cfg.disc_spec, rng, B, dropout))
        if cfg.disc_mode == "critic":
            term = sign * float(np.mean(s))
            up = np.full(B, sign / B)
        elif sign > 0:
            term = float(np.mean(_log_sigmoid(s)))
            up = (1.0 - _sigmoid(s)) / B
        else:
            term = float(np.mean(_log_sigmoid(-s)))
            up = -_sigmoid(s) / B
        g_d, _ = mlp_backward(cache, up[:, None])
        grad += g_d
        value += term
        parts[name] = term
    return LossValue(value, {"theta_d": grad}, parts)


def gen_adv_loss(cfg: gm.ModelConfig, params: gm.ModelParams, a: np.ndarray,
                 rng: np.random.Generator, dropout: bool = True, literal_eq4: bool = False) -> LossValue:
    """Generator adversarial term, minimized over ``theta_g``.

    Default is ``-mean Ds(G(z, a), a)`` so that descent raises the critic's
    score on fakes; ``literal_eq4=True`` flips the sign.
    """
    a = np.asarray(a, dtype=np.float64)
    B = a.shape[0]
    if B == 0:
        raise ValueError("gen_adv_loss needs a non-empty batch")
    z = gaussian_sample(rng, B, cfg.latent_dim)
    x_gen, dec_cache = gm.decoder_forward(cfg, params, z, a, _masks(cfg.decoder_spec, rng, B, dropout))
    s, disc_cache = gm.disc_forward(cfg, params, x_gen, a, _masks(cfg.disc_spec, rng, B, dropout))
    sign = 1.0 if literal_eq4 else -1.0
    if cfg.disc_mode == "critic":
        value = sign * float(np.mean(s))
        up = np.full(B, sign / B)
    else:
        value = sign * float(np.mean(_log_sigmoid(s)))
        up = sign * (1.0 - _sigmoid(s)) / B
    _, g_in = mlp_backward(disc_cache, up[:, None])
    g_g, _ = mlp_backward(dec_cache, g_in[:, :cfg.feature_dim])
    return LossValue(value, {"theta_g": g_g})


def joint_vg_loss(cfg: gm.ModelConfig, params: gm.ModelParams, x: np.ndarray, a: np.ndarray,
                  rng: np.random.Generator, lambda_adv: float = 1.0, dropout: bool = True,
                  literal_eq4: bool = False) -> LossValue:
    """``elbo_loss + lambda_adv * gen_adv_loss`` over ``theta_e`` and ``theta_g``.

    With ``lambda_adv == 0`` the adversarial pass is skipped entirely, so the
    result and the generator's stream position equal a bare ``elbo_loss``.
    """
    elbo = elbo_loss(cfg, params, x, a, rng, dropout)
    if lambda_adv == 0.0:
        return elbo
    adv = gen_adv_loss(cfg, params, a, rng, dropout, literal_eq4)
    grads = {"theta_e": elbo.grads["theta_e"], "theta_g": elbo.grads["theta_g"] + lambda_adv * adv.grads["theta_g"]}
    parts = dict(elbo.parts, adv=adv.value)
    return LossValue(elbo.value + lambda_adv * adv.value, grads, parts)


def constant_critic_params(cfg: gm.ModelConfig, c: float, base: Optional[gm.ModelParams] = None) -> gm.ModelParams:
    """Copy of ``base`` whose discriminator always outputs ``c`` (test helper)."""
    theta_d = np.zeros(cfg.disc_spec.n_params())
    theta_d[-1] = c
    if base is None:
        return gm.ModelParams(np.zeros(cfg.encoder_spec.n_params()), np.zeros(cfg.decoder_spec.n_params()), theta_d)
    return gm.ModelParams(base.theta_e.copy(), base.theta_g.copy(), theta_d)
