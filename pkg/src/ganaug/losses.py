"""WGAN-GP, alpha-GAN-GP and SSIM-diversity losses.

Critics are any callable mapping a tensor batch to scores of shape [N, 1];
network states from :mod:`ganaug.nn` qualify.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import SsimParams, ssim_pairs
from .tensor import ShapeError, Tensor

Critic = Callable[[Tensor], Tensor]


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda_gp: float = 10.0
    lambda_ssim: float = 10.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


def _per_sample_shape(x: Tensor) -> tuple[int, ...]:
    return (x.shape[0],) + (1,) * (x.ndim - 1)


def interpolate(real: Tensor, fake: Tensor, rng: np.random.Generator) -> Tensor:
    """u * real + (1 - u) * fake with one uniform u per sample."""
    real, fake = T.tensor(real), T.tensor(fake)
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} and fake {fake.shape} differ")
    u = rng.uniform(0.0, 1.0, size=_per_sample_shape(real)).astype(real.data.dtype)
    u_full = T.Tensor(np.broadcast_to(u, real.shape))
    mixed = T.add(T.mul(real, u_full), T.mul(fake, T.Tensor(1.0 - u_full.data)))
    if not mixed.requires_grad:
        mixed = T.Tensor(mixed.data, requires_grad=True)
    return mixed


def gradient_penalty(D: Critic, real, fake, rng: np.random.Generator) -> Tensor:
    """Mean over the batch of (||grad_x D(x_hat)||_2 - 1)^2, differentiable in D's parameters."""
    x_hat = interpolate(real, fake, rng)
    scores = D(x_hat)
    (g,) = T.grad(T.reduce_sum(scores), [x_hat], create_graph=True)
    norms = T.l2_norm(T.reshape(g, (g.shape[0], -1)), axis=1)
    return T.reduce_mean(T.square(T.add_scalar(norms, -1.0)))


def wgan_d_loss(
    D: Critic,
    real,
    fake,
    weights: LossWeights,
    rng: np.random.Generator,
    return_penalty: bool = False,
):
    """mean D(fake) - mean D(real) + lambda_gp * GP, with ``fake`` detached."""
    real = T.tensor(real).detach()
    fake = T.tensor(fake).detach()
    loss = T.sub(T.reduce_mean(D(fake)), T.reduce_mean(D(real)))
    gp = gradient_penalty(D, real, fake, rng) if weights.lambda_gp or return_penalty else None
    if weights.lambda_gp:
        loss = T.add(loss, T.scale(gp, weights.lambda_gp))
    return (loss, gp) if return_penalty else loss


def wgan_g_loss(D: Critic, fake) -> Tensor:
    return T.neg(T.reduce_mean(D(T.tensor(fake))))


def printed_wgan_losses(D: Critic, real, fake, weights: LossWeights, rng) -> dict[str, Tensor]:
    """The critic/generator forms exactly as typeset in the source equations.

    Kept for inspection only: the generator term reads the critic on real data
    (no dependence on the generator) and the critic term drops -D(real), so
    neither trains anything. Training always uses :func:`wgan_d_loss` and
    :func:`wgan_g_loss`.
    """
    real, fake = T.tensor(real).detach(), T.tensor(fake).detach()
    gp = gradient_penalty(D, real, fake, rng)
    return {
        "generator": T.neg(T.reduce_mean(D(real))),
        "discriminator": T.add(T.reduce_mean(D(fake)), T.scale(gp, weights.lambda_gp)),
    }


def l1_reconstruction(real, recon) -> Tensor:
    """Mean absolute error over all pixels."""
    real, recon = T.tensor(real), T.tensor(recon)
    return T.scale(T.l1_norm(T.sub(real, recon)), 1.0 / real.size)


def alpha_generator_loss(D_D: Critic, real, recon, fake, weights: LossWeights) -> Tensor:
    adv = T.add(T.reduce_mean(D_D(recon)), T.reduce_mean(D_D(fake)))
    loss = T.neg(adv)
    if weights.lambda1:
        loss = T.add(loss, T.scale(l1_reconstruction(real, recon), weights.lambda1))
    return loss


def alpha_encoder_loss(D_L: Critic, z_hat) -> Tensor:
    return T.neg(T.reduce_mean(D_L(z_hat)))


def alpha_discriminator_loss(
    D_D: Critic, real, recon, fake, weights: LossWeights, rng, return_penalty: bool = False
):
    """Critic loss with both fake sources; the penalty averages one GP per source."""
    real, recon, fake = (T.tensor(t).detach() for t in (real, recon, fake))
    loss = T.sub(
        T.add(T.reduce_mean(D_D(recon)), T.reduce_mean(D_D(fake))),
        T.scale(T.reduce_mean(D_D(real)), 2.0),
    )
    gp = None
    if weights.lambda2 or return_penalty:
        gp = T.scale(T.add(gradient_penalty(D_D, real, recon, rng), gradient_penalty(D_D, real, fake, rng)), 0.5)
    if weights.lambda2:
        loss = T.add(loss, T.scale(gp, weights.lambda2))
    return (loss, gp) if return_penalty else loss


def alpha_latent_discriminator_loss(
    D_L: Critic, z_hat, z, weights: LossWeights, rng, return_penalty: bool = False
):
    """mean D_L(E(x)) - mean D_L(z) + lambda2 * GP between codes and prior samples."""
    z_hat, z = T.tensor(z_hat).detach(), T.tensor(z).detach()
    loss = T.sub(T.reduce_mean(D_L(z_hat)), T.reduce_mean(D_L(z)))
    gp = None
    if weights.lambda2 or return_penalty:
        gp = gradient_penalty(D_L, z_hat, z, rng)
    if weights.lambda2:
        loss = T.add(loss, T.scale(gp, weights.lambda2))
    return (loss, gp) if return_penalty else loss


@dataclass
class AlphaGanLosses:
    generator: Tensor
    encoder: Tensor
    discriminator: Tensor
    latent_discriminator: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: v.item() for k, v in vars(self).items()}


def alpha_gan_losses(E: Critic, G: Critic, D_D: Critic, D_L: Critic, real, z, weights: LossWeights, rng):
    """All four alpha-GAN-GP objectives evaluated on one batch."""
    real, z = T.tensor(real), T.tensor(z)
    z_hat = E(real)
    if z_hat.shape != z.shape:
        raise ShapeError(f"encoder output {z_hat.shape} does not match prior samples {z.shape}")
    recon, fake = G(z_hat), G(z)
    return AlphaGanLosses(
        generator=alpha_generator_loss(D_D, real, recon, fake, weights),
        encoder=alpha_encoder_loss(D_L, z_hat),
        discriminator=alpha_discriminator_loss(D_D, real, recon, fake, weights, rng),
        latent_discriminator=alpha_latent_discriminator_loss(D_L, z_hat, z, weights, rng),
    )


def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, k=1)
    return i, j


def ssim_diversity_loss(batch, weights: LossWeights, params: SsimParams | None = None) -> Tensor:
    """lambda_ssim times the mean SSIM over all unordered pairs of a generated batch.

    Images are remapped from [-1, 1] to [0, 1] first.
    """
    batch = T.tensor(batch)
    n = batch.shape[0]
    if n < 2:
        raise ShapeError("the diversity term needs at least two images")
    unit = T.add_scalar(T.scale(batch, 0.5), 0.5)
    i, j = pair_indices(n)
    sims = ssim_pairs(unit, i, j, params)
    return T.scale(T.reduce_mean(sims), weights.lambda_ssim)
