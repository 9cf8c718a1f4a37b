"""Latent task inference from interaction history.

Each (state, action, reward) tuple is mapped to an independent Gaussian
factor; factors fuse analytically by product, giving a posterior whose
precision is the sum of factor precisions. Sampling is reparameterized
so gradients reach the encoder, and an empty history falls back to the
standard normal prior.
"""
from __future__ import annotations

import torch

from .nets import dense_forward, dense_params, tensor


def encoder_params(name, in_dim, hidden, layers, latent, rng):
    widths = [in_dim] + [hidden] * layers + [2 * latent]
    return dense_params(name, widths, rng)


def encode_factors(params, name, rows, sigma_floor=1e-4):
    """rows: (N, state+action+1) tensor, one context tuple per row."""
    rows = tensor(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("encode_factors needs a nonempty (N, d) batch")
    out = dense_forward(params, name, rows)
    mu, raw = out.chunk(2, dim=-1)
    return mu, torch.nn.functional.softplus(raw) + sigma_floor


def aggregate_pog(mu, sigma):
    """Fuse per-tuple factors into the posterior (mean, std)."""
    mu = tensor(mu)
    sigma = tensor(sigma)
    prec = sigma**-2
    var = 1.0 / prec.sum(dim=0)
    mu_bar = var * (mu * prec).sum(dim=0)
    return mu_bar, torch.sqrt(var)


def pairwise_fuse(a, b):
    """Two-factor product rule, for incremental fusion."""
    return aggregate_pog(torch.stack([tensor(a[0]), tensor(b[0])]),
                         torch.stack([tensor(a[1]), tensor(b[1])]))


def sample_z(mu_bar, sigma_bar, eps):
    return tensor(mu_bar) + tensor(sigma_bar) * tensor(eps)


def kl_to_prior(mu_bar, sigma_bar):
    mu_bar = tensor(mu_bar)
    var = tensor(sigma_bar) ** 2
    return 0.5 * (var + mu_bar**2 - 1.0 - torch.log(var)).sum()


def prior_posterior(latent: int):
    return (torch.zeros(latent, dtype=torch.float64),
            torch.ones(latent, dtype=torch.float64))


def posterior_from_context(params, name, rows, latent, sigma_floor=1e-4):
    """Posterior for a context batch; the prior when there is none yet."""
    if rows is None or len(rows) == 0:
        return prior_posterior(latent)
    return aggregate_pog(*encode_factors(params, name, rows, sigma_floor))
