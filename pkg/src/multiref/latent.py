"""Diagonal-Gaussian latent machinery: samplers for unimodal, GMM and LGM priors.

All tensors carry the component axis second to last and the latent
dimension last, i.e. means and stddevs are ``(..., K, D)`` and weights are
``(..., K)``. Leading axes broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

STD_FLOOR = 1e-5
LOG_2PI = 1.8378770664093453


class GaussianParams(NamedTuple):
    mean: torch.Tensor
    std: torch.Tensor

    def component(self, k: int) -> "GaussianParams":
        return GaussianParams(self.mean[..., k, :], self.std[..., k, :])


@dataclass
class LatentState:
    z: torch.Tensor
    components: GaussianParams
    weights: torch.Tensor


@dataclass(frozen=True)
class PriorSpec:
    family: str = "unimodal"  # none | unimodal | gmm | lgm
    K: int = 1
    # set to a positive value to replace the hard GMM draw by a Gumbel-softmax relaxation
    gmm_temperature: float | None = None

    def __post_init__(self):
        if self.family not in ("none", "unimodal", "gmm", "lgm"):
            raise ValueError(f"unknown prior family {self.family!r}")
        if self.K < 1:
            raise ValueError("prior needs at least one component")
        if self.family in ("none", "unimodal") and self.K != 1:
            object.__setattr__(self, "K", 1)

    @property
    def variational(self) -> bool:
        return self.family != "none"

    @property
    def mixture(self) -> bool:
        return self.family in ("gmm", "lgm")

    @classmethod
    def parse(cls, text: str) -> "PriorSpec":
        """Parse ``none``, ``unimodal``, ``gmm5``, ``lgm20`` and similar."""
        for fam in ("gmm", "lgm"):
            if text.startswith(fam):
                return cls(fam, int(text[len(fam):] or 1))
        return cls(text)


def positive_std(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) + STD_FLOOR


def sample_gaussian(params: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mean + std * noise``."""
    return params.mean + params.std * noise


def sample_gmm(
    components: GaussianParams,
    weights: torch.Tensor,
    generator: torch.Generator | None = None,
    sample_shape: tuple[int, ...] = (),
    temperature: float | None = None,
) -> LatentState:
    """Pick a component by a categorical draw on ``weights``, then sample it.

    The categorical draw is not differentiable; gradients reach only the
    selected component. With ``temperature`` set, a Gumbel-softmax relaxed
    selection mixes the component samples instead.
    """
    mean, std = components
    batch = torch.broadcast_shapes(mean.shape[:-1], std.shape[:-1], weights.shape)
    K, D = batch[-1], mean.shape[-1]
    full = tuple(sample_shape) + batch
    noise = torch.randn(full + (D,), generator=generator, dtype=mean.dtype, device=mean.device)
    w = weights.expand(full)
    if temperature is not None:
        u = torch.rand(full, generator=generator, dtype=mean.dtype, device=mean.device)
        gumbel = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
        soft = torch.softmax((torch.log(w.clamp_min(1e-20)) + gumbel) / temperature, dim=-1)
        z = (soft.unsqueeze(-1) * (mean + std * noise)).sum(-2)
        return LatentState(z, components, weights)
    k = torch.multinomial(w.reshape(-1, K), 1, generator=generator).reshape(full[:-1])
    idx = k[..., None, None].expand(full[:-1] + (1, D))
    mu = torch.gather(mean.expand(full + (D,)), -2, idx).squeeze(-2)
    sd = torch.gather(std.expand(full + (D,)), -2, idx).squeeze(-2)
    z = mu + sd * noise[..., 0, :]
    return LatentState(z, components, weights)


def sample_lgm(components: GaussianParams, weights: torch.Tensor, noise: torch.Tensor) -> LatentState:
    """Weighted sum of K independent Gaussian draws, fully reparameterized.

    ``noise`` holds one standard-normal vector per component, ``(..., K, D)``.
    """
    zk = sample_gaussian(components, noise)
    if zk.shape[-2] == 1:
        return LatentState(zk[..., 0, :], components, weights)
    z = (weights.unsqueeze(-1) * zk).sum(-2)
    return LatentState(z, components, weights)


def lgm_aggregate(components: GaussianParams, weights: torch.Tensor) -> GaussianParams:
    """Exact law of :func:`sample_lgm`: mean ``sum(w mu)``, variance ``sum(w^2 sigma^2)``."""
    w = weights.unsqueeze(-1)
    mean = (w * components.mean).sum(-2)
    std = torch.sqrt((w.square() * components.std.square()).sum(-2))
    return GaussianParams(mean, std)


def mixture_mean(components: GaussianParams, weights: torch.Tensor) -> torch.Tensor:
    return (weights.unsqueeze(-1) * components.mean).sum(-2)


def one_hot_weights(weights: torch.Tensor, k: int) -> torch.Tensor:
    K = weights.shape[-1]
    if not 0 <= k < K:
        raise IndexError(f"variable {k} out of range for K={K}")
    return F.one_hot(torch.full(weights.shape[:-1], k, dtype=torch.long), K).to(weights)


def gaussian_log_prob(z: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    """Diagonal-Gaussian log density, summed over the last axis."""
    var = params.std.square()
    return -0.5 * (LOG_2PI + torch.log(var) + (z - params.mean).square() / var).sum(-1)


def gaussian_kl(posterior: GaussianParams, prior: GaussianParams) -> torch.Tensor:
    """Closed-form KL(posterior || prior) for diagonal Gaussians, summed over the last axis."""
    mq, sq = posterior
    mp, sp = prior
    return (torch.log(sp / sq) + (sq.square() + (mq - mp).square()) / (2 * sp.square()) - 0.5).sum(-1)


def gmm_log_prob(z: torch.Tensor, components: GaussianParams, weights: torch.Tensor) -> torch.Tensor:
    zk = z.unsqueeze(-2)
    comp = gaussian_log_prob(zk, components)
    return torch.logsumexp(torch.log(weights.clamp_min(1e-30)) + comp, dim=-1)


def prior_kl(
    posterior: GaussianParams,
    components: GaussianParams,
    weights: torch.Tensor,
    spec: PriorSpec,
    num_samples: int = 16,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """KL from the posterior to the configured prior.

    Unimodal and LGM priors are Gaussian in law, so their KL is exact. The
    GMM KL is a Monte Carlo estimate with ``num_samples`` reparameterized
    posterior draws.
    """
    if spec.family == "unimodal":
        return gaussian_kl(posterior, components.component(0))
    if spec.family == "lgm":
        if components.mean.shape[-2] == 1:
            # a single variable has weight 1; skip the sqrt(w^2 sigma^2) round trip
            return gaussian_kl(posterior, components.component(0))
        return gaussian_kl(posterior, lgm_aggregate(components, weights))
    if spec.family == "gmm":
        mq, sq = posterior
        eps = torch.randn((num_samples,) + mq.shape, generator=generator, dtype=mq.dtype, device=mq.device)
        z = mq + sq * eps
        log_q = gaussian_log_prob(z, posterior)
        log_p = gmm_log_prob(z, components, weights)
        return (log_q - log_p).mean(0)
    raise ValueError(f"prior family {spec.family!r} has no latent variable")
