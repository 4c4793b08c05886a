"""
Mixture priors: drawing from a GMM and from a linear Gaussian model
===================================================================

Both priors hold K Gaussian components and a weight vector pi. A GMM draw
picks one component; an LGM draw mixes one sample from every component,
z = sum_k pi_k z_k, which is again a single Gaussian.
"""

import torch

from multiref.latent import (
    GaussianParams,
    PriorSpec,
    gaussian_kl,
    lgm_aggregate,
    prior_kl,
    sample_gmm,
    sample_lgm,
)

torch.manual_seed(0)

# two one-dimensional components, far apart
comps = GaussianParams(torch.tensor([[-2.0], [2.0]]), torch.tensor([[0.5], [0.5]]))
pi = torch.tensor([0.3, 0.7])

# the GMM is bimodal: each draw lands near -2 or near 2
gmm = sample_gmm(comps, pi, sample_shape=(100_000,)).z
print("GMM  mean %.3f  var %.3f" % (gmm.mean(), gmm.var()))
print("     share of draws below zero: %.3f (pi_0 = 0.3)" % (gmm < 0).double().mean())

# the LGM is unimodal, centred on the weighted mean with a shrunken spread
lgm = sample_lgm(comps, pi, torch.randn(100_000, 2, 1)).z
agg = lgm_aggregate(comps, pi)
print("LGM  mean %.3f  var %.3f" % (lgm.mean(), lgm.var()))
print("     closed form: mean %.3f  var %.3f" % (agg.mean, agg.std.square()))

# sum pi_k^2 sigma_k^2 is below every sigma_k^2 unless one weight is 1
print("     var / component var = %.3f" % (agg.std.square() / 0.25))

# the KL to an LGM prior is exact; to a GMM it is estimated by sampling
posterior = GaussianParams(torch.tensor([0.5]), torch.tensor([0.4]))
print()
print("KL(q || LGM)  %.4f" % prior_kl(posterior, comps, pi, PriorSpec("lgm", 2)))
print("KL(q || N(agg)) %.4f  (same thing)" % gaussian_kl(posterior, agg))
g = torch.Generator().manual_seed(0)
for m in (16, 1000, 100_000):
    est = prior_kl(posterior, comps, pi, PriorSpec("gmm", 2), num_samples=m, generator=g)
    print("KL(q || GMM)  %.4f  with %d samples" % (est, m))
