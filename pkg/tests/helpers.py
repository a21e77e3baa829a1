import numpy as np

from repspk.tensor_core import BNParams


def random_bn(rng, n, epsilon=1e-5):
    return BNParams(
        gamma=rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n),
        beta=rng.normal(size=n),
        mu=rng.normal(size=n),
        var=rng.uniform(0.1, 3.0, n),
        epsilon=epsilon,
    )
