"""Shared synthetic inputs for the test modules."""

import numpy as np

from warpstab.core import AffineTransform


def random_bounded_affine(rng, lin=0.2, trans=10.0):
    m = np.eye(2) + rng.uniform(-lin, lin, (2, 2))
    t = rng.uniform(-trans, trans, 2)
    return AffineTransform(np.hstack([m, t[:, None]]))


def ransac_trial(rng, n=20, outlier_frac=0.3, threshold=2.0, extent=256.0):
    """Correspondences under a bounded affine; outliers sit > 3x threshold off the model."""
    truth = random_bounded_affine(rng)
    src = rng.uniform(0.0, extent, (n, 2))
    dst = truth.apply(src)
    n_out = int(round(outlier_frac * n))
    out_idx = rng.choice(n, n_out, replace=False)
    for i in out_idx:
        while True:
            cand = rng.uniform(0.0, extent, 2)
            if np.linalg.norm(cand - dst[i]) > 3.0 * threshold:
                dst[i] = cand
                break
    inlier = np.ones(n, dtype=bool)
    inlier[out_idx] = False
    return truth, src, dst, inlier
