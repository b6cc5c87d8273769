import numpy as np

from .exceptions import ConfigError


def random_psd(dim, seed, eig_range=(0.1, 2.0)):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eig = rng.uniform(*eig_range, size=dim)
    return (q * eig) @ q.T


class QuadraticObjective:
    """L(theta) = 1/2 (theta - c)^T H (theta - c), with per-sample linear noise terms.

    Sample n contributes an extra ``b_n . theta`` whose mean over samples is zero,
    so minibatch gradients are noisy but the full-set loss is the pure quadratic.
    """

    def __init__(self, hessian, center, n_samples=100, noise=0.0, seed=0):
        self.H = np.asarray(hessian, dtype=np.float64)
        self.c = np.asarray(center, dtype=np.float64)
        if self.H.shape != (self.c.size, self.c.size):
            raise ConfigError("Hessian and center dimensions disagree")
        if not np.allclose(self.H, self.H.T):
            raise ConfigError("Hessian must be symmetric")
        self.n_samples = int(n_samples)
        b = np.random.default_rng(seed).normal(0.0, noise, size=(self.n_samples, self.c.size))
        self._b = b - b.mean(axis=0)
        self.n_classes = 1

    @classmethod
    def random(cls, dim, seed, n_samples=100, noise=0.1):
        rng = np.random.default_rng(seed + 1)
        return cls(random_psd(dim, seed), rng.normal(size=dim), n_samples, noise, seed)

    @property
    def n_params(self):
        return self.c.size

    def loss(self, theta):
        d = np.asarray(theta, dtype=np.float64) - self.c
        return float(0.5 * d @ self.H @ d)

    def gradient(self, theta):
        return self.H @ (np.asarray(theta, dtype=np.float64) - self.c)

    def loss_and_gradient(self, theta):
        return self.loss(theta), self.gradient(theta)

    def class_gradients(self, theta):
        return self.gradient(theta)[None, :]

    def minibatch_gradient(self, theta, idx):
        extra = self._b[idx].mean(axis=0)
        return (self.loss(theta) + float(extra @ np.asarray(theta, dtype=np.float64)),
                self.gradient(theta) + extra)
