"""Closed-form denoisers used as test oracles."""

import math

import torch


class GaussianPairOracle:
    """Exact E[eps | x_t] for a zero-mean scalar (audio, video) Gaussian with correlation rho.

    x_t = sqrt(abar) x0 + sqrt(1 - abar) eps has covariance C = abar * S + (1 - abar) I, and
    E[eps | x_t] = sqrt(1 - abar) C^{-1} x_t.  Audio is (B, 1, 1), video (B, 1, 1, 1, 1).
    """

    def __init__(self, sched, rho: float):
        self.sched, self.rho = sched, rho
        self.calls = 0

    def __call__(self, audio, video, t, generator=None):
        self.calls += 1
        abar = self.sched.alpha_bar.to(audio.dtype)[t - 1].reshape(-1, 1)
        c11 = abar + (1 - abar)
        c12 = abar * self.rho
        det = c11 * c11 - c12 * c12
        a, v = audio.reshape(-1, 1), video.reshape(-1, 1)
        ia = (c11 * a - c12 * v) / det
        iv = (c11 * v - c12 * a) / det
        s = (1 - abar).sqrt()
        return (s * ia).reshape(audio.shape), (s * iv).reshape(video.shape)


def gaussian_shapes():
    return (1, 1), (1, 1, 1, 1)


def scalar_fd(m1, v1, m2, v2):
    return (m1 - m2) ** 2 + v1 + v2 - 2 * math.sqrt(v1 * v2)
