"""Random Fourier feature maps for exponential-kernel approximation.

A feature map phi projects a vector x through a fixed Gaussian random
matrix W and returns sqrt(1/D) * [sin(Wx); cos(Wx)].  Inner products of
these features are unbiased estimates of the Gaussian kernel

    E[phi(x) . phi(y)] = exp(-||x - y||^2 / (2 sigma^2)),

which, after rescaling by the norm prefactors, yields an estimator of
exp(x . y / sigma^2).  The sine/cosine construction gives phi(x) exact
unit Euclidean norm for every input, a property the attention code and
the test suite both lean on.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeatureMapSpec",
    "FeatureMap",
    "sample_feature_map",
    "phi",
    "kernel_estimate",
    "exp_dot_estimate",
]


@dataclass(frozen=True)
class FeatureMapSpec:
    """Shape and randomness parameters of a feature map.

    Attributes:
        input_dim: dimensionality of the vectors being featurized.
        num_features: number D of random projections; phi outputs 2*D values.
        bandwidth: kernel scale sigma; projection entries are N(0, 1/sigma^2).
        seed: seed that fully determines the projection matrix.
    """

    input_dim: int
    num_features: int
    bandwidth: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_features < 1:
            raise ValueError(f"num_features must be >= 1, got {self.num_features}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")


@dataclass(frozen=True)
class FeatureMap:
    """A sampled feature map: the spec plus its frozen projection matrix."""

    spec: FeatureMapSpec
    projection: np.ndarray = field(repr=False)  # (D, input_dim), read-only

    @property
    def feature_dim(self) -> int:
        return 2 * self.spec.num_features


def sample_feature_map(spec: FeatureMapSpec) -> FeatureMap:
    """Draw the projection matrix for ``spec``.

    Entries are i.i.d. N(0, 1/sigma^2), generated by a PCG64 stream seeded
    with ``spec.seed``, so the same spec always yields a bit-identical map.
    """
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    w = rng.standard_normal((spec.num_features, spec.input_dim)) / spec.bandwidth
    w.setflags(write=False)
    return FeatureMap(spec=spec, projection=w)


def phi(fmap: FeatureMap, x: np.ndarray) -> np.ndarray:
    """Featurize ``x``: sqrt(1/D) * [sin(Wx); cos(Wx)] along the last axis.

    Accepts a single vector or any batch shape (..., input_dim) and returns
    (..., 2*D).  The output always has unit Euclidean norm.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != fmap.spec.input_dim:
        raise ValueError(
            f"input has dim {x.shape[-1]}, feature map expects {fmap.spec.input_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("phi input must be finite")
    proj = x @ fmap.projection.T
    scale = np.sqrt(1.0 / fmap.spec.num_features)
    return scale * np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


def kernel_estimate(fmap: FeatureMap, x: np.ndarray, y: np.ndarray) -> float:
    """phi(x) . phi(y): unbiased estimate of exp(-||x-y||^2 / (2 sigma^2))."""
    return float(phi(fmap, x) @ phi(fmap, y))


def exp_dot_estimate(fmap: FeatureMap, x: np.ndarray, y: np.ndarray) -> float:
    """Estimate exp(x . y / sigma^2) by undoing the Gaussian norm prefactors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sig2 = fmap.spec.bandwidth**2
    pref = np.exp((x @ x + y @ y) / (2.0 * sig2))
    return float(pref * kernel_estimate(fmap, x, y))
