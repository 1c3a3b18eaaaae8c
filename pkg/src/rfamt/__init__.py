"""Linear-time random-feature attention for document-level translation.

Subpackages cover the randomized feature maps, exact and random-feature
attention (with sentential gating), a small encoder-decoder transformer
with hand-written reverse-mode gradients, sliding-window document
processing, incremental decoding, and a decoding-speed benchmark.
"""

__version__ = "0.1.0"

from rfamt.random_features import (
    FeatureMap,
    FeatureMapSpec,
    exp_dot_estimate,
    kernel_estimate,
    phi,
    sample_feature_map,
)

__all__ = [
    "FeatureMap",
    "FeatureMapSpec",
    "sample_feature_map",
    "phi",
    "kernel_estimate",
    "exp_dot_estimate",
]
