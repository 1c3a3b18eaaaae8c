"""Adam training loop with warmup, inverse-sqrt decay, and early stopping."""

from dataclasses import dataclass, field

import numpy as np

from rfamt.model import Batch, ModelConfig, Parameters, TransformerModel, make_batch
from rfamt.seeding import substream

__all__ = ["TrainConfig", "TrainingDiverged", "AdamOptimizer", "learning_rate", "train"]


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite during training."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr_peak: float = 3e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0  # 0 disables clipping
    eval_every: int = 200
    patience: int = 10  # evaluations without dev improvement
    seed: int = 0
    log_every: int = 0  # 0: silent


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` followed by inverse-sqrt decay."""
    step = max(step, 1)
    warmup = max(warmup, 1)
    return peak * min(step / warmup, np.sqrt(warmup / step))


class AdamOptimizer:
    def __init__(self, params: Parameters, cfg: TrainConfig):
        self.cfg = cfg
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: Parameters, grads: Parameters, lr: float):
        self.t += 1
        c = self.cfg
        if c.clip_norm > 0:
            total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            if total > c.clip_norm:
                scale = c.clip_norm / total
                for g in grads.values():
                    g *= scale
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def _iter_batches(pairs, batch_size, rng):
    """Yield index batches forever, reshuffling each epoch."""
    n = len(pairs)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield [pairs[i] for i in order[start : start + batch_size]]


def evaluate_loss(model: TransformerModel, pairs, batch_size=64) -> float:
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        batch = make_batch(pairs[start : start + batch_size])
        _, loss = model.forward(batch)
        n = int(batch.tgt_mask.sum())
        total += loss * n
        count += n
    return total / max(count, 1)


def train(params: Parameters, config: ModelConfig, train_pairs, dev_pairs, tcfg: TrainConfig):
    """Run Adam over window pairs; returns (best parameters, loss curve).

    The curve is a list of dicts with step, lr, train_loss, and (at
    evaluation points) dev_loss.  The best-dev parameter snapshot is kept
    and returned; patience counts evaluations without improvement.
    """
    if not train_pairs:
        raise ValueError("training corpus is empty")
    model = TransformerModel(config, params)
    opt = AdamOptimizer(params, tcfg)
    rng = substream(tcfg.seed, "order")
    batches = _iter_batches(train_pairs, tcfg.batch_size, rng)
    curve = []
    best_dev = np.inf
    best_params = params.copy()
    stale = 0
    for step in range(1, tcfg.steps + 1):
        if config.resample_features:
            model.resample_feature_maps(step)
        batch = make_batch(next(batches))
        try:
            _, loss = model.forward(batch)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"diverged at step {step}: {exc}") from exc
        grads = model.backward()
        lr = learning_rate(step, tcfg.lr_peak, tcfg.warmup)
        opt.step(params, grads, lr)
        rec = {"step": step, "lr": lr, "train_loss": loss}
        if dev_pairs and (step % tcfg.eval_every == 0 or step == tcfg.steps):
            dev_loss = evaluate_loss(model, dev_pairs)
            rec["dev_loss"] = dev_loss
            if dev_loss < best_dev - 1e-9:
                best_dev = dev_loss
                best_params = params.copy()
                stale = 0
            else:
                stale += 1
            if tcfg.log_every:
                print(f"step {step}  lr {lr:.2e}  train {loss:.4f}  dev {dev_loss:.4f}")
            if stale >= tcfg.patience:
                curve.append(rec)
                break
        elif tcfg.log_every and step % tcfg.log_every == 0:
            print(f"step {step}  lr {lr:.2e}  train {loss:.4f}")
        curve.append(rec)
    if not dev_pairs:
        best_params = params.copy()
    return best_params, curve
