"""Training loops: masked cross-entropy for the generator, per-position BCE
for the critic, plus held-out evaluation.

Each step draws fresh i.i.d. examples from the world, a continuous masking
time t ~ U(0,1), and a uniform mask with exactly ceil(N * gamma(t)) zeros.
The generator is supervised only at masked positions; the critic is trained
on merged grids (real tokens at visible positions, generator samples at
masked ones) to recover the keep bits. Early stopping watches the held-out
loss with a fixed patience and restores the best snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
from scipy.stats import rankdata

from . import numerics as nm
from .nets import CriticModel, GeneratorModel, TransformerConfig
from .rng import make_rng
from .schedule import gamma_array
from .tokenspace import apply_mask_tokens, merge_tokens, random_mask_batch
from .worlds import ConditionalOracle, SyntheticWorld, sample_world_batch


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 50
    batch_size: int = 64
    optimizer: nm.OptimizerConfig = field(default_factory=nm.OptimizerConfig)
    eval_interval: int = 200
    eval_batches: int = 8
    seed: int = 0
    patience: int = 10
    min_delta: float = 1e-3
    fill_temperature: float = 1.0  # critic training: generator sampling temperature
    mask_count_override: int | None = None  # fix r instead of drawing t ~ U(0,1)
    gamma_kind: str = "cosine"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs, steps_per_epoch, batch_size must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def draw_masked_batch(
    world: SyntheticWorld,
    batch_size: int,
    rng: np.random.Generator,
    gamma_kind: str = "cosine",
    mask_count_override: int | None = None,
):
    """(x0, classes, keep bits, x_t) with r = ceil(N * gamma(t)), t ~ U(0,1)."""
    n = world.n
    x0, classes = sample_world_batch(world, batch_size, rng)
    if mask_count_override is None:
        t = rng.random(batch_size)
        r = np.minimum(n, np.ceil(n * gamma_array(t, gamma_kind)).astype(np.int64))
    else:
        r = np.full(batch_size, int(mask_count_override), dtype=np.int64)
    bits = random_mask_batch(batch_size, n, r, rng)
    x_t = apply_mask_tokens(x0, bits, world.vocab.mask_id)
    return x0, classes, bits, x_t


def _sample_fill(generator, x_t, classes, temperature, rng) -> np.ndarray:
    """Draw tokens for every position from the generator at the given temperature."""
    with nm.no_grad():
        logits = generator.forward_batch(x_t, classes).data
    gumbel = -np.log(-np.log(rng.random(logits.shape)))
    return (logits / temperature + gumbel).argmax(axis=-1).astype(x_t.dtype)


def _snapshot(model) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


def _restore(model, snap: dict[str, np.ndarray]) -> None:
    for p in model.parameters():
        p.data = snap[p.name].copy()


def train_generator(
    world: SyntheticWorld,
    config: TrainConfig,
    model_config: TransformerConfig | None = None,
    checkpoint_cb=None,
):
    """Masked cross-entropy training; returns (model, trace rows).

    Trace rows are (step, split, metric, value) tuples ready for CSV.
    """
    from .nets import default_generator_config

    if model_config is None:
        model_config = default_generator_config(world.k, world.n, world.num_classes)
    model = GeneratorModel.create(model_config, make_rng(config.seed, "init-generator"))
    rows = _run_training(model, world, config, generator=None, checkpoint_cb=checkpoint_cb)
    return model, rows


def train_critic(
    generator,
    world: SyntheticWorld,
    config: TrainConfig,
    model_config: TransformerConfig | None = None,
    checkpoint_cb=None,
):
    """BCE training of the critic against a frozen generator."""
    from .nets import default_critic_config

    if model_config is None:
        model_config = default_critic_config(world.k, world.n, world.num_classes)
    model = CriticModel.create(model_config, make_rng(config.seed, "init-critic"))
    frozen = generator.checksum()
    rows = _run_training(model, world, config, generator=generator, checkpoint_cb=checkpoint_cb)
    if generator.checksum() != frozen:
        raise RuntimeError("generator weights changed during critic training")
    return model, rows


def _run_training(model, world, config: TrainConfig, generator, checkpoint_cb=None):
    is_critic = generator is not None
    rng = make_rng(config.seed, "train-critic" if is_critic else "train-generator")
    opt = nm.Adam(model.parameters(), config.optimizer)
    rows: list[tuple] = []
    heldout_metric = "bce" if is_critic else "masked_ce"
    best = math.inf
    best_snap = _snapshot(model)
    stale = 0
    stopped = False
    for step in range(1, config.total_steps + 1):
        x0, classes, bits, x_t = draw_masked_batch(
            world, config.batch_size, rng, config.gamma_kind, config.mask_count_override
        )
        if is_critic:
            fill = _sample_fill(generator, x_t, classes, config.fill_temperature, rng)
            x_hat = merge_tokens(fill, x_t, bits)
            logits = model.forward_batch(x_hat, classes, training=True, rng=rng)
            loss = nm.loss_bce_with_logits(logits, bits.astype(np.float64))
        else:
            weights = 1.0 - bits.astype(np.float64)
            if weights.sum() == 0:  # no supervised positions anywhere in the batch
                continue
            logits = model.forward_batch(x_t, classes, training=True, rng=rng)
            loss = nm.loss_cross_entropy(logits, x0.astype(np.int64), weights)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step)
        nm.backward(loss)
        opt.step()
        rows.append((step, "train", "loss", value))
        if step % config.eval_interval == 0 or step == config.total_steps:
            metrics = evaluate_heldout(
                model,
                world,
                config.eval_batches,
                batch_size=config.batch_size,
                seed=config.seed,
                generator=generator,
                gamma_kind=config.gamma_kind,
                mask_count_override=config.mask_count_override,
                fill_temperature=config.fill_temperature,
            )
            for name, v in metrics.items():
                rows.append((step, "heldout", name, v))
            if checkpoint_cb is not None:
                checkpoint_cb(step, model)
            current = metrics[heldout_metric]
            if current < best - config.min_delta:
                best = current
                best_snap = _snapshot(model)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    stopped = True
                    break
    _restore(model, best_snap)
    if stopped:
        rows.append((rows[-1][0], "heldout", "early_stop", 1.0))
    return rows


def evaluate_heldout(
    model,
    world: SyntheticWorld,
    n_batches: int,
    batch_size: int = 64,
    seed: int = 0,
    generator=None,
    gamma_kind: str = "cosine",
    mask_count_override: int | None = None,
    fill_temperature: float = 1.0,
) -> dict[str, float]:
    """Masked CE for generators; BCE plus AUC for critics. No updates."""
    rng = make_rng(seed, "heldout-eval")
    is_critic = generator is not None
    ce_num = 0.0
    ce_den = 0
    bce_num = 0.0
    bce_den = 0
    scores: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    with nm.no_grad():
        for _ in range(n_batches):
            x0, classes, bits, x_t = draw_masked_batch(
                world, batch_size, rng, gamma_kind, mask_count_override
            )
            if is_critic:
                fill = _sample_fill(generator, x_t, classes, fill_temperature, rng)
                x_hat = merge_tokens(fill, x_t, bits)
                logits = model.forward_batch(x_hat, classes).data
                targets = bits.astype(np.float64)
                per = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
                bce_num += per.sum()
                bce_den += per.size
                scores.append(logits.reshape(-1))
                labels.append(bits.reshape(-1))
            else:
                masked = bits == 0
                if not masked.any():
                    continue
                logits = model.forward_batch(x_t, classes).data
                z = logits - logits.max(axis=-1, keepdims=True)
                logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
                picked = np.take_along_axis(
                    logp, x0.astype(np.int64)[..., None], axis=-1
                )[..., 0]
                ce_num += -(picked[masked]).sum()
                ce_den += int(masked.sum())
    if is_critic:
        return {
            "bce": bce_num / bce_den,
            "auc": auc_score(np.concatenate(scores), np.concatenate(labels)),
        }
    return {"masked_ce": ce_num / ce_den}


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC (ties averaged); labels are 1 for positives."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


class OracleGeneratorAdapter:
    """Stands in for a trained generator: exact conditional log-probs as logits.

    Lets the critic trainer run against a generator whose per-position fill
    distribution is exactly the world's conditional.
    """

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self._oracles = {c: ConditionalOracle(world, c) for c in range(world.num_classes)}
        self.config = SimpleNamespace(grid_size=world.n, vocab_out=world.k)

    def forward_batch(self, tokens, classes, training=False, rng=None):
        tokens = np.asarray(tokens)
        classes = np.asarray(classes)
        out = np.empty((tokens.shape[0], self.world.n, self.world.k))
        for c in np.unique(classes):
            sel = classes == c
            out[sel] = self._oracles[int(c)].conditionals(tokens[sel])
        return nm.Tensor(np.log(np.clip(out, 1e-300, None)))

    def parameters(self):
        return []

    def checksum(self) -> str:
        return "oracle"
