"""Shared fixtures. The trained models are session-scoped because training,
while desk-scale, is the expensive part of the suite; every test that needs a
trained model shares these."""

import pytest

from masklab import learn, nets, worlds
from masklab import numerics as nm
from masklab.rng import make_rng
from masklab.tokenspace import GridShape, Vocabulary


def _gen_config(world, layers=2, heads=4, embed=48, hidden=192):
    return nets.TransformerConfig(
        layers=layers, heads=heads, embed_dim=embed, hidden_dim=hidden,
        grid_size=world.n, max_positions=world.n + 1,
        vocab_in=world.k + 1, num_classes=world.num_classes,
        head_kind="categorical_K", vocab_out=world.k,
    )


def _critic_config(world, layers=2, heads=4, embed=32, hidden=128):
    return nets.TransformerConfig(
        layers=layers, heads=heads, embed_dim=embed, hidden_dim=hidden,
        grid_size=world.n, max_positions=world.n + 1,
        vocab_in=world.k, num_classes=world.num_classes, head_kind="binary",
    )


@pytest.fixture(scope="session")
def tiny_world():
    return worlds.make_potts_world(GridShape(2, 2), Vocabulary(3), couplings=[0.7, -0.7])


@pytest.fixture(scope="session")
def tiny_models(tiny_world):
    """Briefly trained generator and critic on the 2x2 world."""
    w = tiny_world
    gen_cfg = nets.TransformerConfig(
        layers=2, heads=2, embed_dim=24, hidden_dim=48,
        grid_size=4, max_positions=5, vocab_in=4, num_classes=2,
        head_kind="categorical_K", vocab_out=3,
    )
    train = learn.TrainConfig(
        epochs=6, steps_per_epoch=100, batch_size=64,
        optimizer=nm.OptimizerConfig(learning_rate=2e-3),
        eval_interval=200, eval_batches=4, seed=17,
    )
    gen, _ = learn.train_generator(w, train, gen_cfg)
    crit_cfg = nets.TransformerConfig(
        layers=2, heads=2, embed_dim=24, hidden_dim=48,
        grid_size=4, max_positions=5, vocab_in=3, num_classes=2, head_kind="binary",
    )
    crit, _ = learn.train_critic(gen, w, train, crit_cfg)
    return gen, crit


# ---------------------------------------------------------------------------
# Acceptance-scale models: the pipeline on the two default worlds.
# Sizes are desk-scale so the whole acceptance suite stays inside its
# runtime budgets on plain BLAS.
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def world_a():
    return worlds.world_a()


@pytest.fixture(scope="session")
def world_b():
    return worlds.world_b()


@pytest.fixture(scope="session")
def models_a(world_a):
    """World A generator; the pattern world trains quickly."""
    w = world_a
    train_g = learn.TrainConfig(
        epochs=10, steps_per_epoch=100, batch_size=128,
        optimizer=nm.OptimizerConfig(learning_rate=1e-3),
        eval_interval=200, eval_batches=8, seed=101, patience=4,
    )
    gen, _ = learn.train_generator(w, train_g, _gen_config(w, embed=40, hidden=160))
    return gen


@pytest.fixture(scope="session")
def critic_a_vs_random(world_a):
    """World A critic trained against a random-init generator.

    A fully trained pattern-world generator matches the true conditionals so
    closely that the critic's task becomes information-free (the
    oracle-substitution effect); against random fills the critic learns the
    world's structure and can flag implausible tokens.
    """
    w = world_a
    gen = nets.GeneratorModel.create(_gen_config(w, embed=40, hidden=160), make_rng(0, "wa-random"))
    train_c = learn.TrainConfig(
        epochs=10, steps_per_epoch=100, batch_size=128,
        optimizer=nm.OptimizerConfig(learning_rate=1e-3),
        eval_interval=200, eval_batches=8, seed=102, patience=4,
    )
    crit, _ = learn.train_critic(gen, w, train_c, _critic_config(w))
    return crit


@pytest.fixture(scope="session")
def models_b(world_b):
    """World B generator and critic at the calibrated acceptance scale."""
    w = world_b
    train_g = learn.TrainConfig(
        epochs=20, steps_per_epoch=100, batch_size=128,
        optimizer=nm.OptimizerConfig(learning_rate=1e-3),
        eval_interval=200, eval_batches=8, seed=103, patience=6,
    )
    gen, _ = learn.train_generator(w, train_g, _gen_config(w, embed=40, hidden=160))
    train_c = learn.TrainConfig(
        epochs=30, steps_per_epoch=100, batch_size=128,
        optimizer=nm.OptimizerConfig(learning_rate=1e-3),
        eval_interval=300, eval_batches=8, seed=104, patience=6,
    )
    crit, _ = learn.train_critic(gen, w, train_c, _critic_config(w))
    return gen, crit
