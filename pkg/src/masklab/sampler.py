"""Iterative decoding: critic-guided sampling, the confidence baseline, a
random selector, an exact ancestral oracle, refinement, and rejection.

One selection loop drives everything. Per step t = T..1 it proposes tokens
for the masked positions at the annealed temperature, merges them into a
complete grid, scores every position, and re-masks the k = mask_count(t-1)
lowest-scoring ones. Selector semantics:

* ``critic``      - scores are sigmoid(critic logits) over the merged grid,
                    ranked over ALL positions, so previously kept tokens can
                    be revoked.
* ``confidence``  - scores are the proposal probability of each sampled
                    token; visible positions are locked (score +inf), so the
                    decode is greedy and never re-masks.
* ``random``      - uniform scores, locked like confidence; with an exact
                    conditional proposal and a one-position-per-step count
                    sequence this reproduces the true joint exactly.

Selection noise is added to critic/confidence scores before ranking and
anneals linearly to zero. Every run owns a counter-derived random stream, so
results never depend on batching or scheduling order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .nets import ARGMAX_TEMPERATURE, CriticModel, GeneratorModel, tempered_softmax
from .rng import run_streams
from .schedule import Schedule
from .tokenspace import (
    TOKEN_DTYPE,
    GridShape,
    TokenGrid,
    Vocabulary,
    apply_mask_tokens,
    merge_tokens,
)
from .worlds import ConditionalOracle, SyntheticWorld

SELECTORS = ("critic", "confidence", "random", "oracle_conditional")

_LOCKED = np.inf


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    schedule: Schedule
    selector: str
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}")
        if self.schedule.total_steps != self.steps:
            raise ValueError("schedule.total_steps must equal sampler steps")


def make_sampler_config(
    steps: int,
    selector: str,
    noise_scale: float = 0.0,
    temp_slope: float = 1.0,
    temp_intercept: float = 0.5,
    gamma_kind: str = "cosine",
    seed: int = 0,
) -> SamplerConfig:
    sched = Schedule(
        total_steps=steps,
        gamma_kind=gamma_kind,
        noise_scale=noise_scale,
        temp_slope=temp_slope,
        temp_intercept=temp_intercept,
    )
    return SamplerConfig(steps=steps, schedule=sched, selector=selector, seed=seed)


@dataclass
class SelectionStep:
    t: int
    k: int
    scores: np.ndarray  # (N,) ranking scores after noise; +inf marks locked positions
    threshold: float
    mask_bits: np.ndarray  # m_{t-1}
    pre_tokens: np.ndarray  # x_t
    post_tokens: np.ndarray  # x_{t-1}


@dataclass
class Trace:
    class_index: int
    total_steps: int
    steps: list[SelectionStep] = field(default_factory=list)

    def state_at(self, t: int) -> np.ndarray:
        """The masked grid x_t: pre of the first step at t=T, else post of step t+1."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"t={t} outside [0, {self.total_steps}]")
        if t == self.total_steps:
            return self.steps[0].pre_tokens
        return self.steps[self.total_steps - t - 1].post_tokens

    @property
    def final_tokens(self) -> np.ndarray:
        return self.steps[-1].post_tokens


# ---------------------------------------------------------------------------
# Proposals: fill masked positions, report each proposed token's probability
# ---------------------------------------------------------------------------


def _draw_from_logits(logits: np.ndarray, temperature: float, gumbel: np.ndarray):
    """(ids, prob of id) under softmax(logits / temperature), argmax at temp->0."""
    if temperature < ARGMAX_TEMPERATURE:
        ids = logits.argmax(axis=-1)
        probs_of = np.ones(ids.shape)
        return ids.astype(TOKEN_DTYPE), probs_of
    scaled = logits / temperature
    ids = (scaled + gumbel).argmax(axis=-1)
    probs = tempered_softmax(logits, temperature)
    probs_of = np.take_along_axis(probs, ids[..., None], axis=-1)[..., 0]
    return ids.astype(TOKEN_DTYPE), probs_of


def model_proposal(generator: GeneratorModel):
    def propose(tokens, classes, temperature, gumbel):
        with nm.no_grad():
            logits = generator.forward_batch(tokens, classes).data
        return _draw_from_logits(logits, temperature, gumbel)

    return propose


def oracle_proposal(world: SyntheticWorld, class_index: int):
    """Exact per-position conditionals given the visible tokens, as a proposal."""
    oracle = ConditionalOracle(world, class_index)

    def propose(tokens, classes, temperature, gumbel):
        dist = oracle.conditionals(tokens)
        logits = np.log(np.clip(dist, 1e-300, None))
        return _draw_from_logits(logits, temperature, gumbel)

    return propose


# ---------------------------------------------------------------------------
# Rank-k selection
# ---------------------------------------------------------------------------


def rank_k_mask(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask the k lowest (score, position) pairs per row; stable sort means
    ties mask the lower position first. Returns (keep bits, thresholds)."""
    b, n = scores.shape
    bits = np.ones((b, n), dtype=np.uint8)
    if k == 0:
        return bits, np.full(b, -np.inf)
    order = np.argsort(scores, axis=1, kind="stable")
    np.put_along_axis(bits, order[:, :k], 0, axis=1)
    thresholds = np.take_along_axis(scores, order[:, k - 1 : k], axis=1)[:, 0]
    return bits, thresholds


# ---------------------------------------------------------------------------
# The selection loop
# ---------------------------------------------------------------------------


def run_selection_loop(
    *,
    propose,
    selector: str,
    classes: np.ndarray,
    steps: int,
    sched: Schedule,
    n: int,
    mask_id: int,
    streams: list[np.random.Generator],
    critic: CriticModel | None = None,
    mask_count_fn=None,
    initial_tokens: np.ndarray | None = None,
    initial_bits: np.ndarray | None = None,
    collect_traces: bool = False,
) -> tuple[np.ndarray, list[Trace]]:
    """Run the iterative decode for one batch; one stream per run.

    ``mask_count_fn(t)`` gives the masked count after the step ending at time
    t; it defaults to the schedule's ceil(gamma(t/T) * n). The final count
    must be 0 so the loop provably terminates with complete grids.
    """
    if selector not in ("critic", "confidence", "random"):
        raise ValueError(f"selection loop cannot run selector {selector!r}")
    if selector == "critic" and critic is None:
        raise ValueError("critic selector requires a critic model")
    b = len(streams)
    classes = np.asarray(classes)
    if mask_count_fn is None:

        def mask_count_fn(t):
            return sched.mask_count(t, n)

    if initial_tokens is None:
        tokens = np.full((b, n), mask_id, dtype=TOKEN_DTYPE)
        bits = np.zeros((b, n), dtype=np.uint8)
    else:
        tokens = np.array(initial_tokens, dtype=TOKEN_DTYPE)
        bits = np.array(initial_bits, dtype=np.uint8)
    k_vocab = mask_id  # proposals live in the codebook 0..K-1
    gumbels = np.stack([-np.log(-np.log(g.random((steps, n, k_vocab)))) for g in streams])
    noise_u = np.stack([g.random((steps, n)) for g in streams])
    rand_scores = np.stack([g.random((steps, n)) for g in streams])
    traces = [Trace(int(c), steps) for c in classes] if collect_traces else []

    for t in range(steps, 0, -1):
        step_i = steps - t
        temperature = sched.temperature(t)
        proposals, prop_probs = propose(tokens, classes, temperature, gumbels[:, step_i])
        x_hat = merge_tokens(proposals, tokens, bits)
        noise = (noise_u[:, step_i] - 0.5) * (sched.noise_scale * t / sched.total_steps)
        if selector == "critic":
            with nm.no_grad():
                logits = critic.forward_batch(x_hat, classes).data
            scores = 1.0 / (1.0 + np.exp(-logits)) + noise
        elif selector == "confidence":
            scores = np.where(bits == 1, _LOCKED, prop_probs + noise)
        else:
            scores = np.where(bits == 1, _LOCKED, rand_scores[:, step_i])
        k = int(mask_count_fn(t - 1))
        if selector != "critic" and k > int(n - bits[0].sum()):
            raise RuntimeError("mask counts must be nonincreasing for locked selectors")
        new_bits, thresholds = rank_k_mask(scores, k)
        new_tokens = apply_mask_tokens(x_hat, new_bits, mask_id)
        if collect_traces:
            for i, tr in enumerate(traces):
                tr.steps.append(
                    SelectionStep(
                        t=t,
                        k=k,
                        scores=scores[i].copy(),
                        threshold=float(thresholds[i]),
                        mask_bits=new_bits[i].copy(),
                        pre_tokens=tokens[i].copy(),
                        post_tokens=new_tokens[i].copy(),
                    )
                )
        tokens, bits = new_tokens, new_bits
    if not bits.all() or np.any(tokens == mask_id):
        raise RuntimeError("sampler finished with an incomplete grid")
    return tokens, traces


# ---------------------------------------------------------------------------
# Public sampling surfaces
# ---------------------------------------------------------------------------


def _grid_of(tokens: np.ndarray, n: int, mask_id: int) -> TokenGrid:
    return TokenGrid(GridShape(1, n), Vocabulary(mask_id), tokens)


def sample_critic(
    generator: GeneratorModel,
    critic: CriticModel,
    class_index: int,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[TokenGrid, Trace]:
    """One critic-guided run; scores rank all positions, so kept tokens can
    be re-masked."""
    n = generator.config.grid_size
    tokens, traces = run_selection_loop(
        propose=model_proposal(generator),
        selector="critic",
        critic=critic,
        classes=np.array([class_index]),
        steps=config.steps,
        sched=config.schedule,
        n=n,
        mask_id=generator.config.vocab_out,
        streams=[rng],
        collect_traces=True,
    )
    return _grid_of(tokens[0], n, generator.config.vocab_out), traces[0]


def sample_confidence(
    generator: GeneratorModel,
    class_index: int,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[TokenGrid, Trace]:
    """One greedy confidence-baseline run; kept positions stay locked forever."""
    n = generator.config.grid_size
    tokens, traces = run_selection_loop(
        propose=model_proposal(generator),
        selector="confidence",
        classes=np.array([class_index]),
        steps=config.steps,
        sched=config.schedule,
        n=n,
        mask_id=generator.config.vocab_out,
        streams=[rng],
        collect_traces=True,
    )
    return _grid_of(tokens[0], n, generator.config.vocab_out), traces[0]


def sample_runs(
    *,
    selector: str,
    class_index: int,
    count: int,
    config: SamplerConfig,
    generator: GeneratorModel | None = None,
    critic: CriticModel | None = None,
    world: SyntheticWorld | None = None,
    stream_label="sample",
    stream_start: int = 0,
    collect_traces: bool = False,
    trace_limit: int | None = None,
    chunk: int = 4096,
) -> tuple[np.ndarray, list[Trace]]:
    """Many runs with per-run streams derived from (config.seed, label, index).

    selector ``oracle_conditional`` needs only the world; the others need the
    generator (and the critic for ``critic``).
    """
    if selector not in SELECTORS:
        raise ValueError(f"selector must be one of {SELECTORS}")
    if selector == "oracle_conditional":
        if world is None:
            raise ValueError("oracle_conditional sampling requires a world")
        out = np.empty((count, world.n), dtype=TOKEN_DTYPE)
        done = 0
        while done < count:
            size = min(chunk, count - done)
            streams = run_streams(config.seed, stream_label, size, stream_start + done)
            out[done : done + size] = sample_oracle_conditional_batch(
                world, class_index, "random", streams
            )
            done += size
        return out, []
    if generator is None:
        raise ValueError(f"selector {selector!r} requires a generator")
    n = generator.config.grid_size
    mask_id = generator.config.vocab_out
    out = np.empty((count, n), dtype=TOKEN_DTYPE)
    traces: list[Trace] = []
    done = 0
    while done < count:
        size = min(chunk, count - done)
        streams = run_streams(config.seed, stream_label, size, stream_start + done)
        want_traces = collect_traces and (trace_limit is None or len(traces) < trace_limit)
        chunk_tokens, chunk_traces = run_selection_loop(
            propose=model_proposal(generator),
            selector=selector,
            critic=critic,
            classes=np.full(size, class_index),
            steps=config.steps,
            sched=config.schedule,
            n=n,
            mask_id=mask_id,
            streams=streams,
            collect_traces=want_traces,
        )
        out[done : done + size] = chunk_tokens
        if want_traces:
            room = len(chunk_traces) if trace_limit is None else trace_limit - len(traces)
            traces.extend(chunk_traces[:room])
        done += size
    return out, traces


# ---------------------------------------------------------------------------
# Exact ancestral oracle sampler
# ---------------------------------------------------------------------------


def sample_oracle_conditional_batch(
    world: SyntheticWorld,
    class_index: int,
    order_policy: str,
    streams: list[np.random.Generator],
) -> np.ndarray:
    """Reveal one position per step from the exact conditional; the order never
    depends on sampled values, so the output law is exactly the joint."""
    if order_policy not in ("sequential", "random"):
        raise ValueError("order_policy must be 'sequential' or 'random'")
    b, n = len(streams), world.n
    oracle = ConditionalOracle(world, class_index)
    if order_policy == "sequential":
        orders = np.tile(np.arange(n), (b, 1))
    else:
        orders = np.stack([g.permutation(n) for g in streams])
    uniforms = np.stack([g.random(n) for g in streams])
    tokens = np.full((b, n), world.vocab.mask_id, dtype=TOKEN_DTYPE)
    rows = np.arange(b)
    for s in range(n):
        dist = oracle.conditionals(tokens)[rows, orders[:, s]]
        cdf = dist.cumsum(axis=1)
        ids = (uniforms[:, s : s + 1] > cdf).sum(axis=1)
        tokens[rows, orders[:, s]] = ids
    return tokens


def sample_oracle_conditional(
    world: SyntheticWorld,
    class_index: int,
    order_policy: str,
    rng: np.random.Generator,
) -> TokenGrid:
    tokens = sample_oracle_conditional_batch(world, class_index, order_policy, [rng])
    return TokenGrid(world.shape, world.vocab, tokens[0])


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------


def refine_batch(
    generator: GeneratorModel,
    critic: CriticModel,
    tokens: np.ndarray,
    classes: np.ndarray,
    ratio: float,
    steps: int,
    streams: list[np.random.Generator],
    sched: Schedule | None = None,
) -> np.ndarray:
    """Re-mask the lowest-critic-score fraction and re-decode on a shrunk
    cosine schedule: masked counts ceil(gamma(t/steps) * ratio * N).

    The default schedule is a pure quality pass: no selection noise (the
    critic ranking is taken exactly) and constant temperature 1 refills.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if sched is None:
        sched = Schedule(total_steps=steps, noise_scale=0.0, temp_slope=0.0, temp_intercept=1.0)
    elif sched.total_steps != steps:
        raise ValueError("schedule.total_steps must equal refinement steps")
    tokens = np.atleast_2d(np.asarray(tokens, dtype=TOKEN_DTYPE))
    classes = np.asarray(classes)
    b, n = tokens.shape
    mask_id = generator.config.vocab_out
    if np.any(tokens >= mask_id):
        raise ValueError("refine input grids must be complete")

    def counts(t: int) -> int:
        return min(n, int(np.ceil(sched.gamma(t / steps) * ratio * n)))

    # initial rejection: rank the critic scores on the input grid itself
    init_noise = np.stack([g.random(n) for g in streams])
    with nm.no_grad():
        logits = critic.forward_batch(tokens, classes).data
    scores = 1.0 / (1.0 + np.exp(-logits)) + (init_noise - 0.5) * sched.noise_scale
    bits, _ = rank_k_mask(scores, counts(steps))
    masked_tokens = apply_mask_tokens(tokens, bits, mask_id)
    out, _ = run_selection_loop(
        propose=model_proposal(generator),
        selector="critic",
        critic=critic,
        classes=classes,
        steps=steps,
        sched=sched,
        n=n,
        mask_id=mask_id,
        streams=streams,
        mask_count_fn=counts,
        initial_tokens=masked_tokens,
        initial_bits=bits,
    )
    return out


def refine(
    generator: GeneratorModel,
    critic: CriticModel,
    x_in: TokenGrid,
    class_index: int,
    ratio: float,
    steps: int,
    rng: np.random.Generator,
    sched: Schedule | None = None,
) -> TokenGrid:
    """Single-grid refinement; see refine_batch."""
    x_in.require_complete("refine input")
    out = refine_batch(
        generator,
        critic,
        x_in.tokens[None, :],
        np.array([class_index]),
        ratio,
        steps,
        [rng],
        sched=sched,
    )
    return TokenGrid(x_in.shape, x_in.vocab, out[0])


# ---------------------------------------------------------------------------
# Classifier-based rejection sampling
# ---------------------------------------------------------------------------


def reject_sample(
    sample_fn,
    classifier,
    class_index: int,
    candidates: int,
    rng: np.random.Generator,
) -> TokenGrid:
    """Draw ``candidates`` grids via sample_fn(rng) and keep the one whose
    class-posterior for ``class_index`` is highest (first wins ties)."""
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    best = None
    best_score = -np.inf
    for _ in range(candidates):
        grid = sample_fn(rng)
        score = float(classifier(grid)[class_index])
        if score > best_score:
            best, best_score = grid, score
    return best


def argmax_per_group(scores: np.ndarray, group_size: int) -> np.ndarray:
    """Indices of the best candidate inside each consecutive group."""
    if scores.size % group_size:
        raise ValueError("scores length must be a multiple of group_size")
    grouped = scores.reshape(-1, group_size)
    return grouped.argmax(axis=1) + np.arange(grouped.shape[0]) * group_size
