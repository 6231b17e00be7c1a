"""Synthetic class-conditional worlds with exact enumeration and divergences.

Two families:

* ``pattern``: each class has a base grid; every cell independently keeps its
  base token with probability 1-rho and otherwise is uniform over the
  codebook. Product-form given the class, long-range structure across cells.
* ``potts``: Boltzmann distribution exp(J * #equal-neighbor-pairs) on the
  nearest-neighbor grid, one coupling per class. Genuinely non-factorized.

States are indexed mixed-radix with position 0 as the most significant digit.
Worlds and their cached dense tables are immutable after construction.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .schedule import gamma as gamma_fn
from .tokenspace import TOKEN_DTYPE, GridShape, TokenGrid, Vocabulary, random_mask

ENUMERATION_BOUND = 10**7

WORLD_KINDS = ("pattern", "potts")


@dataclass(frozen=True)
class SyntheticWorld:
    kind: str
    shape: GridShape
    vocab: Vocabulary
    num_classes: int
    class_prior: np.ndarray
    base_patterns: np.ndarray | None = None  # pattern: (C, N) base tokens
    corruption_rate: float | None = None  # pattern: per-cell corruption rho
    couplings: np.ndarray | None = None  # potts: (C,) coupling J per class
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in WORLD_KINDS:
            raise ValueError(f"world kind must be one of {WORLD_KINDS}")
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.shape != (self.num_classes,) or prior.min() < 0:
            raise ValueError("class_prior must be a nonnegative vector of length num_classes")
        if abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("class_prior must sum to 1")
        object.__setattr__(self, "class_prior", prior)
        if self.kind == "pattern":
            pats = np.asarray(self.base_patterns, dtype=TOKEN_DTYPE)
            if pats.shape != (self.num_classes, self.shape.n):
                raise ValueError(
                    f"base_patterns must have shape ({self.num_classes}, {self.shape.n})"
                )
            if pats.min() < 0 or pats.max() >= self.vocab.size:
                raise ValueError("base pattern token outside the codebook")
            if not 0.0 <= float(self.corruption_rate) <= 1.0:
                raise ValueError("corruption_rate must lie in [0, 1]")
            object.__setattr__(self, "base_patterns", pats)
        else:
            coup = np.asarray(self.couplings, dtype=np.float64)
            if coup.shape != (self.num_classes,):
                raise ValueError("couplings must have shape (num_classes,)")
            object.__setattr__(self, "couplings", coup)

    @property
    def n(self) -> int:
        return self.shape.n

    @property
    def k(self) -> int:
        return self.vocab.size

    def cell_distributions(self, class_index: int) -> np.ndarray:
        """Pattern worlds: (N, K) per-cell token distribution given the class."""
        if self.kind != "pattern":
            raise ValueError("cell_distributions is defined for pattern worlds only")
        rho = float(self.corruption_rate)
        out = np.full((self.n, self.k), rho / self.k)
        out[np.arange(self.n), self.base_patterns[class_index]] += 1.0 - rho
        return out


def grid_edges(shape: GridShape) -> list[tuple[int, int]]:
    """Nearest-neighbor edges of the height x width grid, flattened row-major."""
    edges = []
    for i in range(shape.height):
        for j in range(shape.width):
            p = i * shape.width + j
            if j + 1 < shape.width:
                edges.append((p, p + 1))
            if i + 1 < shape.height:
                edges.append((p, p + shape.width))
    return edges


# ---------------------------------------------------------------------------
# Mixed-radix state indexing (position 0 most significant)
# ---------------------------------------------------------------------------


def state_weights(n: int, base: int) -> np.ndarray:
    return (base ** np.arange(n - 1, -1, -1)).astype(np.int64)


def tokens_to_state(tokens: np.ndarray, base: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return tokens @ state_weights(tokens.shape[-1], base)


def state_to_tokens(states: np.ndarray, n: int, base: int) -> np.ndarray:
    states = np.asarray(states, dtype=np.int64)
    out = np.empty(states.shape + (n,), dtype=TOKEN_DTYPE)
    for j in range(n):
        out[..., j] = (states // base ** (n - 1 - j)) % base
    return out


# ---------------------------------------------------------------------------
# Exact enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointTable:
    """Dense exact probabilities for one class; index = mixed-radix state."""

    class_index: int
    n: int
    k: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def as_nd(self) -> np.ndarray:
        return self.probs.reshape((self.k,) * self.n)


def _check_enumerable(n_states: int, what: str) -> None:
    if n_states > ENUMERATION_BOUND:
        need = n_states * 8 / 2**20
        raise ValueError(
            f"{what}: {n_states} states exceed the enumerability bound "
            f"{ENUMERATION_BOUND} (~{need:.0f} MiB dense)"
        )


def enumerate_joint(world: SyntheticWorld, class_index: int) -> JointTable:
    """Exact dense joint for one class; cached on the world."""
    if not 0 <= class_index < world.num_classes:
        raise ValueError(f"class index {class_index} outside 0..{world.num_classes - 1}")
    key = ("joint", class_index)
    if key in world._cache:
        return world._cache[key]
    n_states = world.k**world.n
    _check_enumerable(n_states, "enumerate_joint")
    if world.kind == "pattern":
        cells = world.cell_distributions(class_index)
        probs = np.ones(1)
        for j in range(world.n):
            probs = np.kron(probs, cells[j])
    else:
        digits = state_to_tokens(np.arange(n_states), world.n, world.k)
        agree = np.zeros(n_states)
        for u, v in grid_edges(world.shape):
            agree += digits[:, u] == digits[:, v]
        logw = float(world.couplings[class_index]) * agree
        logw -= logw.max()
        probs = np.exp(logw)
        probs /= probs.sum()
    table = JointTable(class_index, world.n, world.k, probs)
    world._cache[key] = table
    return table


def _class_cdf(world: SyntheticWorld, class_index: int) -> np.ndarray:
    key = ("cdf", class_index)
    if key not in world._cache:
        world._cache[key] = np.cumsum(enumerate_joint(world, class_index).probs)
    return world._cache[key]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_world_batch(
    world: SyntheticWorld,
    count: int,
    rng: np.random.Generator,
    class_index: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(tokens (count, N), classes (count,)) exact i.i.d. draws."""
    if class_index is None:
        classes = rng.choice(world.num_classes, size=count, p=world.class_prior)
    else:
        classes = np.full(count, class_index, dtype=np.int64)
    states = np.empty(count, dtype=np.int64)
    for c in np.unique(classes):
        sel = classes == c
        cdf = _class_cdf(world, int(c))
        states[sel] = np.searchsorted(cdf, rng.random(int(sel.sum())), side="right")
    tokens = state_to_tokens(states, world.n, world.k)
    return tokens, classes.astype(np.int64)


def sample_world(world: SyntheticWorld, rng: np.random.Generator) -> tuple[TokenGrid, int]:
    """One exact draw (x0, c) from prior times class-conditional joint."""
    tokens, classes = sample_world_batch(world, 1, rng)
    return TokenGrid(world.shape, world.vocab, tokens[0]), int(classes[0])


# ---------------------------------------------------------------------------
# Exact conditionals and class posterior
# ---------------------------------------------------------------------------


def _evidence_view(table: JointTable, tokens: np.ndarray, mask_id: int):
    """Dense sub-table consistent with the visible tokens, plus hidden axes."""
    nd = table.as_nd()
    idx = []
    hidden = []
    for j in range(table.n):
        if tokens[j] == mask_id:
            idx.append(slice(None))
            hidden.append(j)
        else:
            idx.append(int(tokens[j]))
    return nd[tuple(idx)], hidden


def exact_conditional(
    world: SyntheticWorld, class_index: int, partial: TokenGrid, position: int
) -> np.ndarray:
    """Exact q(x_position = . | visible tokens, class) by dense marginalization."""
    tokens = partial.tokens
    if tokens[position] != world.vocab.mask_id:
        raise ValueError(f"position {position} is already visible")
    if world.kind == "pattern":
        # cells are independent given the class, but evidence must be possible
        if float(world.corruption_rate) == 0.0:
            base = world.base_patterns[class_index]
            vis = tokens != world.vocab.mask_id
            if np.any(tokens[vis] != base[vis]):
                raise ValueError("impossible evidence under this world")
        return world.cell_distributions(class_index)[position].copy()
    sub, hidden = _evidence_view(enumerate_joint(world, class_index), tokens, world.vocab.mask_id)
    axis = hidden.index(position)
    vec = sub.sum(axis=tuple(a for a in range(sub.ndim) if a != axis))
    mass = vec.sum()
    if mass <= 0.0:
        raise ValueError("impossible evidence under this world")
    return vec / mass


def class_posterior_batch(world: SyntheticWorld, tokens: np.ndarray) -> np.ndarray:
    """(B, C) Bayes posterior over classes for complete grids (B, N)."""
    tokens = np.atleast_2d(tokens)
    if np.any(tokens == world.vocab.mask_id):
        raise ValueError("class_posterior requires complete grids")
    states = tokens_to_state(tokens, world.k)
    lik = np.stack(
        [enumerate_joint(world, c).probs[states] for c in range(world.num_classes)], axis=1
    )
    joint = lik * world.class_prior[None, :]
    mass = joint.sum(axis=1, keepdims=True)
    dead = mass[:, 0] == 0.0
    if dead.any():
        warnings.warn(
            f"{int(dead.sum())} grid(s) impossible under every class; uniform posterior returned",
            RuntimeWarning,
            stacklevel=2,
        )
        joint[dead] = 1.0
        mass[dead] = world.num_classes
    return joint / mass


def class_posterior(world: SyntheticWorld, x0: TokenGrid) -> np.ndarray:
    x0.require_complete("class_posterior input")
    return class_posterior_batch(world, x0.tokens[None, :])[0]


# ---------------------------------------------------------------------------
# Metrics against the exact joint
# ---------------------------------------------------------------------------

KL_SMOOTHING = 1e-9
MIN_METRIC_SAMPLES = 100


@dataclass(frozen=True)
class MetricsRecord:
    n_samples: int
    joint_tv: float
    forward_cross_entropy: float
    plugin_kl: float
    marginal_tv: float
    distinct_ratio: float
    class_consistency: float

    def as_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "joint_tv": self.joint_tv,
            "forward_cross_entropy": self.forward_cross_entropy,
            "plugin_kl": self.plugin_kl,
            "marginal_tv": self.marginal_tv,
            "distinct_ratio": self.distinct_ratio,
            "class_consistency": self.class_consistency,
        }


def _as_token_matrix(samples, world: SyntheticWorld) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        mat = np.asarray(samples, dtype=np.int64)
        mat = np.atleast_2d(mat)
    else:
        mat = np.stack([np.asarray(g.tokens, dtype=np.int64) for g in samples])
    if mat.shape[1] != world.n:
        raise ValueError(f"samples have {mat.shape[1]} positions, world has {world.n}")
    if mat.min() < 0 or mat.max() >= world.k:
        raise ValueError("samples must be complete grids over the codebook")
    return mat


def compare_to_truth(samples, world: SyntheticWorld, class_index: int) -> MetricsRecord:
    """All divergence metrics of a single-class sample set vs the exact joint.

    joint_tv is the plug-in total variation over the dense table and is the
    primary comparison metric; plugin_kl is KL(truth || smoothed empirical)
    with add-lambda smoothing so unobserved states contribute boundedly.
    """
    mat = _as_token_matrix(samples, world)
    b = mat.shape[0]
    if b < MIN_METRIC_SAMPLES:
        raise ValueError(f"need at least {MIN_METRIC_SAMPLES} samples, got {b}")
    table = enumerate_joint(world, class_index)
    q = table.probs
    states = tokens_to_state(mat, world.k)
    counts = np.bincount(states, minlength=q.size).astype(np.float64)
    phat = counts / b
    joint_tv = 0.5 * np.abs(phat - q).sum()
    with np.errstate(divide="ignore"):
        forward_ce = float(np.mean(-np.log(q[states])))
    smoothed = (counts + KL_SMOOTHING) / (b + KL_SMOOTHING * q.size)
    nz = q > 0
    plugin_kl = float(np.sum(q[nz] * (np.log(q[nz]) - np.log(smoothed[nz]))))
    nd = table.as_nd()
    per_pos = []
    for j in range(world.n):
        exact_marg = nd.sum(axis=tuple(a for a in range(world.n) if a != j))
        emp = np.bincount(mat[:, j], minlength=world.k) / b
        per_pos.append(0.5 * np.abs(emp - exact_marg).sum())
    distinct = np.unique(states).size / b
    consistency = float(class_posterior_batch(world, mat)[:, class_index].mean())
    return MetricsRecord(
        n_samples=b,
        joint_tv=float(joint_tv),
        forward_cross_entropy=forward_ce,
        plugin_kl=plugin_kl,
        marginal_tv=float(np.mean(per_pos)),
        distinct_ratio=float(distinct),
        class_consistency=consistency,
    )


# ---------------------------------------------------------------------------
# Masked-state divergence (real vs sampler intermediates)
# ---------------------------------------------------------------------------

MIN_DIVERGENCE_TRACES = 10**4


def masked_state_distribution(
    world: SyntheticWorld, class_index: int, masked_count: int
) -> np.ndarray:
    """Exact distribution of x0 masked at ``masked_count`` uniform positions.

    Dense over (K+1)^N mixed-radix states where digit K marks a masked cell.
    """
    base = world.k + 1
    n_states = base**world.n
    _check_enumerable(n_states, "masked_state_distribution")
    table = enumerate_joint(world, class_index)
    nd = table.as_nd()
    out = np.zeros(n_states)
    positions = list(range(world.n))
    masks = list(itertools.combinations(positions, masked_count))
    weights_full = state_weights(world.n, base)
    for masked in masks:
        keep = [j for j in positions if j not in masked]
        marg = nd.sum(axis=tuple(masked)) if masked else nd
        # scatter visible assignments into base-(K+1) indices
        offset = sum(world.k * weights_full[j] for j in masked)
        if keep:
            grids = state_to_tokens(np.arange(world.k ** len(keep)), len(keep), world.k)
            idx = grids.astype(np.int64) @ weights_full[list(keep)] + offset
            out[idx] += marg.reshape(-1) / len(masks)
        else:
            out[offset] += 1.0 / len(masks)
    return out


def intermediate_state_divergence(
    world: SyntheticWorld, sampler_traces, t: int, sched
) -> float:
    """KL(exact masked-state distribution || smoothed empirical) at step t."""
    if len(sampler_traces) < MIN_DIVERGENCE_TRACES:
        raise ValueError(
            f"need at least {MIN_DIVERGENCE_TRACES} traces, got {len(sampler_traces)}"
        )
    classes = {tr.class_index for tr in sampler_traces}
    if len(classes) != 1:
        raise ValueError("traces must all come from one class")
    class_index = classes.pop()
    r = sched.mask_count(t, world.n)
    q = masked_state_distribution(world, class_index, r)
    base = world.k + 1
    states = np.array(
        [tokens_to_state(tr.state_at(t), base) for tr in sampler_traces], dtype=np.int64
    )
    counts = np.bincount(states, minlength=q.size).astype(np.float64)
    smoothed = (counts + KL_SMOOTHING) / (len(sampler_traces) + KL_SMOOTHING * q.size)
    nz = q > 0
    return float(np.sum(q[nz] * (np.log(q[nz]) - np.log(smoothed[nz]))))


# ---------------------------------------------------------------------------
# Oracle-side training baseline
# ---------------------------------------------------------------------------


def _pattern_cell_table(world: SyntheticWorld) -> np.ndarray:
    key = ("cells",)
    if key not in world._cache:
        world._cache[key] = np.stack(
            [world.cell_distributions(c) for c in range(world.num_classes)]
        )
    return world._cache[key]


def _classmix_conditionals(
    world: SyntheticWorld, tokens: np.ndarray, mask_id: int
) -> np.ndarray:
    """(N, K) class-marginal conditionals q(x_j | visible tokens) for one grid."""
    if world.kind == "pattern":
        cells = _pattern_cell_table(world)  # (C, N, K)
        vis = tokens != mask_id
        logmass = np.zeros(world.num_classes)
        if vis.any():
            picked = cells[:, vis, tokens[vis].astype(int)]
            logmass = np.log(picked).sum(axis=1)
        w = world.class_prior * np.exp(logmass - logmass.max())
        w /= w.sum()
        return np.einsum("c,cjk->jk", w, cells)
    mass = np.empty(world.num_classes)
    conds = np.zeros((world.num_classes, world.n, world.k))
    for c in range(world.num_classes):
        sub, hidden = _evidence_view(enumerate_joint(world, c), tokens, mask_id)
        mass[c] = sub.sum()
        for axis, j in enumerate(hidden):
            vec = sub.sum(axis=tuple(a for a in range(sub.ndim) if a != axis))
            conds[c, j] = vec / max(vec.sum(), 1e-300)
    w = world.class_prior * mass
    w /= w.sum()
    return np.einsum("c,cjk->jk", w, conds)


def factorized_ce_baseline(
    world: SyntheticWorld,
    n_examples: int,
    rng: np.random.Generator,
    gamma_kind: str = "cosine",
) -> float:
    """Entropy floor of any per-position predictor that sees visible tokens only.

    Draws (x0, t, mask) from the training distribution and pools, over all
    masked positions, the entropy of the exact class-marginal conditional
    given the visible tokens. A class-conditioned model can go below this;
    a per-position model without the class label cannot.
    """
    total = 0.0
    count = 0
    for _ in range(n_examples):
        grid, _ = sample_world(world, rng)
        t = rng.random()
        r = min(world.n, math.ceil(world.n * gamma_fn(t, gamma_kind)))
        if r == 0:
            continue
        m = random_mask(world.n, r, rng)
        tokens = np.where(m.bits.astype(bool), grid.tokens, TOKEN_DTYPE(world.vocab.mask_id))
        conds = _classmix_conditionals(world, tokens, world.vocab.mask_id)
        masked = ~m.bits.astype(bool)
        p = conds[masked]
        total += float(-(p * np.log(np.clip(p, 1e-300, None))).sum())
        count += int(masked.sum())
    return total / count


# ---------------------------------------------------------------------------
# Fast repeated conditionals for oracle-driven sampling
# ---------------------------------------------------------------------------

_FULL_CONTEXT_LIMIT = 20_000


class ConditionalOracle:
    """Vectorized exact per-position conditionals for one (world, class).

    Pattern worlds have context-free conditionals. Small worlds precompute the
    full (K+1)^N context table; larger ones memoize contexts on demand.
    """

    def __init__(self, world: SyntheticWorld, class_index: int):
        self.world = world
        self.class_index = class_index
        self._memo: dict[int, np.ndarray] = {}
        self._full: np.ndarray | None = None
        if world.kind == "pattern":
            self._cells = world.cell_distributions(class_index)
        elif (world.k + 1) ** world.n <= _FULL_CONTEXT_LIMIT:
            self._full = self._build_full_table()

    def _conditionals_for_context(self, tokens: np.ndarray) -> np.ndarray:
        """(N, K) conditionals; visible rows are a one-hot of the current token."""
        out = np.zeros((self.world.n, self.world.k))
        mask_id = self.world.vocab.mask_id
        sub, hidden = _evidence_view(
            enumerate_joint(self.world, self.class_index), tokens, mask_id
        )
        for axis, j in enumerate(hidden):
            vec = np.asarray(sub).sum(axis=tuple(a for a in range(np.ndim(sub)) if a != axis))
            mass = vec.sum()
            if mass <= 0:
                raise ValueError("impossible evidence under this world")
            out[j] = vec / mass
        for j in range(self.world.n):
            if tokens[j] != mask_id:
                out[j, int(tokens[j])] = 1.0
        return out

    def _build_full_table(self) -> np.ndarray:
        base = self.world.k + 1
        n_ctx = base**self.world.n
        table = np.zeros((n_ctx, self.world.n, self.world.k))
        contexts = state_to_tokens(np.arange(n_ctx), self.world.n, base)
        for ctx in range(n_ctx):
            try:
                table[ctx] = self._conditionals_for_context(contexts[ctx])
            except ValueError:
                table[ctx] = 1.0 / self.world.k  # unreachable impossible-evidence contexts
        return table

    def conditionals(self, tokens: np.ndarray) -> np.ndarray:
        """(B, N, K) exact conditionals for a batch of partial grids (B, N)."""
        tokens = np.atleast_2d(tokens)
        if self.world.kind == "pattern":
            return np.broadcast_to(
                self._cells, (tokens.shape[0],) + self._cells.shape
            ).copy()
        if self._full is not None:
            idx = tokens_to_state(tokens, self.world.k + 1)
            return self._full[idx]
        out = np.empty((tokens.shape[0], self.world.n, self.world.k))
        for i in range(tokens.shape[0]):
            key = int(tokens_to_state(tokens[i], self.world.k + 1))
            if key not in self._memo:
                self._memo[key] = self._conditionals_for_context(tokens[i])
            out[i] = self._memo[key]
        return out


# ---------------------------------------------------------------------------
# Built-in worlds and JSON config
# ---------------------------------------------------------------------------


def make_pattern_world(
    shape: GridShape,
    vocab: Vocabulary,
    base_patterns: np.ndarray,
    corruption_rate: float,
    class_prior: np.ndarray | None = None,
) -> SyntheticWorld:
    pats = np.asarray(base_patterns, dtype=TOKEN_DTYPE)
    c = pats.shape[0]
    prior = np.full(c, 1.0 / c) if class_prior is None else np.asarray(class_prior)
    return SyntheticWorld(
        kind="pattern",
        shape=shape,
        vocab=vocab,
        num_classes=c,
        class_prior=prior,
        base_patterns=pats,
        corruption_rate=corruption_rate,
    )


def make_potts_world(
    shape: GridShape,
    vocab: Vocabulary,
    couplings,
    class_prior: np.ndarray | None = None,
) -> SyntheticWorld:
    coup = np.asarray(couplings, dtype=np.float64)
    c = coup.shape[0]
    prior = np.full(c, 1.0 / c) if class_prior is None else np.asarray(class_prior)
    return SyntheticWorld(
        kind="potts",
        shape=shape,
        vocab=vocab,
        num_classes=c,
        class_prior=prior,
        couplings=coup,
    )


def world_a() -> SyntheticWorld:
    """3x3, K=5, C=4: horizontal / vertical stripes, checkerboard, diagonal."""
    patterns = np.array(
        [
            [0, 0, 0, 1, 1, 1, 0, 0, 0],
            [2, 3, 2, 2, 3, 2, 2, 3, 2],
            [4, 0, 4, 0, 4, 0, 4, 0, 4],
            [1, 3, 0, 0, 1, 3, 3, 0, 1],
        ],
        dtype=TOKEN_DTYPE,
    )
    return make_pattern_world(GridShape(3, 3), Vocabulary(5), patterns, corruption_rate=0.1)


def world_b() -> SyntheticWorld:
    """3x3, K=4, C=2 nearest-neighbor Potts with couplings +0.8 / -0.8."""
    return make_potts_world(GridShape(3, 3), Vocabulary(4), couplings=[0.8, -0.8])


_PRESETS = {"world_a": world_a, "world_b": world_b}


def world_from_config(cfg: dict) -> SyntheticWorld:
    if "preset" in cfg:
        name = cfg["preset"]
        if name not in _PRESETS:
            raise ValueError(f"world.preset must be one of {sorted(_PRESETS)}")
        return _PRESETS[name]()
    kind = cfg.get("kind")
    shape = GridShape(int(cfg["height"]), int(cfg["width"]))
    vocab = Vocabulary(int(cfg["vocab_size"]))
    prior = np.asarray(cfg["class_prior"]) if "class_prior" in cfg else None
    if kind == "pattern":
        return make_pattern_world(
            shape, vocab, np.asarray(cfg["patterns"]), float(cfg["corruption_rate"]), prior
        )
    if kind == "potts":
        return make_potts_world(shape, vocab, cfg["couplings"], prior)
    raise ValueError(f"world.kind must be one of {WORLD_KINDS}")
