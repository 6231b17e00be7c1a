"""Discrete data model: codebooks, token grids, keep/mask vectors, and the
masking algebra.

Convention, pinned once and used everywhere: a mask bit of 1 means the
position is visible (kept), 0 means it is masked. The mask sentinel is the
codebook index K, one past the last real code, so masked grids stay plain
integer arrays. Class labels are plain ints in 0..C-1, validated at the
world/model boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ClassLabel = int

TOKEN_DTYPE = np.int16


@dataclass(frozen=True)
class Vocabulary:
    """Codebook of ``size`` real codes; index ``size`` is the mask sentinel."""

    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"vocabulary size must be positive, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid dims must be positive, got {self.height}x{self.width}")

    @property
    def n(self) -> int:
        return self.height * self.width


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TokenGrid:
    """Flattened row-major grid of codebook indices, possibly with sentinels."""

    shape: GridShape
    vocab: Vocabulary
    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=TOKEN_DTYPE).reshape(-1)
        if t.size != self.shape.n:
            raise ValueError(f"expected {self.shape.n} tokens, got {t.size}")
        if t.size and (t.min() < 0 or t.max() > self.vocab.mask_id):
            raise ValueError(
                f"token outside 0..{self.vocab.mask_id} (mask sentinel = {self.vocab.mask_id})"
            )
        object.__setattr__(self, "tokens", _freeze(t))

    @property
    def is_complete(self) -> bool:
        return not np.any(self.tokens == self.vocab.mask_id)

    def require_complete(self, what: str = "grid") -> None:
        if not self.is_complete:
            raise ValueError(f"{what} contains the mask sentinel")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenGrid)
            and self.shape == other.shape
            and self.vocab == other.vocab
            and np.array_equal(self.tokens, other.tokens)
        )

    def __hash__(self):
        return hash((self.shape, self.vocab, self.tokens.tobytes()))


@dataclass(frozen=True)
class MaskVector:
    """Per-position keep bits: 1 = visible, 0 = masked."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if b.size and not np.isin(b, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", _freeze(b))

    @property
    def n(self) -> int:
        return self.bits.size

    @property
    def masked_count(self) -> int:
        return int(self.n - self.bits.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskVector) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


# ---------------------------------------------------------------------------
# Masking algebra. Array-level forms are shared by the batched training and
# sampling loops; grid-level forms are the validated public surface.
# ---------------------------------------------------------------------------


def apply_mask_tokens(tokens: np.ndarray, bits: np.ndarray, mask_id: int) -> np.ndarray:
    return np.where(bits.astype(bool), tokens, TOKEN_DTYPE(mask_id)).astype(TOKEN_DTYPE)


def merge_tokens(proposed: np.ndarray, current: np.ndarray, bits: np.ndarray) -> np.ndarray:
    return np.where(bits.astype(bool), current, proposed).astype(TOKEN_DTYPE)


def apply_mask(x0: TokenGrid, m: MaskVector) -> TokenGrid:
    """Keep positions with bit 1; replace bit-0 positions with the sentinel."""
    x0.require_complete("apply_mask input")
    if m.n != x0.shape.n:
        raise ValueError(f"mask length {m.n} != grid size {x0.shape.n}")
    out = apply_mask_tokens(x0.tokens, m.bits, x0.vocab.mask_id)
    return TokenGrid(x0.shape, x0.vocab, out)


def merge(x_tilde0: TokenGrid, x_t: TokenGrid, m: MaskVector) -> TokenGrid:
    """Visible positions from x_t, masked positions from the prediction."""
    x_tilde0.require_complete("merge prediction")
    if m.n != x_t.shape.n or x_t.shape != x_tilde0.shape:
        raise ValueError(
            f"merge: inconsistent sizes grid={x_t.shape.n} pred={x_tilde0.shape.n} mask={m.n}"
        )
    visible = m.bits.astype(bool)
    if np.any(x_t.tokens[visible] == x_t.vocab.mask_id):
        raise ValueError("merge: visible position holds the mask sentinel")
    out = merge_tokens(x_tilde0.tokens, x_t.tokens, m.bits)
    return TokenGrid(x_t.shape, x_t.vocab, out)


def random_mask(n: int, masked_count: int, rng: np.random.Generator) -> MaskVector:
    """Exactly ``masked_count`` zeros at uniform positions without replacement."""
    if not 0 <= masked_count <= n:
        raise ValueError(f"masked_count {masked_count} outside [0, {n}]")
    bits = np.ones(n, dtype=np.uint8)
    bits[rng.permutation(n)[:masked_count]] = 0
    return MaskVector(bits)


def random_mask_batch(
    batch: int, n: int, masked_counts: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """(batch, n) keep bits with row i holding exactly masked_counts[i] zeros."""
    order = np.argsort(rng.random((batch, n)), axis=1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n)[None, :].repeat(batch, 0), axis=1)
    return (ranks >= np.asarray(masked_counts)[:, None]).astype(np.uint8)


# ---------------------------------------------------------------------------
# JSON Lines serialization
# ---------------------------------------------------------------------------


def grid_to_obj(grid: TokenGrid, class_index: int) -> dict:
    return {
        "class": int(class_index),
        "tokens": [int(t) for t in grid.tokens],
        "height": grid.shape.height,
        "width": grid.shape.width,
    }


def obj_to_grid(obj: dict, vocab: Vocabulary) -> tuple[TokenGrid, int]:
    shape = GridShape(int(obj["height"]), int(obj["width"]))
    grid = TokenGrid(shape, vocab, np.asarray(obj["tokens"], dtype=TOKEN_DTYPE))
    return grid, int(obj["class"])


def grid_to_jsonl_line(grid: TokenGrid, class_index: int) -> str:
    return json.dumps(grid_to_obj(grid, class_index), sort_keys=True, separators=(",", ":"))
