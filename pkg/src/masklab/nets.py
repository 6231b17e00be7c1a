"""The two toy transformers: a masked-token generator and a per-position critic.

Both share one pre-norm backbone: token + class-token + learnable positional
embeddings, bidirectional multi-head attention, GELU MLPs. The class token is
prepended at position 0 and dropped from the output, so heads see exactly the
N grid positions. The generator embeds the mask sentinel (vocab_in = K + 1)
and emits K-way logits, so it can never predict the sentinel; the critic only
ever sees complete grids (vocab_in = K) and emits one logit per position.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .tokenspace import TOKEN_DTYPE, TokenGrid

HEAD_KINDS = ("categorical_K", "binary")


@dataclass(frozen=True)
class TransformerConfig:
    layers: int
    heads: int
    embed_dim: int
    hidden_dim: int
    grid_size: int
    max_positions: int
    vocab_in: int
    num_classes: int
    head_kind: str
    vocab_out: int = 0  # codebook size K for categorical heads
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.max_positions < self.grid_size + 1:
            raise ValueError("max_positions must cover the grid plus the class token")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head_kind == "categorical_K" and self.vocab_out < 1:
            raise ValueError("categorical head needs vocab_out >= 1")
        if min(self.layers, self.heads, self.embed_dim, self.hidden_dim) < 1:
            raise ValueError("layers, heads, embed_dim, hidden_dim must be positive")
        if min(self.grid_size, self.vocab_in, self.num_classes) < 1:
            raise ValueError("grid_size, vocab_in, num_classes must be positive")


def default_generator_config(vocab_size: int, grid_size: int, num_classes: int) -> TransformerConfig:
    return TransformerConfig(
        layers=4,
        heads=4,
        embed_dim=128,
        hidden_dim=512,
        grid_size=grid_size,
        max_positions=grid_size + 1,
        vocab_in=vocab_size + 1,
        num_classes=num_classes,
        head_kind="categorical_K",
        vocab_out=vocab_size,
    )


def default_critic_config(vocab_size: int, grid_size: int, num_classes: int) -> TransformerConfig:
    # smaller than the generator, same backbone
    return TransformerConfig(
        layers=3,
        heads=4,
        embed_dim=96,
        hidden_dim=384,
        grid_size=grid_size,
        max_positions=grid_size + 1,
        vocab_in=vocab_size,
        num_classes=num_classes,
        head_kind="binary",
    )


class TransformerModel:
    """Backbone plus head; parameters live in an ordered name -> Parameter map."""

    def __init__(self, config: TransformerConfig, params: dict[str, nm.Parameter]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, config: TransformerConfig, rng: np.random.Generator):
        d, h = config.embed_dim, config.hidden_dim
        out_dim = config.vocab_out if config.head_kind == "categorical_K" else 1

        def w(name, shape):
            params[name] = nm.Parameter(nm.truncated_normal(rng, shape), name)

        def zeros(name, shape):
            params[name] = nm.Parameter(np.zeros(shape), name)

        def ones(name, shape):
            params[name] = nm.Parameter(np.ones(shape), name)

        params: dict[str, nm.Parameter] = {}
        w("tok_embed", (config.vocab_in, d))
        w("cls_embed", (config.num_classes, d))
        w("pos_embed", (config.max_positions, d))
        for i in range(config.layers):
            p = f"layer{i}."
            ones(p + "ln1_gain", (d,))
            zeros(p + "ln1_bias", (d,))
            for proj in ("wq", "wk", "wv", "wo"):
                w(p + proj, (d, d))
            for bias in ("bq", "bk", "bv", "bo"):
                zeros(p + bias, (d,))
            ones(p + "ln2_gain", (d,))
            zeros(p + "ln2_bias", (d,))
            w(p + "w_up", (d, h))
            zeros(p + "b_up", (h,))
            w(p + "w_down", (h, d))
            zeros(p + "b_down", (d,))
        ones("lnf_gain", (d,))
        zeros("lnf_bias", (d,))
        w("w_head", (d, out_dim))
        zeros("b_head", (out_dim,))
        return cls(config, params)

    def parameters(self) -> list[nm.Parameter]:
        return list(self.params.values())

    def checksum(self) -> str:
        return nm.checksum_parameters(self.parameters())

    # -- forward ------------------------------------------------------------

    def _validate_inputs(self, tokens: np.ndarray, classes: np.ndarray) -> None:
        cfg = self.config
        if tokens.ndim != 2 or tokens.shape[1] != cfg.grid_size:
            raise ValueError(
                f"expected token batch (B, {cfg.grid_size}), got {tokens.shape}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_in):
            raise ValueError(f"token id outside embedding range 0..{cfg.vocab_in - 1}")
        if classes.shape != (tokens.shape[0],):
            raise ValueError(f"expected {tokens.shape[0]} class labels, got {classes.shape}")
        if classes.size and (classes.min() < 0 or classes.max() >= cfg.num_classes):
            raise ValueError(f"class label outside 0..{cfg.num_classes - 1}")

    def forward_batch(
        self,
        tokens: np.ndarray,
        classes: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> nm.Tensor:
        """Logits (B, N, K) for categorical heads, (B, N) for binary heads."""
        tokens = np.asarray(tokens)
        classes = np.asarray(classes)
        self._validate_inputs(tokens, classes)
        cfg = self.config
        if training and cfg.dropout > 0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        P = self.params
        b, n = tokens.shape
        s = n + 1
        d = cfg.embed_dim
        heads, dh = cfg.heads, d // cfg.heads
        scale = 1.0 / math.sqrt(dh)

        def drop(x):
            return nm.dropout(x, cfg.dropout, rng, training)

        tok = nm.embedding_lookup(P["tok_embed"], tokens)
        cls = nm.embedding_lookup(P["cls_embed"], classes.reshape(b, 1))
        hdd = nm.concat([cls, tok], axis=1)
        hdd = nm.add(hdd, nm.slice_axis(P["pos_embed"], 0, 0, s))
        hdd = drop(hdd)
        for i in range(cfg.layers):
            p = f"layer{i}."
            a = nm.layer_norm(hdd, P[p + "ln1_gain"], P[p + "ln1_bias"])

            def split(x):
                return nm.transpose(nm.reshape(x, (b, s, heads, dh)), (0, 2, 1, 3))

            q = split(nm.linear(a, P[p + "wq"], P[p + "bq"]))
            k = split(nm.linear(a, P[p + "wk"], P[p + "bk"]))
            v = split(nm.linear(a, P[p + "wv"], P[p + "bv"]))
            att = nm.softmax(nm.multiply(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), scale))
            o = nm.reshape(nm.transpose(nm.matmul(att, v), (0, 2, 1, 3)), (b, s, d))
            o = drop(nm.linear(o, P[p + "wo"], P[p + "bo"]))
            hdd = nm.add(hdd, o)
            m = nm.layer_norm(hdd, P[p + "ln2_gain"], P[p + "ln2_bias"])
            m = nm.gelu(nm.linear(m, P[p + "w_up"], P[p + "b_up"]))
            m = drop(nm.linear(m, P[p + "w_down"], P[p + "b_down"]))
            hdd = nm.add(hdd, m)
        hdd = nm.layer_norm(hdd, P["lnf_gain"], P["lnf_bias"])
        out = nm.slice_axis(hdd, 1, 1, s)
        logits = nm.linear(out, P["w_head"], P["b_head"])
        if cfg.head_kind == "binary":
            logits = nm.reshape(logits, (b, n))
        return logits


class GeneratorModel(TransformerModel):
    """Masked generator: inputs may contain the sentinel, outputs K-way logits."""

    @classmethod
    def create(cls, config: TransformerConfig, rng: np.random.Generator):
        if config.head_kind != "categorical_K":
            raise ValueError("generator requires a categorical head")
        if config.vocab_in != config.vocab_out + 1:
            raise ValueError("generator embeds the codebook plus the mask sentinel")
        return cls.initialize(config, rng)


class CriticModel(TransformerModel):
    """Per-position realness critic; refuses grids containing the sentinel."""

    @classmethod
    def create(cls, config: TransformerConfig, rng: np.random.Generator):
        if config.head_kind != "binary":
            raise ValueError("critic requires a binary head")
        return cls.initialize(config, rng)

    def forward_batch(self, tokens, classes, training=False, rng=None) -> nm.Tensor:
        tokens = np.asarray(tokens)
        if tokens.size and tokens.max() >= self.config.vocab_in:
            raise ValueError("critic input contains the mask sentinel; merge first")
        return super().forward_batch(tokens, classes, training=training, rng=rng)


def generator_forward(model: GeneratorModel, x_t: TokenGrid, class_index: int) -> np.ndarray:
    """Eval-mode logits (N, K) for one masked grid."""
    if x_t.shape.n != model.config.grid_size:
        raise ValueError(
            f"grid has {x_t.shape.n} positions, model expects {model.config.grid_size}"
        )
    with nm.no_grad():
        out = model.forward_batch(x_t.tokens[None, :], np.array([class_index]))
    return out.data[0]


def critic_forward(model: CriticModel, x_hat0: TokenGrid, class_index: int) -> np.ndarray:
    """Eval-mode realness logits (N,) for one complete grid."""
    x_hat0.require_complete("critic input")
    if x_hat0.shape.n != model.config.grid_size:
        raise ValueError(
            f"grid has {x_hat0.shape.n} positions, model expects {model.config.grid_size}"
        )
    with nm.no_grad():
        out = model.forward_batch(x_hat0.tokens[None, :], np.array([class_index]))
    return out.data[0]


# ---------------------------------------------------------------------------
# Token sampling
# ---------------------------------------------------------------------------

ARGMAX_TEMPERATURE = 1e-6


def tempered_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / temperature) along the last axis."""
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_tokens(
    logits: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
    positions: np.ndarray | None = None,
) -> np.ndarray:
    """Independent categorical draw per requested position; argmax in the
    temperature -> 0 limit."""
    if temperature < 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits)
    if positions is None:
        positions = np.arange(logits.shape[0])
    picked = logits[positions]
    if temperature < ARGMAX_TEMPERATURE:
        return picked.argmax(axis=-1).astype(TOKEN_DTYPE)
    probs = tempered_softmax(picked, temperature)
    cdf = probs.cumsum(axis=-1)
    u = rng.random(len(positions))[:, None]
    ids = (u > cdf).sum(axis=-1)
    return ids.astype(TOKEN_DTYPE)


# ---------------------------------------------------------------------------
# Persistence: weights file plus JSON sidecar with the config
# ---------------------------------------------------------------------------

_MODEL_CLASSES = {"generator": GeneratorModel, "critic": CriticModel}


def _model_kind(model: TransformerModel) -> str:
    return "generator" if isinstance(model, GeneratorModel) else "critic"


def save_model(model: TransformerModel, path, extra_meta: dict | None = None) -> None:
    nm.save_weights(path, model.parameters())
    meta = {
        "model_kind": _model_kind(model),
        "config": asdict(model.config),
        "weights_format_version": nm.WEIGHTS_VERSION,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_model(path) -> TransformerModel:
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    config = TransformerConfig(**meta["config"])
    weights = nm.load_weights(path)
    params = {name: nm.Parameter(arr, name) for name, arr in weights.items()}
    cls = _MODEL_CLASSES[meta["model_kind"]]
    model = cls(config, params)
    expected = {p.name: p.shape for p in cls.initialize(config, np.random.default_rng(0)).parameters()}
    actual = {name: p.shape for name, p in params.items()}
    if actual != expected:
        raise ValueError(f"{path}: parameter names or shapes do not match the config")
    return model
