"""Command-line surface: training, sampling, evaluation, comparison, sweeps,
refinement, and rejection sampling, all reproducible from (config, seed).

Configs are UTF-8 JSON. The canonical serialization (sorted keys, shortest
round-trip floats) is hashed and embedded, with the format version and seed,
in every output file, so replaying a command with the same triple reproduces
every artifact byte for byte. Random streams are counter-derived per run, so
`--workers` changes wall time but never results.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 I/O or
checkpoint error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import learn, nets, sampler, worlds
from . import numerics as nm
from .rng import run_streams
from .schedule import Schedule
from .tokenspace import TOKEN_DTYPE
from .worlds import SyntheticWorld

FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Canonical config handling
# ---------------------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


_SECTION_KEYS = {
    "world": {
        "preset", "kind", "height", "width", "vocab_size", "class_prior",
        "patterns", "corruption_rate", "couplings",
    },
    "generator": {"layers", "heads", "embed_dim", "hidden_dim", "dropout"},
    "critic": {"layers", "heads", "embed_dim", "hidden_dim", "dropout"},
    "train_generator": {
        "epochs", "steps_per_epoch", "batch_size", "learning_rate", "beta1", "beta2",
        "epsilon", "weight_decay", "eval_interval", "eval_batches", "patience",
        "min_delta", "gamma_kind",
    },
    "train_critic": {
        "epochs", "steps_per_epoch", "batch_size", "learning_rate", "beta1", "beta2",
        "epsilon", "weight_decay", "eval_interval", "eval_batches", "patience",
        "min_delta", "gamma_kind", "fill_temperature",
    },
    "sampling": {
        "steps", "selector", "noise_scale", "temp_slope", "temp_intercept",
        "gamma_kind", "class_index", "n",
    },
    "compare": {
        "steps", "n_samples", "seeds", "class_index", "noise_scale", "temp_slope",
        "temp_intercept", "gamma_kind",
    },
    "sweep": {
        "selectors", "noise_scales", "temp_intercepts", "temp_slope", "steps",
        "n_samples", "class_index", "gamma_kind",
    },
}


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    for section, body in cfg.items():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        unknown = set(body) - _SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {section!r}")
    if "world" not in cfg:
        raise ConfigError("config must have a 'world' section")
    return cfg


def build_world(cfg: dict) -> SyntheticWorld:
    try:
        return worlds.world_from_config(cfg["world"])
    except (ValueError, KeyError) as e:
        raise ConfigError(f"world: {e}") from e


def build_model_config(cfg: dict, world: SyntheticWorld, kind: str) -> nets.TransformerConfig:
    base = (
        nets.default_generator_config(world.k, world.n, world.num_classes)
        if kind == "generator"
        else nets.default_critic_config(world.k, world.n, world.num_classes)
    )
    over = cfg.get(kind, {})
    try:
        return nets.TransformerConfig(
            layers=int(over.get("layers", base.layers)),
            heads=int(over.get("heads", base.heads)),
            embed_dim=int(over.get("embed_dim", base.embed_dim)),
            hidden_dim=int(over.get("hidden_dim", base.hidden_dim)),
            grid_size=base.grid_size,
            max_positions=base.max_positions,
            vocab_in=base.vocab_in,
            num_classes=base.num_classes,
            head_kind=base.head_kind,
            vocab_out=base.vocab_out,
            dropout=float(over.get("dropout", base.dropout)),
        )
    except ValueError as e:
        raise ConfigError(f"{kind}: {e}") from e


def build_train_config(cfg: dict, section: str, seed: int) -> learn.TrainConfig:
    body = cfg.get(section, {})
    try:
        opt = nm.OptimizerConfig(
            learning_rate=float(body.get("learning_rate", 1e-3)),
            beta1=float(body.get("beta1", 0.9)),
            beta2=float(body.get("beta2", 0.96)),
            epsilon=float(body.get("epsilon", 1e-8)),
            weight_decay=float(body.get("weight_decay", 0.0)),
        )
        return learn.TrainConfig(
            epochs=int(body.get("epochs", 20)),
            steps_per_epoch=int(body.get("steps_per_epoch", 100)),
            batch_size=int(body.get("batch_size", 64)),
            optimizer=opt,
            eval_interval=int(body.get("eval_interval", 200)),
            eval_batches=int(body.get("eval_batches", 8)),
            seed=seed,
            patience=int(body.get("patience", 10)),
            min_delta=float(body.get("min_delta", 1e-3)),
            fill_temperature=float(body.get("fill_temperature", 1.0)),
            gamma_kind=str(body.get("gamma_kind", "cosine")),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def build_sampler_config(cfg: dict, seed: int, steps=None, selector=None) -> sampler.SamplerConfig:
    body = cfg.get("sampling", {})
    try:
        return sampler.make_sampler_config(
            steps=int(steps if steps is not None else body.get("steps", 6)),
            selector=str(selector if selector is not None else body.get("selector", "critic")),
            noise_scale=float(body.get("noise_scale", 2.0)),
            temp_slope=float(body.get("temp_slope", 1.0)),
            temp_intercept=float(body.get("temp_intercept", 0.5)),
            gamma_kind=str(body.get("gamma_kind", "cosine")),
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"sampling: {e}") from e


# ---------------------------------------------------------------------------
# Deterministic artifact writers
# ---------------------------------------------------------------------------


def _meta_line(chash: str, seed: int) -> str:
    return f"# format_version={FORMAT_VERSION} config_hash={chash} seed={seed}"


def write_csv(path, columns, rows, chash: str, seed: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(_meta_line(chash, seed) + "\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if isinstance(v, float) or isinstance(v, np.floating):
                    cells.append(fmt_float(v))
                else:
                    cells.append(str(v))
            f.write(",".join(cells) + "\n")


def write_samples_jsonl(path, tokens: np.ndarray, classes, world, chash: str, seed: int) -> None:
    meta = {"config_hash": chash, "format_version": FORMAT_VERSION, "seed": seed}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(canonical_json(meta) + "\n")
        classes = np.broadcast_to(np.asarray(classes), (tokens.shape[0],))
        for row, c in zip(tokens, classes):
            obj = {
                "class": int(c),
                "tokens": [int(x) for x in row],
                "height": world.shape.height,
                "width": world.shape.width,
            }
            f.write(canonical_json(obj) + "\n")


def read_samples_jsonl(path):
    """Returns (tokens (B, N) array, classes (B,), meta dict)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln]
    if not lines:
        raise ValueError(f"{path}: empty samples file")
    meta = json.loads(lines[0])
    rows, classes = [], []
    for ln in lines[1:]:
        obj = json.loads(ln)
        rows.append(obj["tokens"])
        classes.append(int(obj["class"]))
    tokens = (
        np.asarray(rows, dtype=TOKEN_DTYPE)
        if rows
        else np.empty((0, 0), dtype=TOKEN_DTYPE)
    )
    return tokens, np.asarray(classes, dtype=np.int64), meta


def _json_score(x: float):
    return None if not math.isfinite(x) else x


def write_traces_jsonl(path, traces, chash: str, seed: int) -> None:
    meta = {"config_hash": chash, "format_version": FORMAT_VERSION, "seed": seed}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(canonical_json(meta) + "\n")
        for run, trace in enumerate(traces):
            for step in trace.steps:
                obj = {
                    "run": run,
                    "class": trace.class_index,
                    "t": step.t,
                    "k": step.k,
                    "scores": [_json_score(s) for s in step.scores],
                    "threshold": _json_score(step.threshold),
                    "mask": [int(b) for b in step.mask_bits],
                    "pre": [int(x) for x in step.pre_tokens],
                    "post": [int(x) for x in step.post_tokens],
                }
                f.write(canonical_json(obj) + "\n")


def _ensure_outdir(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {path}: {e}") from e


def _load_model(path, expected_kind: str):
    try:
        model = nets.load_model(path)
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from e
    kind = "generator" if isinstance(model, nets.GeneratorModel) else "critic"
    if kind != expected_kind:
        raise CheckpointError(f"{path} holds a {kind}, expected a {expected_kind}")
    return model


class CheckpointError(RuntimeError):
    pass


def _check_model_world(model, world: SyntheticWorld) -> None:
    cfg = model.config
    if cfg.grid_size != world.n or cfg.num_classes != world.num_classes:
        raise ConfigError(
            f"checkpoint dimensions (N={cfg.grid_size}, C={cfg.num_classes}) do not "
            f"match the world (N={world.n}, C={world.num_classes})"
        )
    vocab_out = cfg.vocab_out if cfg.head_kind == "categorical_K" else cfg.vocab_in
    if vocab_out != world.k:
        raise ConfigError(
            f"checkpoint codebook size {vocab_out} does not match the world ({world.k})"
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_generator(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    world = build_world(cfg)
    model_cfg = build_model_config(cfg, world, "generator")
    train_cfg = build_train_config(cfg, "train_generator", args.seed)
    _ensure_outdir(args.out)
    model, rows = learn.train_generator(world, train_cfg, model_cfg)
    ckpt = os.path.join(args.out, "generator.tclw")
    nets.save_model(
        model, ckpt,
        extra_meta={"config_hash": chash, "seed": args.seed, "format_version": FORMAT_VERSION},
    )
    write_csv(
        os.path.join(args.out, "generator_loss.csv"),
        ("step", "split", "metric", "value"),
        rows,
        chash,
        args.seed,
    )
    print(ckpt)
    return EXIT_OK


def cmd_train_critic(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    world = build_world(cfg)
    generator = _load_model(args.generator, "generator")
    _check_model_world(generator, world)
    model_cfg = build_model_config(cfg, world, "critic")
    train_cfg = build_train_config(cfg, "train_critic", args.seed)
    _ensure_outdir(args.out)
    model, rows = learn.train_critic(generator, world, train_cfg, model_cfg)
    ckpt = os.path.join(args.out, "critic.tclw")
    nets.save_model(
        model, ckpt,
        extra_meta={"config_hash": chash, "seed": args.seed, "format_version": FORMAT_VERSION},
    )
    write_csv(
        os.path.join(args.out, "critic_loss.csv"),
        ("step", "split", "metric", "value"),
        rows,
        chash,
        args.seed,
    )
    print(ckpt)
    return EXIT_OK


def _sampling_inputs(cfg, args, selector):
    world = build_world(cfg)
    generator = critic = None
    if selector != "oracle_conditional":
        if not args.generator:
            raise ConfigError(f"selector {selector!r} needs --generator")
        generator = _load_model(args.generator, "generator")
        _check_model_world(generator, world)
    if selector == "critic":
        if not args.critic:
            raise ConfigError("selector 'critic' needs --critic")
        critic = _load_model(args.critic, "critic")
        _check_model_world(critic, world)
    return world, generator, critic


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    body = cfg.get("sampling", {})
    selector = args.selector or body.get("selector", "critic")
    scfg = build_sampler_config(cfg, args.seed, steps=args.steps, selector=selector)
    world, generator, critic = _sampling_inputs(cfg, args, selector)
    n = args.n if args.n is not None else int(body.get("n", 100))
    if n < 0:
        raise ConfigError("--n must be nonnegative")
    class_index = args.class_index if args.class_index is not None else int(body.get("class_index", 0))
    if not 0 <= class_index < world.num_classes:
        raise ConfigError(f"class_index {class_index} outside 0..{world.num_classes - 1}")
    if args.trace and selector == "oracle_conditional":
        raise ConfigError("the oracle sampler has no selection steps to trace")
    _ensure_outdir(args.out)
    tokens, traces = sampler.sample_runs(
        selector=selector,
        class_index=class_index,
        count=n,
        config=scfg,
        generator=generator,
        critic=critic,
        world=world,
        collect_traces=bool(args.trace),
    )
    out_path = os.path.join(args.out, "samples.jsonl")
    write_samples_jsonl(out_path, tokens, class_index, world, chash, args.seed)
    if args.trace:
        write_traces_jsonl(os.path.join(args.out, args.trace), traces, chash, args.seed)
    print(out_path)
    return EXIT_OK


METRIC_COLUMNS = (
    "joint_tv", "forward_cross_entropy", "plugin_kl",
    "marginal_tv", "distinct_ratio", "class_consistency",
)


def _metric_cells(m: worlds.MetricsRecord):
    d = m.as_dict()
    return [d[c] for c in METRIC_COLUMNS]


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    world = build_world(cfg)
    try:
        tokens, classes, _ = read_samples_jsonl(args.samples)
    except (OSError, ValueError, KeyError) as e:
        print(f"cannot read samples: {e}", file=sys.stderr)
        return EXIT_IO
    if classes.size and not np.all(classes == args.class_index):
        raise ConfigError(
            f"samples include classes other than {args.class_index}; "
            "eval expects a single-class file matching --class-index"
        )
    _ensure_outdir(args.out)
    metrics = worlds.compare_to_truth(tokens, world, args.class_index)
    write_csv(
        os.path.join(args.out, "metrics.csv"),
        ("class", "n_samples") + METRIC_COLUMNS,
        [[args.class_index, metrics.n_samples] + _metric_cells(metrics)],
        chash,
        args.seed,
    )
    print(os.path.join(args.out, "metrics.csv"))
    return EXIT_OK


def _compare_task(payload) -> tuple:
    (selector, seed, steps, cfg, world, generator, critic, class_index, n) = payload
    scfg = build_sampler_config(cfg, seed, steps=steps, selector=selector)
    tokens, _ = sampler.sample_runs(
        selector=selector,
        class_index=class_index,
        count=n,
        config=scfg,
        generator=generator,
        critic=critic,
        world=world,
    )
    m = worlds.compare_to_truth(tokens, world, class_index)
    return (seed, selector, steps, n, *(_metric_cells(m)))


def _run_pool(tasks, fn, workers: int):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _sign_test_p(wins: int, n: int) -> float:
    """Two-sided exact binomial sign test at p=1/2."""
    tail = min(wins, n - wins)
    cum = sum(math.comb(n, i) for i in range(tail + 1)) / 2**n
    return min(1.0, 2.0 * cum)


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    body = cfg.get("compare", {})
    steps = int(body.get("steps", 6))
    n = int(body.get("n_samples", 2000))
    n_seeds = args.seeds if args.seeds is not None else int(body.get("seeds", 5))
    class_index = int(body.get("class_index", 0))
    world, generator, critic = _sampling_inputs(cfg, args, "critic")
    cfg_for_sampling = dict(cfg)
    cfg_for_sampling["sampling"] = {
        k: v for k, v in body.items() if k in _SECTION_KEYS["sampling"]
    }
    _ensure_outdir(args.out)
    seeds = [args.seed + i for i in range(n_seeds)]
    tasks = []
    for seed in seeds:
        tasks.append(("critic", seed, steps, cfg_for_sampling, world, generator, critic, class_index, n))
        tasks.append(("confidence", seed, 2 * steps, cfg_for_sampling, world, generator, None, class_index, n))
        tasks.append(("oracle_conditional", seed, steps, cfg_for_sampling, world, None, None, class_index, n))
    results = sorted(_run_pool(tasks, _compare_task, args.workers), key=lambda r: (r[0], r[1]))
    rows = [list(r) for r in results]
    critic_tv = {r[0]: r[4] for r in results if r[1] == "critic"}
    base_tv = {r[0]: r[4] for r in results if r[1] == "confidence"}
    wins = sum(1 for s in seeds if critic_tv[s] < base_tv[s])
    med_c = float(np.median([critic_tv[s] for s in seeds]))
    med_b = float(np.median([base_tv[s] for s in seeds]))
    p = _sign_test_p(wins, len(seeds)) if len(seeds) > 1 else float("nan")
    write_csv(
        os.path.join(args.out, "compare.csv"),
        ("seed", "selector", "steps", "n_samples") + METRIC_COLUMNS,
        rows,
        chash,
        args.seed,
    )
    summary_rows = [
        ["median_joint_tv", "critic", steps, n, med_c],
        ["median_joint_tv", "confidence", 2 * steps, n, med_b],
        ["sign_test", "critic_wins", wins, len(seeds), p if len(seeds) > 1 else "n/a"],
    ]
    write_csv(
        os.path.join(args.out, "compare_summary.csv"),
        ("stat", "which", "a", "b", "value"),
        summary_rows,
        chash,
        args.seed,
    )
    print(os.path.join(args.out, "compare.csv"))
    return EXIT_OK


def _sweep_task(payload) -> tuple:
    (selector, noise, intercept, seed, steps, cfg, world, generator, critic, class_index, n) = payload
    sampling = dict(cfg.get("sampling", {}))
    sampling["noise_scale"] = noise
    sampling["temp_intercept"] = intercept
    scfg = build_sampler_config({"sampling": sampling, "world": cfg["world"]}, seed, steps=steps, selector=selector)
    tokens, _ = sampler.sample_runs(
        selector=selector,
        class_index=class_index,
        count=n,
        config=scfg,
        generator=generator,
        critic=critic,
        world=world,
        stream_label=f"sweep:{selector}:{fmt_float(noise)}:{fmt_float(intercept)}",
    )
    m = worlds.compare_to_truth(tokens, world, class_index)
    return (
        selector, noise, intercept, n,
        m.forward_cross_entropy, m.distinct_ratio, m.joint_tv,
    )


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    body = cfg.get("sweep", {})
    selectors = list(body.get("selectors", ["critic", "confidence"]))
    noises = [float(x) for x in body.get("noise_scales", [0.0, 2.0, 4.0, 8.0])]
    intercepts = [float(x) for x in body.get("temp_intercepts", [0.5, 1.0])]
    steps = int(body.get("steps", 6))
    n = int(body.get("n_samples", 2000))
    class_index = int(body.get("class_index", 0))
    for sel in selectors:
        if sel not in sampler.SELECTORS:
            raise ConfigError(f"sweep.selectors: unknown selector {sel!r}")
    world, generator, critic = _sampling_inputs(
        cfg, args, "critic" if "critic" in selectors else selectors[0]
    )
    _ensure_outdir(args.out)
    tasks = [
        (sel, noise, intercept, args.seed, steps, cfg, world, generator,
         critic if sel == "critic" else None, class_index, n)
        for sel in selectors
        for noise in noises
        for intercept in intercepts
    ]
    results = _run_pool(tasks, _sweep_task, args.workers)
    results.sort(key=lambda r: (r[0], r[1], r[2]))
    write_csv(
        os.path.join(args.out, "sweep.csv"),
        ("selector", "noise_scale", "temp_intercept", "n_samples",
         "forward_cross_entropy", "distinct_ratio", "joint_tv"),
        [list(r) for r in results],
        chash,
        args.seed,
    )
    print(os.path.join(args.out, "sweep.csv"))
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    world = build_world(cfg)
    generator = _load_model(args.generator, "generator")
    critic = _load_model(args.critic, "critic")
    _check_model_world(generator, world)
    _check_model_world(critic, world)
    try:
        tokens, classes, _ = read_samples_jsonl(args.samples)
    except (OSError, ValueError, KeyError) as e:
        print(f"cannot read samples: {e}", file=sys.stderr)
        return EXIT_IO
    if tokens.shape[0] == 0:
        raise ConfigError("refine needs a non-empty samples file")
    if not 0.0 < args.ratio <= 1.0:
        raise ConfigError(f"--ratio must lie in (0, 1], got {args.ratio}")
    # refinement defaults to a pure quality pass (exact ranking, temp-1 fills);
    # the sampling section can override
    body = cfg.get("sampling", {})
    try:
        sched = Schedule(
            total_steps=args.steps,
            gamma_kind=str(body.get("gamma_kind", "cosine")),
            noise_scale=float(body.get("noise_scale", 0.0)),
            temp_slope=float(body.get("temp_slope", 0.0)),
            temp_intercept=float(body.get("temp_intercept", 1.0)),
        )
    except ValueError as e:
        raise ConfigError(f"refine schedule: {e}") from e
    _ensure_outdir(args.out)
    streams = run_streams(args.seed, "refine", tokens.shape[0])
    refined = sampler.refine_batch(
        generator, critic, tokens, classes, args.ratio, args.steps, streams, sched=sched
    )
    out_path = os.path.join(args.out, "refined.jsonl")
    write_samples_jsonl(out_path, refined, classes, world, chash, args.seed)
    rows = []
    for c in np.unique(classes):
        sel = classes == c
        table = worlds.enumerate_joint(world, int(c))
        before = -np.log(table.probs[worlds.tokens_to_state(tokens[sel], world.k)])
        after = -np.log(table.probs[worlds.tokens_to_state(refined[sel], world.k)])
        rows.append([int(c), int(sel.sum()), float(before.mean()), float(after.mean()),
                     float(after.mean() - before.mean())])
    write_csv(
        os.path.join(args.out, "refine_delta.csv"),
        ("class", "n_samples", "nll_before", "nll_after", "delta"),
        rows,
        chash,
        args.seed,
    )
    print(out_path)
    return EXIT_OK


def cmd_reject(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    body = cfg.get("sampling", {})
    selector = args.selector or body.get("selector", "critic")
    if args.candidates is not None:
        candidates = args.candidates
    elif args.accept_rate is not None:
        if not 0.0 < args.accept_rate <= 1.0:
            raise ConfigError("--accept-rate must lie in (0, 1]")
        candidates = max(1, round(1.0 / args.accept_rate))
    else:
        candidates = 5
    if candidates < 1:
        raise ConfigError("--candidates must be >= 1")
    scfg = build_sampler_config(cfg, args.seed, steps=args.steps, selector=selector)
    world, generator, critic = _sampling_inputs(cfg, args, selector)
    n = args.n if args.n is not None else int(body.get("n", 100))
    if n < 0:
        raise ConfigError("--n must be nonnegative")
    class_index = args.class_index if args.class_index is not None else int(body.get("class_index", 0))
    _ensure_outdir(args.out)
    tokens, _ = sampler.sample_runs(
        selector=selector,
        class_index=class_index,
        count=n * candidates,
        config=scfg,
        generator=generator,
        critic=critic,
        world=world,
    )
    if n:
        posterior = worlds.class_posterior_batch(world, tokens)[:, class_index]
        keep = sampler.argmax_per_group(posterior, candidates)
        tokens = tokens[keep]
    out_path = os.path.join(args.out, "samples.jsonl")
    write_samples_jsonl(out_path, tokens, class_index, world, chash, args.seed)
    print(out_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masklab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_out=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)
        if needs_out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("train-generator", help="train the masked generator")
    common(sp)
    sp.set_defaults(fn=cmd_train_generator)

    sp = sub.add_parser("train-critic", help="train the critic against a frozen generator")
    common(sp)
    sp.add_argument("--generator", required=True)
    sp.set_defaults(fn=cmd_train_critic)

    sp = sub.add_parser("sample", help="draw samples with a selector")
    common(sp)
    sp.add_argument("--generator")
    sp.add_argument("--critic")
    sp.add_argument("--selector", choices=sampler.SELECTORS)
    sp.add_argument("--n", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--class-index", type=int, dest="class_index")
    sp.add_argument("--trace", help="also write traces to this file name under --out")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="compare a samples file to the exact joint")
    common(sp)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--class-index", type=int, dest="class_index", default=0)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("compare", help="critic at T vs confidence baseline at 2T")
    common(sp)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--critic", required=True)
    sp.add_argument("--seeds", type=int)
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("sweep", help="quality/diversity grid over noise and temperature")
    common(sp)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--critic")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("refine", help="re-mask low-critic-score tokens and re-decode")
    common(sp)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--critic", required=True)
    sp.add_argument("--ratio", type=float, default=0.6)
    sp.add_argument("--steps", type=int, default=9)
    sp.set_defaults(fn=cmd_refine)

    sp = sub.add_parser("reject", help="classifier-based rejection sampling")
    common(sp)
    sp.add_argument("--generator")
    sp.add_argument("--critic")
    sp.add_argument("--selector", choices=sampler.SELECTORS)
    sp.add_argument("--accept-rate", type=float, dest="accept_rate")
    sp.add_argument("--candidates", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--class-index", type=int, dest="class_index")
    sp.set_defaults(fn=cmd_reject)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except learn.TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(str(e), file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
