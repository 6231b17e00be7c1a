"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. Trained models come from
session fixtures in conftest.py and are shared across criteria. Two checks
(AC-2's sampling-noise clause and AC-5's AUC bar) assert tolerances that sit
beyond what the estimator noise floor and the task's Bayes ceiling allow on
the pinned world; they are asserted as stated and print the measured values
next to the exact bounds.
"""

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from masklab import learn, nets, sampler, worlds
from masklab import numerics as nm
from masklab.cli import main
from masklab.rng import make_rng, run_streams
from masklab.schedule import Schedule, gamma, mask_count
from masklab.tokenspace import TokenGrid
from tests.oracles import empirical_tv, fd_gradient, max_rel_err
from tests.test_numerics import _op_cases, scalar_loss


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n{criterion} {'PASS' if ok else 'FAIL'}: {detail}")


# ---------------------------------------------------------------------------
# AC-1: gradient correctness, every op and both miniature networks
# ---------------------------------------------------------------------------


def test_ac1_gradient_correctness():
    t0 = time.time()
    tol = 1e-4
    worst_op = 0.0
    rng = np.random.default_rng(2026)
    for name, build, shapes in _op_cases(rng):
        for _ in range(10):
            arrays = [rng.standard_normal(s) for s in shapes]
            params = [nm.Parameter(a, f"in{i}") for i, a in enumerate(arrays)]
            direction = rng.standard_normal(build(*params).shape)
            nm.clear_gradients(params)
            nm.backward(scalar_loss(build(*params), direction))
            for p in params:
                num = fd_gradient(lambda: float((build(*params).data * direction).sum()), p.data)
                worst_op = max(worst_op, max_rel_err(p.grad, num))

    def mini(head_kind):
        vocab_in = 4 if head_kind == "categorical_K" else 3
        cfg = nets.TransformerConfig(
            layers=2, heads=2, embed_dim=12, hidden_dim=24, grid_size=4,
            max_positions=5, vocab_in=vocab_in, num_classes=2,
            head_kind=head_kind, vocab_out=3 if head_kind == "categorical_K" else 0,
        )
        cls = nets.GeneratorModel if head_kind == "categorical_K" else nets.CriticModel
        return cls.create(cfg, make_rng(1, "ac1", head_kind))

    worst_net = 0.0
    gen = mini("categorical_K")
    tokens = np.array([[0, 3, 2, 3], [1, 1, 3, 0]])
    classes = np.array([0, 1])
    targets = np.array([[0, 1, 2, 1], [1, 1, 0, 0]])
    weights = np.array([[0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0]])

    def gen_loss():
        return nm.loss_cross_entropy(gen.forward_batch(tokens, classes), targets, weights)

    nm.backward(gen_loss())
    for p in gen.parameters():
        num = fd_gradient(lambda: gen_loss().item(), p.data)
        worst_net = max(worst_net, max_rel_err(p.grad, num))

    crit = mini("binary")
    ctokens = np.array([[0, 1, 2, 2], [1, 0, 0, 2]])
    btargets = np.array([[1.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 0.0]])

    def crit_loss():
        return nm.loss_bce_with_logits(crit.forward_batch(ctokens, classes), btargets)

    nm.clear_gradients(crit.parameters())
    nm.backward(crit_loss())
    for p in crit.parameters():
        num = fd_gradient(lambda: crit_loss().item(), p.data)
        worst_net = max(worst_net, max_rel_err(p.grad, num))

    ok = worst_op < tol and worst_net < tol
    report("AC-1", ok,
           f"max rel err: ops {worst_op:.2e}, networks {worst_net:.2e} "
           f"(tol {tol:.0e}; {time.time()-t0:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# AC-2: oracle integrity
# ---------------------------------------------------------------------------


def test_ac2_oracle_integrity(world_a, world_b, tiny_world):
    t0 = time.time()
    worst_sum = 0.0
    for w in (world_a, world_b):
        for c in range(w.num_classes):
            worst_sum = max(worst_sum, abs(worlds.enumerate_joint(w, c).probs.sum() - 1.0))
    sums_ok = worst_sum <= 1e-9

    tokens, _ = worlds.sample_world_batch(world_b, 10**6, make_rng(0, "ac2-oracle"), class_index=0)
    tv = empirical_tv(worlds.tokens_to_state(tokens, world_b.k), worlds.enumerate_joint(world_b, 0).probs)
    q = worlds.enumerate_joint(world_b, 0).probs
    floor = 0.5 * math.sqrt(2 / (math.pi * 10**6)) * np.sqrt(q).sum()
    tv_ok = tv < 0.02

    w = tiny_world
    table = worlds.enumerate_joint(w, 0)
    worst_chain = 0.0
    for state in range(w.k**w.n):
        state_tokens = worlds.state_to_tokens(np.array(state), w.n, w.k)
        prob = 1.0
        current = np.full(w.n, w.vocab.mask_id, dtype=np.int16)
        for j in range(w.n):
            grid = TokenGrid(w.shape, w.vocab, current)
            prob *= worlds.exact_conditional(w, 0, grid, j)[int(state_tokens[j])]
            current[j] = state_tokens[j]
        worst_chain = max(worst_chain, abs(prob - table.probs[state]))
    chain_ok = worst_chain < 1e-10

    ok = sums_ok and tv_ok and chain_ok
    report("AC-2", ok,
           f"normalization err {worst_sum:.1e} (tol 1e-9); oracle-sampler joint TV {tv:.4f} "
           f"at 1e6 draws vs tol 0.02 (exact-sampler noise floor {floor:.3f}: the tolerance "
           f"is below what the plug-in estimator can measure on this world); "
           f"chain-rule err {worst_chain:.1e} (tol 1e-10) ({time.time()-t0:.0f}s)")
    assert sums_ok and chain_ok
    assert tv_ok, (
        f"joint TV {tv:.4f} >= 0.02: an exact sampler measures {floor:.3f} here; "
        "the tolerance exceeds the estimator's capability on this world (see ledger)"
    )


# ---------------------------------------------------------------------------
# AC-3: generator learns (World A, vs the factorized oracle baseline)
# ---------------------------------------------------------------------------


def test_ac3_generator_beats_factorized_baseline(world_a, models_a):
    t0 = time.time()
    gen = models_a
    ce = learn.evaluate_heldout(gen, world_a, 32, batch_size=128, seed=555)["masked_ce"]
    baseline = worlds.factorized_ce_baseline(world_a, 3000, make_rng(0, "ac3-baseline"))
    # derived sanity: mean probability on the true token at masked positions
    rng = make_rng(1, "ac3-mass")
    x0, classes, bits, x_t = learn.draw_masked_batch(world_a, 512, rng)
    with nm.no_grad():
        logits = gen.forward_batch(x_t, classes).data
    probs = nets.tempered_softmax(logits, 1.0)
    true_p = np.take_along_axis(probs, x0.astype(int)[..., None], axis=-1)[..., 0]
    mass = float(true_p[bits == 0].mean())
    ok = ce < 0.95 * baseline and mass > 1.0 / world_a.k
    report("AC-3", ok,
           f"held-out masked CE {ce:.4f} vs factorized baseline {baseline:.4f} "
           f"(needs <= {0.95 * baseline:.4f}; margin {(1 - ce / baseline) * 100:.1f}%); "
           f"mean true-token probability at masked positions {mass:.3f} > 1/K={1 / world_a.k:.3f} "
           f"({time.time()-t0:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# AC-4: loop exactness at 1e6 draws on the 2x2/K=3 world
# ---------------------------------------------------------------------------


def test_ac4_loop_exactness(tiny_world):
    t0 = time.time()
    w = tiny_world
    n_draws = 10**6
    sched = Schedule(total_steps=4, noise_scale=0.0, temp_slope=0.0, temp_intercept=1.0)
    propose = sampler.oracle_proposal(w, 0)
    out = np.empty((n_draws, w.n), dtype=np.int16)
    done = 0
    while done < n_draws:
        size = min(16384, n_draws - done)
        streams = run_streams(4096, "ac4", size, done)
        toks, _ = sampler.run_selection_loop(
            propose=propose, selector="random", classes=np.zeros(size, dtype=int),
            steps=4, sched=sched, n=w.n, mask_id=w.k, streams=streams,
            mask_count_fn=lambda t: t,
        )
        out[done:done + size] = toks
        done += size
    tv = empirical_tv(worlds.tokens_to_state(out, w.k), worlds.enumerate_joint(w, 0).probs)
    ok = tv < 0.02
    report("AC-4", ok, f"random-selector oracle-proposal joint TV {tv:.4f} at 1e6 draws "
                       f"(tol 0.02; {time.time()-t0:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# AC-5: critic learns (World B AUC)
# ---------------------------------------------------------------------------


def test_ac5_critic_auc(world_b, models_b):
    t0 = time.time()
    gen, crit = models_b
    metrics = learn.evaluate_heldout(crit, world_b, 32, batch_size=128, seed=556, generator=gen)
    per_ratio = {}
    for r in (2, 5, 8):
        m = learn.evaluate_heldout(crit, world_b, 8, batch_size=128, seed=557 + r,
                                   generator=gen, mask_count_override=r)
        per_ratio[r] = m["auc"]
    auc = metrics["auc"]
    ok = auc >= 0.75
    report("AC-5", ok,
           f"held-out AUC {auc:.3f} (needs >= 0.75), BCE {metrics['bce']:.4f}; "
           f"per-masked-count AUC {{r: {per_ratio}}}; Bayes-optimal ceiling on this "
           f"world is ~0.65 by exact mask enumeration (see ledger); {time.time()-t0:.0f}s")
    assert ok, (
        f"AUC {auc:.3f} < 0.75: the exact Bayes ceiling for this discrimination task "
        "on World B is ~0.65, so the stated bar is unreachable (see ledger)"
    )


# ---------------------------------------------------------------------------
# AC-6: headline claim, critic at T=6 vs confidence baseline at T=12
# ---------------------------------------------------------------------------

AC6_SAMPLES = 100_000
AC6_SEEDS = 5


def _single_threaded_blas():
    # two pool workers on two cores; per-worker BLAS threading only thrashes
    import os

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def _ac6_task(payload):
    which, seed, steps, gen, crit, world = payload
    cfg = sampler.make_sampler_config(steps, which, noise_scale=1.0, seed=seed)
    tokens, _ = sampler.sample_runs(
        selector=which, class_index=0, count=AC6_SAMPLES, config=cfg,
        generator=gen, critic=crit if which == "critic" else None,
    )
    m = worlds.compare_to_truth(tokens, world, 0)
    return which, seed, m.joint_tv


def test_ac6_critic_beats_baseline_at_double_steps(world_b, models_b):
    t0 = time.time()
    gen, crit = models_b
    tasks = []
    for seed in range(AC6_SEEDS):
        tasks.append(("critic", seed, 6, gen, crit, world_b))
        tasks.append(("confidence", seed, 12, gen, crit, world_b))
    with ProcessPoolExecutor(max_workers=2, initializer=_single_threaded_blas) as pool:
        results = list(pool.map(_ac6_task, tasks))
    critic_tv = {s: tv for which, s, tv in results if which == "critic"}
    base_tv = {s: tv for which, s, tv in results if which == "confidence"}
    med_c = float(np.median(list(critic_tv.values())))
    med_b = float(np.median(list(base_tv.values())))
    wins = sum(critic_tv[s] < base_tv[s] for s in range(AC6_SEEDS))
    ok = med_c < med_b and wins == AC6_SEEDS
    pairs = ", ".join(
        f"seed{s}: {critic_tv[s]:.4f} vs {base_tv[s]:.4f}" for s in range(AC6_SEEDS)
    )
    report("AC-6", ok,
           f"median joint TV at 1e5 samples: critic@6 {med_c:.4f} < confidence@12 {med_b:.4f}; "
           f"sign test {wins}/{AC6_SEEDS} seeds in the critic's favor ({pairs}; "
           f"{time.time()-t0:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# AC-7: refinement lowers oracle NLL on most batches
# ---------------------------------------------------------------------------


def test_ac7_refinement_reduces_nll(world_b, models_b):
    t0 = time.time()
    gen, crit = models_b
    table = worlds.enumerate_joint(world_b, 0)
    improved = 0
    n_batches, batch = 20, 500
    deltas = []
    for b in range(n_batches):
        cfg = sampler.make_sampler_config(6, "confidence", noise_scale=1.0, seed=700 + b)
        base, _ = sampler.sample_runs(selector="confidence", class_index=0, count=batch,
                                      config=cfg, generator=gen, stream_label="ac7-base")
        streams = run_streams(800 + b, "ac7-refine", batch)
        refined = sampler.refine_batch(gen, crit, base, np.zeros(batch, dtype=int),
                                       0.6, 9, streams)
        before = -np.log(table.probs[worlds.tokens_to_state(base, world_b.k)]).mean()
        after = -np.log(table.probs[worlds.tokens_to_state(refined, world_b.k)]).mean()
        deltas.append(after - before)
        improved += after < before
    ok = improved >= 0.6 * n_batches
    report("AC-7", ok,
           f"refinement (ratio 0.6, 9 steps) lowered mean oracle NLL on {improved}/{n_batches} "
           f"batches (needs >= {int(0.6 * n_batches)}); mean delta {np.mean(deltas):+.4f} nats; "
           f"{time.time()-t0:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# AC-8: rejection helps and composes
# ---------------------------------------------------------------------------


def _ac8_sample(world, gen, crit, which, steps, accepted, candidates, seed, noise, intercept):
    cfg = sampler.make_sampler_config(
        steps, which, noise_scale=noise, temp_intercept=intercept, seed=seed
    )
    tokens, _ = sampler.sample_runs(
        selector=which, class_index=0, count=accepted * candidates, config=cfg,
        generator=gen, critic=crit if which == "critic" else None,
        stream_label=f"ac8-{which}-{candidates}-{noise}",
    )
    if candidates > 1:
        posterior = worlds.class_posterior_batch(world, tokens)[:, 0]
        tokens = tokens[sampler.argmax_per_group(posterior, candidates)]
    return tokens


def test_ac8_rejection_monotone_and_composes(world_b, models_b):
    t0 = time.time()
    gen, crit = models_b
    # monotonicity at the diversity-leaning point, where neither sampler's
    # class consistency saturates and rejection has room to act
    consistency = {}
    for which, steps in (("critic", 6), ("confidence", 12)):
        cons = []
        for candidates in (1, 5, 10):
            tokens = _ac8_sample(world_b, gen, crit, which, steps, 3000, candidates,
                                 seed=900, noise=2.0, intercept=1.0)
            cons.append(worlds.compare_to_truth(tokens, world_b, 0).class_consistency)
        consistency[which] = cons
    mono_ok = all(
        consistency[w][0] < consistency[w][1] < consistency[w][2]
        for w in ("critic", "confidence")
    )
    # composition at the headline operating point: rejection at 20% on top of
    # critic@6 vs confidence@12
    tv_at_5 = {}
    for which, steps in (("critic", 6), ("confidence", 12)):
        tokens = _ac8_sample(world_b, gen, crit, which, steps, 10_000, 5,
                             seed=901, noise=1.0, intercept=0.5)
        tv_at_5[which] = worlds.compare_to_truth(tokens, world_b, 0).joint_tv
    compose_ok = tv_at_5["critic"] <= tv_at_5["confidence"]
    ok = mono_ok and compose_ok
    report("AC-8", ok,
           f"class consistency over acceptance rates (1.0, 0.2, 0.1): "
           f"critic {[f'{c:.5f}' for c in consistency['critic']]}, "
           f"confidence {[f'{c:.5f}' for c in consistency['confidence']]}; "
           f"joint TV with rejection at 20%: critic {tv_at_5['critic']:.4f} <= "
           f"confidence {tv_at_5['confidence']:.4f}; {time.time()-t0:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# AC-9: byte-identical replay of every command
# ---------------------------------------------------------------------------


def test_ac9_command_determinism(tmp_path):
    t0 = time.time()
    from tests.test_cli import TINY_CONFIG

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    cfg = str(cfg_path)

    def run_twice(label, args, outputs):
        paths = []
        for rep in ("x", "y"):
            out = tmp_path / f"{label}-{rep}"
            assert main(args + ["--out", str(out)]) == 0, label
            paths.append(out)
        for name in outputs:
            a = (paths[0] / name).read_bytes()
            b = (paths[1] / name).read_bytes()
            assert a == b, f"{label}/{name} differs between replays"
        return paths[0]

    gen_dir = run_twice(
        "train-gen", ["train-generator", "--config", cfg, "--seed", "3"],
        ["generator.tclw", "generator.tclw.json", "generator_loss.csv"],
    )
    gen = str(gen_dir / "generator.tclw")
    crit_dir = run_twice(
        "train-crit", ["train-critic", "--config", cfg, "--seed", "4", "--generator", gen],
        ["critic.tclw", "critic.tclw.json", "critic_loss.csv"],
    )
    crit = str(crit_dir / "critic.tclw")
    sample_dir = run_twice(
        "sample", ["sample", "--config", cfg, "--seed", "5", "--generator", gen,
                   "--critic", crit, "--selector", "critic", "--n", "200",
                   "--trace", "traces.jsonl"],
        ["samples.jsonl", "traces.jsonl"],
    )
    run_twice(
        "eval", ["eval", "--config", cfg, "--seed", "6",
                 "--samples", str(sample_dir / "samples.jsonl"), "--class-index", "0"],
        ["metrics.csv"],
    )
    run_twice(
        "compare", ["compare", "--config", cfg, "--seed", "7", "--generator", gen,
                    "--critic", crit],
        ["compare.csv", "compare_summary.csv"],
    )
    run_twice(
        "sweep", ["sweep", "--config", cfg, "--seed", "8", "--generator", gen,
                  "--critic", crit],
        ["sweep.csv"],
    )
    run_twice(
        "refine", ["refine", "--config", cfg, "--seed", "9",
                   "--samples", str(sample_dir / "samples.jsonl"),
                   "--generator", gen, "--critic", crit, "--ratio", "0.5", "--steps", "3"],
        ["refined.jsonl", "refine_delta.csv"],
    )
    run_twice(
        "reject", ["reject", "--config", cfg, "--seed", "10", "--generator", gen,
                   "--critic", crit, "--selector", "critic", "--accept-rate", "0.2",
                   "--n", "50"],
        ["samples.jsonl"],
    )
    report("AC-9", True, f"all eight commands replay byte-identically ({time.time()-t0:.0f}s)")


# ---------------------------------------------------------------------------
# AC-10: schedule invariants and exact rank-k trace sizes
# ---------------------------------------------------------------------------


def test_ac10_schedule_and_trace_invariants(tiny_models):
    t0 = time.time()
    grid_ok = gamma(0.0) == 0.0 and gamma(1.0) == 1.0
    u = np.linspace(0, 1, 10_001)
    grid_ok &= bool(np.all(np.diff(np.sin(0.5 * np.pi * u)) >= 0))
    for total in range(1, 17):
        grid_ok &= mask_count(0, total, 9) == 0

    gen, crit = tiny_models
    cfg = sampler.make_sampler_config(5, "critic", noise_scale=1.0, seed=2718)
    n = gen.config.grid_size
    _, traces = sampler.sample_runs(
        selector="critic", class_index=0, count=1000, config=cfg,
        generator=gen, critic=crit, collect_traces=True,
    )
    trace_ok = len(traces) == 1000
    checked = 0
    for tr in traces:
        for step in tr.steps:
            expected = cfg.schedule.mask_count(step.t - 1, n)
            if step.k != expected or int((step.mask_bits == 0).sum()) != expected:
                trace_ok = False
            checked += 1
        if not tr.steps[-1].k == 0 or np.any(tr.final_tokens == gen.config.vocab_out):
            trace_ok = False
    ok = grid_ok and trace_ok
    report("AC-10", ok,
           f"gamma boundaries/monotonicity, mask_count(0)=0 for T=1..16, and exact rank-k "
           f"sizes over {checked} selection steps from 1000 traces ({time.time()-t0:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# Extra derived example: colder late temperature trades diversity for quality
# ---------------------------------------------------------------------------


def test_sweep_diversity_trend_reported(world_b, models_b):
    gen, _ = models_b
    distinct = {}
    for intercept in (0.5, 1.0):
        cfg = sampler.make_sampler_config(
            6, "confidence", noise_scale=0.0, temp_intercept=intercept, seed=41
        )
        tokens, _ = sampler.sample_runs(
            selector="confidence", class_index=0, count=20_000, config=cfg,
            generator=gen, stream_label=f"sweep-trend-{intercept}",
        )
        distinct[intercept] = worlds.compare_to_truth(tokens, world_b, 0).distinct_ratio
    print(f"\n[report] distinct ratio at noise 0: b=0.5 -> {distinct[0.5]:.4f}, "
          f"b=1.0 -> {distinct[1.0]:.4f}")
    assert distinct[0.5] <= distinct[1.0]


# ---------------------------------------------------------------------------
# Extra derived example: a corrupted token gets the minimum critic score
# ---------------------------------------------------------------------------


def test_trained_critic_flags_corrupted_position(world_a, critic_a_vs_random):
    """One world-inconsistent token in an otherwise clean pattern grid gets
    the minimum critic score in at least 80 of 100 trials."""
    w = world_a
    crit = critic_a_vs_random
    rng = make_rng(31, "corrupt")
    hits = 0
    trials = 100
    for _ in range(trials):
        c = int(rng.integers(w.num_classes))
        grid = w.base_patterns[c].copy()
        pos = int(rng.integers(w.n))
        grid[pos] = (grid[pos] + 1 + int(rng.integers(w.k - 1))) % w.k
        scores = nets.critic_forward(crit, TokenGrid(w.shape, w.vocab, grid), c)
        hits += int(np.argmin(scores) == pos)
    print(f"\n[report] corrupted position flagged as minimum critic score in {hits}/{trials} trials")
    assert hits >= 80
