import math

import numpy as np
import pytest

from camex.config import TrainConfig
from camex.harness import (AdamW, Dataset, MetricsLog, SyntheticTask, TrainingDivergedError, build_model,
                           count_params, evaluate, expected_param_counts, expert_param_count, gen_task,
                           oracle_perplexity, parse_grid, run, sweep, sweep_csv, train)
from camex.merging import MergeSpec

from oracles import nll_loop

SMALL = dict(n_experts=3, layers=2, d_model=8, d_ff=8, vocab=8, seq_len=16, segment_len=4,
             n_train=32, n_eval=16, batch_size=4, steps=6, warmup_steps=2)


def small(**kw):
    merge = kw.pop("merge", MergeSpec())
    return TrainConfig(**{**SMALL, **kw}, merge=merge)


# ------------------------------------------------------------------ data
def test_transition_rows_stochastic():
    task = SyntheticTask(vocab=10, regimes=3, seed=5)
    assert task.transitions.shape == (3, 10, 10)
    assert np.all(np.abs(task.transitions.sum(-1) - 1.0) <= 1e-12)


def test_invalid_stochastic_matrix():
    bad = np.full((1, 3, 3), 0.5)
    with pytest.raises(ValueError):
        SyntheticTask(transitions=bad, seq_len=4, segment_len=2)


def test_generation_deterministic():
    a = gen_task(SyntheticTask(seed=7), 20, stream=1)
    b = gen_task(SyntheticTask(seed=7), 20, stream=1)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.targets.tobytes() == b.targets.tobytes()
    c = gen_task(SyntheticTask(seed=7), 20, stream=2)
    assert a.inputs.tobytes() != c.inputs.tobytes()


def test_regimes_constant_within_segments():
    d = gen_task(SyntheticTask(seed=1, seq_len=16, segment_len=4), 30)
    r = d.regimes.reshape(30, 4, 4)
    assert np.all(r == r[..., :1])
    assert np.all(d.inputs[:, 1:] == d.targets[:, :-1])


def test_deterministic_cycle_has_unit_perplexity():
    V = 5
    P = np.zeros((1, V, V))
    P[0, np.arange(V), (np.arange(V) + 1) % V] = 1.0
    task = SyntheticTask(transitions=P, seq_len=8, segment_len=4, vocab=V, regimes=1)
    d = gen_task(task, 6)
    assert np.all(d.targets == (d.inputs + 1) % V)
    assert oracle_perplexity(task, d) == 1.0


def test_uniform_chain_has_perplexity_V():
    V = 6
    task = SyntheticTask(transitions=np.full((1, V, V), 1.0 / V), seq_len=8, segment_len=4, vocab=V, regimes=1)
    assert abs(oracle_perplexity(task, gen_task(task, 10)) - V) <= 1e-9


# ------------------------------------------------------------------ evaluation
def test_uniform_model_perplexity_is_vocab():
    cfg = small()
    model = build_model(cfg)
    model.embed.data[...] = 0.0
    data = gen_task(SyntheticTask.from_config(cfg), 8)
    assert abs(evaluate(model, data) - cfg.vocab) <= 1e-9


def test_perfect_model_perplexity_is_one():
    V = 8
    cfg = small(vocab=V, d_model=V)
    model = build_model(cfg)
    model.embed.data[...] = 10.0 * np.eye(V)
    for layer in model.layers:
        for e in (layer.base, layer.domain):
            for t in e.params().values():
                t.data[...] = 0.0
    P = np.eye(V)[None]  # every token repeats
    task = SyntheticTask(transitions=P, seq_len=16, segment_len=4, vocab=V, regimes=1)
    assert abs(evaluate(model, gen_task(task, 4)) - 1.0) <= 1e-9


@pytest.mark.parametrize("variant", ["merge", "dynamic", "smoe"])
def test_loss_matches_loop_oracle(variant):
    cfg = small(variant=variant)
    model = build_model(cfg)
    data = gen_task(SyntheticTask.from_config(cfg), 3)
    logits = model.logits(data.inputs).data
    assert abs(model.loss(data.inputs, data.targets).item() - nll_loop(logits, data.targets)) <= 1e-12
    ppl = math.exp(nll_loop(logits, data.targets))
    assert abs(evaluate(model, data) - ppl) <= 1e-9 * ppl


def test_evaluate_empty_dataset():
    model = build_model(small())
    with pytest.raises(ValueError):
        evaluate(model, Dataset(np.zeros((0, 16), int), np.zeros((0, 16), int), np.zeros((0, 16), int), "markov_lm"))


def test_clustered_task_accuracy_in_range():
    cfg = small(task="clustered", regimes=3)
    _, m = run(cfg)
    assert m.metric_name == "accuracy"
    assert 0.0 <= m.final_metric <= 1.0


# ------------------------------------------------------------------ training
def test_lr_zero_leaves_parameters():
    cfg = small(lr=0.0)
    model = build_model(cfg)
    before = {n: t.data.copy() for n, t in model.named_parameters().items()}
    train(model, gen_task(SyntheticTask.from_config(cfg), cfg.n_train), cfg)
    for n, t in model.named_parameters().items():
        assert np.array_equal(t.data, before[n]), n


def test_training_is_deterministic():
    cfg = small(merge=MergeSpec(ca_enabled=True))
    a, b = run(cfg)[1], run(cfg)[1]
    assert a.to_csv() == b.to_csv()
    assert a.final_metric == b.final_metric


def test_first_logged_loss_equals_forward_only_evaluation():
    cfg = small()
    data = gen_task(SyntheticTask.from_config(cfg, seed=0), cfg.n_train, stream=1)
    fresh = build_model(cfg)
    order = np.random.default_rng([cfg.seed, 0xBA7C]).permutation(len(data))
    idx = order[:cfg.batch_size]
    ref = nll_loop(fresh.logits(data.inputs[idx]).data, data.targets[idx])
    m = train(build_model(cfg), data, cfg)
    assert abs(m.rows[0]["loss"] - ref) <= 1e-12


def test_identity_curvature_gives_same_initial_loss():
    plain, ca = small(), small(merge=MergeSpec(ca_enabled=True), kronecker_rank=2)
    data = gen_task(SyntheticTask.from_config(plain), 4)
    a = build_model(plain).loss(data.inputs, data.targets).item()
    b = build_model(ca).loss(data.inputs, data.targets).item()
    assert abs(a - b) <= 1e-12


def test_training_reduces_loss():
    cfg = small(steps=60, lr=1e-2, n_train=64)
    _, m = run(cfg)
    assert m.final_metric < m.initial_metric


def test_nan_aborts_training():
    cfg = small()
    model = build_model(cfg)
    model.embed.data[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        train(model, gen_task(SyntheticTask.from_config(cfg), cfg.n_train), cfg)


def test_adamw_schedule():
    opt = AdamW([], lr=0.1, warmup_steps=4, total_steps=12)
    assert opt.lr_at(0) == pytest.approx(0.025)
    assert opt.lr_at(3) == pytest.approx(0.1)
    assert opt.lr_at(4) == pytest.approx(0.1)
    assert opt.lr_at(8) == pytest.approx(0.05)
    assert opt.lr_at(12) == 0.0


def test_metrics_log():
    m = MetricsLog(seed=3, config_hash="abc", metric_name="perplexity")
    m.log_step(0, 0, 1.5)
    m.log_step(1, 0, 1.25, 4.0)
    with pytest.raises(ValueError):
        m.log_step(1, 0, 1.0)
    lines = m.to_csv().splitlines()
    assert lines[0] == "step,epoch,loss,metric,seed,config_hash"
    assert lines[2] == "1,0,1.25,4.0,3,abc"


# ------------------------------------------------------------------ counting
@pytest.mark.parametrize("L", [2, 3, 4])
@pytest.mark.parametrize("N", [2, 4, 8])
def test_dynamic_saves_one_expert_per_extra_layer(L, N):
    full = build_model(small(layers=L, n_experts=N))
    dyn = build_model(small(layers=L, n_experts=N, variant="dynamic"))
    one = expert_param_count(full.cfg)
    assert count_params(dyn).total == count_params(full).total - (L - 1) * one
    assert count_params(dyn).experts == count_params(full).experts - (L - 1) * one


def test_dynamic_counting_example():
    cfg = small(layers=3, n_experts=4)
    one = expert_param_count(cfg)
    assert count_params(build_model(cfg)).experts == 12 * one
    assert count_params(build_model(small(layers=3, n_experts=4, variant="dynamic"))).experts == 10 * one


@pytest.mark.parametrize("variant", ["merge", "dynamic", "smoe"])
@pytest.mark.parametrize("ca,rank", [(False, 1), (True, 1), (True, 3)])
def test_counts_match_closed_form(variant, ca, rank):
    cfg = small(variant=variant, kronecker_rank=rank, merge=MergeSpec(ca_enabled=ca))
    assert count_params(build_model(cfg)) == expected_param_counts(cfg)


def test_curvature_share_formula():
    cfg = small(d_model=8, d_ff=12, n_experts=4, layers=2, kronecker_rank=2, merge=MergeSpec(ca_enabled=True))
    # 12 -> (3, 4), 8 -> (2, 4); biases pair with (1, 1)
    w = 9 + 16 + 4 + 16
    b1 = 9 + 16 + 1 + 1
    b2 = 4 + 16 + 1 + 1
    assert count_params(build_model(cfg)).curvature == 2 * (2 * w + b1 + b2) * 3 * 2
    shared = build_model(cfg.replace(share_curvature=True))
    assert count_params(shared).curvature == 2 * (2 * w + b1 + b2) * 3


def test_curvature_off_and_domain_linearity():
    assert count_params(build_model(small(merge=MergeSpec(ca_enabled=False)))).curvature == 0
    a = count_params(build_model(small(n_experts=3)))
    b = count_params(build_model(small(n_experts=5)))
    one = expert_param_count(small())
    L = SMALL["layers"]
    assert (b.experts - L * one) == 2 * (a.experts - L * one)


def test_two_experts_is_valid():
    cfg = small(n_experts=2)
    _, m = run(cfg)
    assert math.isfinite(m.final_metric)


def test_vanilla_and_merging_expert_counts():
    merge = count_params(build_model(small()))
    vanilla = count_params(build_model(small(variant="smoe")))
    assert merge.experts == vanilla.experts
    # vanilla scores one more expert per layer
    assert vanilla.total - merge.total == SMALL["layers"] * SMALL["d_model"]


# ------------------------------------------------------------------ sweeps
def test_parse_grid():
    assert parse_grid("alpha=0.5,0.8,1.0") == ("alpha", [0.5, 0.8, 1.0])
    assert parse_grid("rank=1,2") == ("rank", [1, 2])
    for bad in ("alpha", "beta=1", "experts="):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_alpha_zero_ignores_merging():
    metrics = set()
    for spec in (MergeSpec(), MergeSpec(ca_enabled=True), MergeSpec(protocol="ties"),
                 MergeSpec(protocol="dare", dare_drop_prob=0.5)):
        rows = sweep(small(merge=spec), ("alpha", [0.0]), [0, 1])
        metrics.add(tuple(r["metric"] for r in rows))
    assert len(metrics) == 1


def test_single_point_sweep_equals_run():
    cfg = small()
    rows = sweep(cfg, ("alpha", [1.0]), [0])
    assert rows[0]["metric"] == run(cfg)[1].final_metric


def test_sweep_rows_deterministic():
    cfg = small(steps=3)
    a = sweep(cfg, ("alpha", [0.5, 0.8, 1.0]), [0, 1, 2])
    b = sweep(cfg, ("alpha", [0.5, 0.8, 1.0]), [0, 1, 2])
    assert len(a) == 9
    assert sweep_csv(a) == sweep_csv(b)


def test_sweep_process_pool_matches_serial(monkeypatch):
    cfg = small(steps=3)
    serial = sweep(cfg, ("rank", [1, 2]), [0], workers=1)
    monkeypatch.setenv("CAMEX_THREADS", "2")
    pooled = sweep(cfg, ("rank", [1, 2]), [0])
    assert sweep_csv(serial) == sweep_csv(pooled)
