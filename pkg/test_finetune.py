import csv

import numpy as np
import pytest

from errors import ClassificationError, ConfigError, ContractError, NumericError, RangeError
from finetune import (AdamState, BnStatsPolicy, HISTORY_COLUMNS, ParamGroup, Strategy, StrategyKind, _batches,
                      accuracy_from_logits, adam_step, build_freeze_plan, classify_params, evaluate,
                      group_learning_rates, parse_strategy, train, write_history_csv)
from mininet import HEAD_PREFIX, ModelConfig, build_model, clone_model, forward
from nn_kernel import Mode
from synth_data import Dataset, TaskSpec, generate_splits


# ==================== STRATEGIES ====================

@pytest.mark.parametrize("text,kind,stages", [
    ("scratch", StrategyKind.SCRATCH, set()),
    ("fc", StrategyKind.FC_ONLY, set()),
    ("cnn-fc", StrategyKind.CNN_FC, set()),
    ("bn-fc", StrategyKind.BN_FC, set()),
    ("all-uniform", StrategyKind.ALL_UNIFORM, set()),
    ("diff-lr", StrategyKind.DIFFERENTIAL_LR, set()),
    ("partial-bn=3,4", StrategyKind.PARTIAL_BN, {3, 4}),
    (" Partial-BN=4 ", StrategyKind.PARTIAL_BN, {4}),
])
def test_parse_strategy(text, kind, stages):
    strategy = parse_strategy(text)
    assert strategy.kind == kind
    assert strategy.stages == frozenset(stages)


@pytest.mark.parametrize("text", ["bn", "partial-bn", "partial-bn=", "partial-bn=x", "fc=1"])
def test_parse_strategy_rejects_bad_names(text):
    with pytest.raises(ConfigError):
        parse_strategy(text)


def test_strategy_name_is_canonical():
    assert parse_strategy("partial-bn=4,3").name == "partial-bn=3,4"
    assert str(Strategy(StrategyKind.DIFFERENTIAL_LR)) == "diff-lr"


def test_classify_params(tiny_model):
    groups = classify_params(tiny_model)
    assert groups["s1.b0.conv.weight"] == ParamGroup.CNN
    assert groups["s1.b0.conv.bias"] == ParamGroup.CNN
    assert groups["s2.b0.bn.gamma"] == ParamGroup.BN
    assert groups[f"{HEAD_PREFIX}.bias"] == ParamGroup.FC


def test_classify_params_rejects_unknown(tiny_model):
    tiny_model.params["mystery"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(ClassificationError):
        classify_params(tiny_model)


# ==================== FREEZE PLANS ====================

def test_diff_lr_rates(tiny_model):
    plan = build_freeze_plan(parse_strategy("diff-lr"), tiny_model)
    assert plan.lr["s1.b0.bn.gamma"] == 0.01
    assert plan.lr["s2.b0.bn.beta"] == 0.01
    assert plan.lr[f"{HEAD_PREFIX}.weight"] == 0.001
    assert plan.lr["s1.b0.conv.weight"] == 0.0001
    assert all(plan.trainable.values())
    assert group_learning_rates(plan, tiny_model) == (0.0001, 0.01, 0.001)


def test_scratch_rates(tiny_model):
    plan = build_freeze_plan(parse_strategy("scratch"), tiny_model)
    assert set(plan.lr.values()) == {0.001}
    assert group_learning_rates(plan, tiny_model) == (0.001, 0.001, 0.001)


def test_fc_plan_trains_only_head(tiny_model):
    plan = build_freeze_plan(parse_strategy("fc"), tiny_model)
    assert plan.trainable_names == [f"{HEAD_PREFIX}.weight", f"{HEAD_PREFIX}.bias"]
    assert not any(plan.bn_update_running.values())
    assert plan.lr["s1.b0.conv.weight"] == 0.0


def test_partial_bn_selects_stages(tiny_model):
    plan = build_freeze_plan(parse_strategy("partial-bn=2"), tiny_model)
    assert set(plan.trainable_names) == {"s2.b0.bn.gamma", "s2.b0.bn.beta", f"{HEAD_PREFIX}.weight",
                                         f"{HEAD_PREFIX}.bias"}
    assert plan.bn_update_running == {"s1.b0.bn": False, "s2.b0.bn": True}
    assert group_learning_rates(plan, tiny_model) == (0.0, 0.01, 0.01)


def test_partial_bn_rejects_missing_stage(tiny_model):
    with pytest.raises(RangeError):
        build_freeze_plan(parse_strategy("partial-bn=3"), tiny_model)


@pytest.mark.parametrize("policy,expected", [
    (BnStatsPolicy.COUPLED, False),
    (BnStatsPolicy.ALWAYS, True),
    (BnStatsPolicy.NEVER, False),
])
def test_bn_stats_policy_for_frozen_bn(tiny_model, policy, expected):
    plan = build_freeze_plan(parse_strategy("cnn-fc"), tiny_model, policy)
    assert set(plan.bn_update_running.values()) == {expected}


def test_never_policy_freezes_stats_of_trainable_bn(tiny_model):
    plan = build_freeze_plan(parse_strategy("bn-fc"), tiny_model, BnStatsPolicy.NEVER)
    assert not any(plan.bn_update_running.values())
    assert plan.trainable["s1.b0.bn.gamma"]


@pytest.mark.parametrize("name,policy,expected", [
    ("fc", BnStatsPolicy.COUPLED, {"s1.b0.bn": True, "s2.b0.bn": True}),
    ("partial-bn=2", BnStatsPolicy.COUPLED, {"s1.b0.bn": True, "s2.b0.bn": False}),
    ("bn-fc", BnStatsPolicy.COUPLED, {"s1.b0.bn": False, "s2.b0.bn": False}),
    ("fc", BnStatsPolicy.ALWAYS, {"s1.b0.bn": False, "s2.b0.bn": False}),
    ("fc", BnStatsPolicy.NEVER, {"s1.b0.bn": False, "s2.b0.bn": False}),
])
def test_frozen_bn_layers_use_running_stats_only_when_coupled(tiny_model, name, policy, expected):
    plan = build_freeze_plan(parse_strategy(name), tiny_model, policy)
    assert plan.bn_frozen == expected


def test_fc_training_forward_matches_evaluation(tiny_model, tiny_data):
    for state in tiny_model.bn_states.values():
        state.running_mean[...] = 0.05
        state.running_var[...] = 0.5
    plan = build_freeze_plan(parse_strategy("fc"), tiny_model)
    batch = tiny_data[0].images[:8]
    train_logits, _ = forward(tiny_model, batch, Mode.TRAIN,
                              bn_update=plan.bn_update_running, bn_frozen=plan.bn_frozen)
    eval_logits, _ = forward(tiny_model, batch, Mode.EVAL)
    np.testing.assert_array_equal(train_logits, eval_logits)


# ==================== ADAM ====================

def _grads(model, value=1.0):
    return {name: np.full_like(p, value) for name, p in model.params.items()}


def test_adam_first_step_moves_by_learning_rate(tiny_model):
    plan = build_freeze_plan(parse_strategy("diff-lr"), tiny_model)
    before = {k: v.copy() for k, v in tiny_model.params.items()}
    state = AdamState.for_model(tiny_model)
    adam_step(tiny_model, _grads(tiny_model), plan, state)

    assert state.step == 1
    for name, value in tiny_model.params.items():
        np.testing.assert_allclose(value, before[name] - plan.lr[name], rtol=0, atol=1e-6)


def test_adam_skips_frozen_parameters(tiny_model):
    plan = build_freeze_plan(parse_strategy("fc"), tiny_model)
    before = {k: v.copy() for k, v in tiny_model.params.items()}
    state = AdamState.for_model(tiny_model)
    adam_step(tiny_model, _grads(tiny_model), plan, state)
    for name in before:
        if name.startswith(HEAD_PREFIX):
            assert not np.array_equal(tiny_model.params[name], before[name])
        else:
            assert tiny_model.params[name].tobytes() == before[name].tobytes()
            assert not state.m[name].any()


def test_adam_rejects_non_finite_gradient(tiny_model):
    plan = build_freeze_plan(parse_strategy("fc"), tiny_model)
    before = {k: v.copy() for k, v in tiny_model.params.items()}
    grads = _grads(tiny_model)
    grads[f"{HEAD_PREFIX}.bias"][0] = np.nan
    version = tiny_model.version
    with pytest.raises(NumericError) as info:
        adam_step(tiny_model, grads, plan, AdamState.for_model(tiny_model))
    assert info.value.param_name == f"{HEAD_PREFIX}.bias"
    assert tiny_model.version == version
    for name in before:
        np.testing.assert_array_equal(tiny_model.params[name], before[name])


def test_adam_ignores_nan_in_frozen_gradient(tiny_model):
    plan = build_freeze_plan(parse_strategy("fc"), tiny_model)
    grads = _grads(tiny_model)
    grads["s1.b0.conv.weight"][...] = np.nan
    adam_step(tiny_model, grads, plan, AdamState.for_model(tiny_model))


def test_adam_rejects_key_mismatch(tiny_model):
    plan = build_freeze_plan(parse_strategy("fc"), tiny_model)
    grads = _grads(tiny_model)
    del grads[f"{HEAD_PREFIX}.bias"]
    with pytest.raises(ContractError):
        adam_step(tiny_model, grads, plan, AdamState.for_model(tiny_model))


# ==================== TRAINING ====================

def test_batches_merge_trailing_single_sample():
    batches = _batches(9, 4, seed=0, epoch=0)
    assert [len(b) for b in batches] == [4, 5]
    assert sorted(np.concatenate(batches).tolist()) == list(range(9))
    assert [b.tolist() for b in _batches(9, 4, 0, 0)] == [b.tolist() for b in batches]
    assert [len(b) for b in _batches(10, 4, 0, 1)] == [4, 4, 2]


def _assert_frozen_tensors_unchanged(model, train_set, name):
    source = clone_model(model)
    strategy = parse_strategy(name)
    plan = build_freeze_plan(strategy, model)
    model, _ = train(model, train_set, strategy, epochs=5, batch_size=8, seed=0)

    before, after = source.state_tensors(), model.state_tensors()
    changed = 0
    for tensor, value in after.items():
        layer, _, field = tensor.rpartition(".")
        if field in ("running_mean", "running_var"):
            frozen = not plan.bn_update_running[layer]
        else:
            frozen = not plan.trainable[tensor]
        if frozen:
            assert value.tobytes() == before[tensor].tobytes(), tensor
        elif not np.array_equal(value, before[tensor]):
            changed += 1
    assert changed > 0


@pytest.mark.parametrize("name", ["fc", "bn-fc", "cnn-fc", "partial-bn=2", "partial-bn=1,2", "diff-lr"])
def test_frozen_tensors_stay_bit_identical(tiny_model, tiny_data, name):
    _assert_frozen_tensors_unchanged(tiny_model, tiny_data[0], name)


@pytest.fixture(scope="module")
def full_size_data():
    return generate_splits(TaskSpec(), 2, 1, seed=7)[0]


@pytest.mark.parametrize("name", ["partial-bn=4", "partial-bn=3,4"])
def test_frozen_tensors_stay_bit_identical_on_default_model(full_size_data, name):
    model = build_model(ModelConfig(init_seed=3))
    assert model.config.stages == 4
    _assert_frozen_tensors_unchanged(model, full_size_data, name)


def test_train_is_deterministic(tiny_model, tiny_data):
    train_set, test_set = tiny_data
    a, hist_a = train(clone_model(tiny_model), train_set, parse_strategy("diff-lr"), 2, 8, seed=5, test_set=test_set)
    b, hist_b = train(clone_model(tiny_model), train_set, parse_strategy("diff-lr"), 2, 8, seed=5, test_set=test_set)
    for name, value in a.state_tensors().items():
        assert value.tobytes() == b.state_tensors()[name].tobytes()
    assert hist_a == hist_b


def test_scratch_training_reduces_loss(tiny_model, tiny_data):
    train_set, test_set = tiny_data
    _, history = train(tiny_model, train_set, parse_strategy("scratch"), 10, 8, seed=0, test_set=test_set)
    assert len(history) == 10
    assert history[-1].train_loss < history[0].train_loss
    assert all(0.0 <= r.test_acc <= 1.0 for r in history)


def test_scratch_learns_linearly_separable_toy_set():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 30)
    low = rng.uniform(0.0, 0.3, (30, 3, 16, 16))
    high = rng.uniform(0.7, 1.0, (30, 3, 16, 16))
    toy = Dataset(np.concatenate([low, high]).astype(np.float32), labels)
    model = build_model(ModelConfig(stages=2, base_channels=4, input_size=16, num_classes=2, init_seed=1))

    model, history = train(model, toy, parse_strategy("scratch"), epochs=20, batch_size=8, seed=0)
    assert len(history) == 20
    assert evaluate(model, toy) > 0.9


def test_history_csv_echoes_scratch_rate(tmp_path, tiny_model, tiny_data):
    _, history = train(tiny_model, tiny_data[0], parse_strategy("scratch"), 2, 8, seed=0)
    path = str(tmp_path / "scratch.csv")
    write_history_csv(history, path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    for row in rows:
        assert (float(row["lr_cnn"]), float(row["lr_bn"]), float(row["lr_fc"])) == (0.001, 0.001, 0.001)


def test_zero_epochs_leave_model_untouched(tiny_model, tiny_data):
    before = clone_model(tiny_model)
    model, history = train(tiny_model, tiny_data[0], parse_strategy("scratch"), 0, 8, seed=0)
    assert history == []
    for name, value in model.state_tensors().items():
        assert value.tobytes() == before.state_tensors()[name].tobytes()


def test_train_validates_arguments(tiny_model, tiny_data):
    train_set, _ = tiny_data
    strategy = parse_strategy("fc")
    with pytest.raises(ConfigError):
        train(tiny_model, train_set, strategy, 1, batch_size=1, seed=0)
    with pytest.raises(ConfigError):
        train(tiny_model, train_set.subset([]), strategy, 1, 8, seed=0)
    with pytest.raises(ConfigError):
        train(tiny_model, train_set.subset([0]), strategy, 1, 8, seed=0)
    with pytest.raises(ConfigError):
        train(tiny_model, train_set, strategy, -1, 8, seed=0)


def test_history_csv_echoes_learning_rates(tmp_path, tiny_model, tiny_data):
    train_set, test_set = tiny_data
    _, history = train(tiny_model, train_set, parse_strategy("diff-lr"), 1, 8, seed=0, test_set=test_set)
    path = str(tmp_path / "history.csv")
    write_history_csv(history, path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == HISTORY_COLUMNS
    assert rows[0]["strategy"] == "diff-lr"
    assert (float(rows[0]["lr_bn"]), float(rows[0]["lr_fc"]), float(rows[0]["lr_cnn"])) == (0.01, 0.001, 0.0001)


def test_history_csv_leaves_missing_test_acc_blank(tmp_path, tiny_model, tiny_data):
    _, history = train(tiny_model, tiny_data[0], parse_strategy("fc"), 1, 8, seed=0)
    path = str(tmp_path / "history.csv")
    write_history_csv(history, path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["test_acc"] == ""


# ==================== EVALUATION ====================

def test_accuracy_tie_breaks_to_lowest_index():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    assert accuracy_from_logits(logits, [0, 1]) == 1.0
    assert accuracy_from_logits(logits, [1, 2]) == 0.0


def test_random_logits_score_near_chance():
    rng = np.random.default_rng(42)
    n = 7000
    logits = rng.uniform(-1.0, 1.0, (n, 7))
    labels = rng.integers(0, 7, n)
    p = 1 / 7
    assert abs(accuracy_from_logits(logits, labels) - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_evaluate_does_not_touch_running_stats(tiny_model, tiny_data):
    _, test_set = tiny_data
    before = {k: v.copy() for k, v in tiny_model.state_tensors().items()}
    accuracy = evaluate(tiny_model, test_set)
    assert 0.0 <= accuracy <= 1.0
    for name, value in tiny_model.state_tensors().items():
        np.testing.assert_array_equal(value, before[name])


def test_evaluate_rejects_empty_set(tiny_model, tiny_data):
    with pytest.raises(ConfigError):
        evaluate(tiny_model, tiny_data[1].subset([]))
