"""Training harness: metrics, early stopping, pretraining and fine-tuning."""

import json

import numpy as np
import pytest

from redbert.datapipe import (CorpusDoc, GeneratorSpec, build_grammar_vocab,
                              build_pretraining_instances,
                              generate_synthetic_corpus)
from redbert.depinject import DepEmbeddingTable, InjectedModel, SideTransformer
from redbert.encoder import ModelConfig, count_parameters, init_random
from redbert.errors import ConfigError, DataError, RunError
from redbert.tokenizer import Vocab
from redbert.trainkit import (EarlyStopper, TrainRunConfig, carve_validation,
                              evaluate_f1, fine_tune, load_model,
                              load_task_head, make_pretrain_heads,
                              overfit_one_batch, predict_task, pretrain,
                              read_metrics_csv, run_model, save_model,
                              trainable_param_dict, write_metrics_csv)

from helpers import TINY_VOCAB

VOCAB = Vocab(list(TINY_VOCAB))
GRAMMAR_VOCAB = Vocab(build_grammar_vocab())


def tiny_model(vocab_size, hidden=16, seed=0, max_len=16):
    cfg = ModelConfig(vocab_size=vocab_size, num_layers=1,
                      hidden_size=hidden, num_heads=2, max_len=max_len)
    return init_random(cfg, seed)


def tiny_injected(vocab_size, hidden=16, dep_dim=8, seed=0, max_len=16):
    state = tiny_model(vocab_size, hidden=hidden, seed=seed, max_len=max_len)
    rng = np.random.default_rng(seed + 1)
    table = DepEmbeddingTable(
        rng.normal(0, 0.1, size=(vocab_size, dep_dim)), dep_dim,
        from_file=np.zeros(vocab_size, dtype=bool))
    side = SideTransformer(dep_dim, max_len, num_heads=2, seed=seed + 2)
    return InjectedModel(state, table, side)


def tiny_corpus():
    texts = [
        ["add milk to my cart", "i want to buy milk", "what is the total",
         "add the cart"],
        ["buy the running shoes", "add shoes to cart",
         "what is my total", "i want the shoes"],
        ["the total is what", "milk and shoes", "buy my cart",
         "add to my cart"],
        ["i want to buy", "the milk is the total", "shoes cart milk",
         "what to buy"],
    ]
    return [CorpusDoc(f"doc-{i}", "chat", s) for i, s in enumerate(texts)]


def tiny_instances(seed=0):
    return build_pretraining_instances(tiny_corpus(), VOCAB, max_len=16,
                                       seed=seed)


# -------------------------------------------------------------------- config


def test_config_defaults():
    cfg = TrainRunConfig()
    assert cfg.batch_size == 32
    assert cfg.learning_rate == 2e-5
    assert cfg.patience == 3


@pytest.mark.parametrize("kwargs", [
    {"batch_size": 0},
    {"patience": 0},
    {"max_epochs": 0},
    {"eval_every": 0},
    {"learning_rate": 0.0},
    {"learning_rate": -1e-4},
])
def test_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        TrainRunConfig(**kwargs)


# ------------------------------------------------------------- early stopper


def test_early_stopper_fires_after_exactly_patience():
    stopper = EarlyStopper(patience=3, mode="min")
    assert stopper.update(1.0)
    for i, loss in enumerate([1.1, 1.2, 1.3], start=1):
        assert not stopper.should_stop
        assert not stopper.update(loss)
        assert stopper.should_stop == (i == 3)


def test_early_stopper_equal_is_not_improvement():
    stopper = EarlyStopper(patience=1, mode="min")
    stopper.update(0.5)
    assert not stopper.update(0.5)
    assert stopper.should_stop


def test_early_stopper_reset_on_improvement():
    stopper = EarlyStopper(patience=2, mode="min")
    for value, improved in [(3.0, True), (3.5, False), (2.9, True),
                            (3.0, False), (3.1, False)]:
        assert stopper.update(value) == improved
    assert stopper.should_stop
    assert stopper.best == 2.9


def test_early_stopper_max_mode():
    stopper = EarlyStopper(patience=2, mode="max")
    assert stopper.update(0.5)
    assert stopper.update(0.8)
    assert not stopper.update(0.7)
    assert not stopper.update(0.8)  # ties don't count
    assert stopper.should_stop


def test_early_stopper_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        EarlyStopper(patience=1, mode="median")


# ------------------------------------------------------------------- metrics


def test_f1_all_correct():
    report = evaluate_f1([0, 1, 2, 1], [0, 1, 2, 1], "classification",
                         ["a", "b", "c"])
    assert report.macro_f1 == 1.0
    assert report.micro_f1 == 1.0
    assert all(m.f1 == 1.0 for m in report.per_class.values())
    assert report.per_class["b"].support == 2


def test_f1_hand_computed_binary():
    # class 1: TP=1, FP=1, FN=1 -> P = R = F1 = 0.5
    report = evaluate_f1([1, 0, 1, 0], [1, 1, 0, 0], "classification",
                         ["neg", "pos"])
    assert report.per_class["pos"].precision == 0.5
    assert report.per_class["pos"].recall == 0.5
    assert report.per_class["pos"].f1 == 0.5
    assert report.per_class["neg"].f1 == 0.5
    assert report.accuracy == 0.5


def test_micro_f1_equals_accuracy():
    rng = np.random.default_rng(0)
    for _ in range(5):
        gold = rng.integers(0, 4, size=200)
        pred = rng.integers(0, 4, size=200)
        report = evaluate_f1(pred, gold, "classification", list("abcd"))
        accuracy = float((pred == gold).mean())
        assert abs(report.micro_f1 - accuracy) < 1e-9
        assert abs(report.accuracy - accuracy) < 1e-9


def test_f1_rows_for_every_label_even_unseen():
    report = evaluate_f1([0, 0], [0, 0], "classification", ["a", "b", "c"])
    assert set(report.per_class) == {"a", "b", "c"}
    assert report.per_class["b"].support == 0
    assert report.per_class["b"].f1 == 0.0


def test_f1_misalignment():
    with pytest.raises(DataError):
        evaluate_f1([0, 1], [0, 1, 1], "classification", ["a", "b"])
    with pytest.raises(DataError):
        evaluate_f1([[0, 1]], [[0, 1]], "classification", ["a", "b"])
    with pytest.raises(DataError):
        evaluate_f1([0, 1], [0, 1], "tagging", ["a", "b"])


def test_f1_tagging_excludes_ignored_positions():
    gold = np.array([[-1, 0, 1, -1], [-1, 1, 1, -1]])
    pred = np.array([[1, 0, 1, 0], [0, 1, 1, 1]])  # junk at ignored slots
    report = evaluate_f1(pred, gold, "tagging", ["O", "B"])
    assert report.micro_f1 == 1.0
    assert report.total == 4


def test_f1_rejects_out_of_range_ids():
    with pytest.raises(DataError, match="gold"):
        evaluate_f1([0, 1], [0, 5], "classification", ["a", "b"])
    with pytest.raises(DataError, match="predicted"):
        evaluate_f1([0, 5], [0, 1], "classification", ["a", "b"])


def test_f1_unknown_scheme():
    with pytest.raises(ConfigError):
        evaluate_f1([0], [0], "span", ["a"])


def test_metrics_csv_round_trip(tmp_path):
    rows = [(0, "train", 2.5, None), (1, "train", 1.25, None),
            (1, "val", 1.5, 0.75)]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, rows)
    assert read_metrics_csv(path) == rows
    assert path.read_text().splitlines()[0] == "step,split,loss,f1"


def test_metrics_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("a,b\n")
    with pytest.raises(DataError):
        read_metrics_csv(path)


# ----------------------------------------------------------------- carve


def test_carve_validation_sizes():
    items = list(range(100))
    train, val = carve_validation(items, seed=0)
    assert len(val) == 10 and len(train) == 90
    assert sorted(train + val) == items


def test_carve_validation_minimum_one():
    train, val = carve_validation([1, 2], seed=0)
    assert len(val) == 1 and len(train) == 1
    train, val = carve_validation([7], seed=0)
    assert train == [7] and val == [7]


def test_carve_validation_deterministic():
    items = list(range(30))
    assert carve_validation(items, seed=4) == carve_validation(items, seed=4)


def test_carve_validation_empty():
    with pytest.raises(DataError):
        carve_validation([], seed=0)


# -------------------------------------------------------------- save / load


def test_save_load_plain_model(tmp_path):
    model = tiny_model(len(VOCAB))
    path = tmp_path / "model.ckpt"
    save_model(path, model)
    loaded, leftover, extra = load_model(path)
    assert extra["kind"] == "plain"
    assert leftover == {}
    assert set(loaded.params) == set(model.params)
    for k in model.params:
        assert np.array_equal(loaded.params[k].data, model.params[k].data)


def test_save_load_injected_model(tmp_path):
    model = tiny_injected(len(VOCAB))
    model.table.from_file[3] = True
    path = tmp_path / "model.ckpt"
    save_model(path, model)
    loaded, leftover, extra = load_model(path)
    assert extra["kind"] == "injected"
    assert isinstance(loaded, InjectedModel)
    assert np.array_equal(loaded.table.dw.data, model.table.dw.data)
    assert np.array_equal(loaded.table.from_file, model.table.from_file)
    instances = tiny_instances()[:4]
    from redbert.trainkit import instances_to_batch
    batch, _, _, _ = instances_to_batch(instances)
    a = run_model(model, batch).h.data
    b = run_model(loaded, batch).h.data
    assert np.array_equal(a, b)


def test_save_load_head_params(tmp_path):
    from redbert.objectives import ClassifierHead
    model = tiny_model(len(VOCAB))
    head = ClassifierHead(16, 3, ["a", "b", "c"], seed=5)
    path = tmp_path / "model.ckpt"
    save_model(path, model, head_params={f"head.{k}": v
                                         for k, v in head.params.items()})
    _, leftover, _ = load_model(path)
    assert set(leftover) == {f"head.{k}" for k in head.params}
    rebuilt = load_task_head("classification", 16, ["a", "b", "c"], leftover)
    for k in head.params:
        assert np.array_equal(rebuilt.params[k].data, head.params[k].data)


def test_load_task_head_rejects_mismatch():
    with pytest.raises(DataError):
        load_task_head("classification", 16, ["a", "b"],
                       {"head.unexpected": None})


# --------------------------------------------------------------- pretraining


def test_pretrain_rejects_empty():
    with pytest.raises(DataError):
        pretrain(tiny_model(len(VOCAB)), [], TrainRunConfig())


def test_pretrain_smoke_and_determinism(tmp_path):
    config = TrainRunConfig(batch_size=8, learning_rate=1e-3, max_epochs=3,
                            patience=3, seed=1)
    instances = tiny_instances()

    def run(run_dir=None):
        model = tiny_model(len(VOCAB), seed=3)
        return pretrain(model, instances, config, run_dir=run_dir)

    result, (mlm_head, nsp_head) = run(run_dir=tmp_path)
    assert len(result.loss_history) == 3 * 2  # 12 train instances, batch 8
    assert len(result.val_history) == 3 or result.stopped_early
    assert np.isfinite(result.best_val_loss)
    assert result.best_val_loss == min(v for _, v in result.val_history)

    result2, _ = run()
    assert result2.loss_history == result.loss_history
    assert result2.val_history == result.val_history

    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "run.log.jsonl").exists()
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert any(r[1] == "val" for r in rows)
    events = [json.loads(line) for line in
              (tmp_path / "run.log.jsonl").read_text().splitlines()]
    assert events[0]["event"] == "run_start"
    assert events[-1]["event"] == "run_end"


def test_pretrain_returns_best_not_last():
    """Model left holding the parameters of the best validation epoch."""
    from redbert.trainkit import _pretrain_loss_on
    config = TrainRunConfig(batch_size=8, learning_rate=5e-3, max_epochs=4,
                            patience=4, seed=0)
    instances = tiny_instances()
    model = tiny_model(len(VOCAB), seed=3)
    result, (mlm_head, nsp_head) = pretrain(model, instances, config)
    _, val_set = carve_validation(instances, config.seed)
    recomputed = _pretrain_loss_on(model, mlm_head, nsp_head, val_set,
                                   config.batch_size, 1.0, 1.0)
    assert abs(recomputed - result.best_val_loss) < 1e-9


def test_pretrain_divergence_raises_and_keeps_checkpoint(tmp_path):
    config = TrainRunConfig(batch_size=8, learning_rate=1e-3, max_epochs=2,
                            seed=0)
    model = tiny_model(len(VOCAB), seed=3)
    heads = make_pretrain_heads(model, seed=0)
    heads[1].params["weight"].data[:] = 1e38  # poisoned: first loss is inf
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(RunError, match="diverged"):
            pretrain(model, tiny_instances(), config, run_dir=tmp_path,
                     heads=heads)
    loaded, leftover, _ = load_model(tmp_path / "last_finite.ckpt")
    for t in loaded.params.values():
        assert np.isfinite(t.data).all()


def test_pretrain_injected_model_runs():
    config = TrainRunConfig(batch_size=8, learning_rate=1e-3, max_epochs=1,
                            seed=0)
    model = tiny_injected(len(VOCAB))
    result, _ = pretrain(model, tiny_instances(), config)
    assert len(result.loss_history) == 2
    assert np.isfinite(result.best_val_loss)


def test_overfit_one_batch_loss_decreases():
    """Strict decrease over the first 10 steps for a 5-seed majority."""
    instances = tiny_instances()[:8]
    wins = 0
    for seed in range(5):
        model = tiny_model(len(VOCAB), seed=seed)
        losses = overfit_one_batch(model, instances, steps=10,
                                   learning_rate=1e-3, seed=seed)
        assert len(losses) == 10
        if all(b < a for a, b in zip(losses, losses[1:])):
            wins += 1
    assert wins >= 3


# --------------------------------------------------------------- fine-tuning


def intent_dataset(n=24, seed=0):
    spec = GeneratorSpec(num_docs=2, chat_fraction=0.5, task_examples=n)
    _, tasks = generate_synthetic_corpus(spec, seed=seed)
    return tasks["intent"]


def finetune_config(**kw):
    defaults = dict(batch_size=8, learning_rate=1e-3, max_epochs=2,
                    patience=3, seed=0)
    defaults.update(kw)
    return TrainRunConfig(**defaults)


def test_fine_tune_classification_smoke():
    model = tiny_model(len(GRAMMAR_VOCAB))
    ds = intent_dataset()
    result = fine_tune(model, ds, GRAMMAR_VOCAB, finetune_config(),
                       max_len=16)
    assert set(result.report.per_class) == set(ds.labels)
    assert 0.0 <= result.best_val_f1 <= 1.0
    assert result.loss_history
    assert result.report.losses == result.loss_history
    expected = count_parameters(trainable_param_dict(model),
                                result.head.params)
    assert result.trainable_count == expected


def test_fine_tune_frozen_encoder_trains_head_only():
    model = tiny_model(len(GRAMMAR_VOCAB))
    before = {k: v.data.copy() for k, v in model.params.items()}
    ds = intent_dataset()
    result = fine_tune(model, ds, GRAMMAR_VOCAB, finetune_config(),
                       max_len=16, freeze_encoder=True)
    assert result.trainable_count == count_parameters(result.head.params)
    for k, v in model.params.items():
        assert np.array_equal(v.data, before[k]), k


def test_fine_tune_label_set_mismatch():
    model = tiny_model(len(GRAMMAR_VOCAB))
    with pytest.raises(ConfigError, match="label set mismatch"):
        fine_tune(model, intent_dataset(), GRAMMAR_VOCAB, finetune_config(),
                  max_len=16, labels=["alpha", "beta"])


def test_fine_tune_empty_dataset():
    from redbert.datapipe import TaskDataset
    model = tiny_model(len(GRAMMAR_VOCAB))
    empty = TaskDataset("intent", "classification", ["a", "b"], [])
    with pytest.raises(DataError):
        fine_tune(model, empty, GRAMMAR_VOCAB, finetune_config())


def test_fine_tune_tagging_smoke(tmp_path):
    spec = GeneratorSpec(num_docs=2, chat_fraction=0.5, task_examples=16)
    _, tasks = generate_synthetic_corpus(spec, seed=1)
    model = tiny_model(len(GRAMMAR_VOCAB), max_len=24)
    result = fine_tune(model, tasks["title"], GRAMMAR_VOCAB,
                       finetune_config(), max_len=24, run_dir=tmp_path)
    assert set(result.report.per_class) == {"0", "1"}
    assert (tmp_path / "finetuned.ckpt").exists()
    model2, leftover, extra = load_model(tmp_path / "finetuned.ckpt")
    assert extra["task"] == "title"
    head = load_task_head("tagging", 16, extra["labels"], leftover)
    # the reloaded model + head reproduce the in-memory predictions
    from redbert.trainkit import _encode_task
    enc = _encode_task(tasks["title"], GRAMMAR_VOCAB, 24)[:8]
    pred_a, gold = predict_task(model, result.head, "tagging", enc)
    pred_b, _ = predict_task(model2, head, "tagging", enc)
    assert np.array_equal(pred_a, pred_b)
    assert np.array_equal(gold, np.stack([e[1] for e in enc]))


def test_fine_tune_proactive_smoke():
    spec = GeneratorSpec(num_docs=2, chat_fraction=0.5, task_examples=16)
    _, tasks = generate_synthetic_corpus(spec, seed=2)
    model = tiny_model(len(GRAMMAR_VOCAB), max_len=32)
    result = fine_tune(model, tasks["proactive"], GRAMMAR_VOCAB,
                       finetune_config(), max_len=32)
    assert set(result.report.per_class) == set(tasks["proactive"].labels)
    assert result.best_val_f1 >= 0.0


def test_fine_tune_determinism():
    ds = intent_dataset(n=16)
    config = finetune_config(max_epochs=2, seed=5)

    def run():
        model = tiny_model(len(GRAMMAR_VOCAB), seed=7)
        return fine_tune(model, ds, GRAMMAR_VOCAB, config, max_len=16)

    a, b = run(), run()
    assert a.loss_history == b.loss_history
    assert a.val_history == b.val_history
    assert a.best_val_f1 == b.best_val_f1
