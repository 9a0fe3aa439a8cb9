import math

import numpy as np
import pytest

from factlab import evaluator, factgen, model, tokenizer, trainer
from factlab.errors import ConfigurationError, DegenerateInputError, DivergenceError


def small_data(tiny_corpus, n=8):
    sub = factgen.sample_facts(tiny_corpus, n, seed=2)
    return trainer.EncodedDataset.from_facts(sub)


# ---------------------------------------------------------------- config / schedule

def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        trainer.TrainConfig(learning_rate=1e-3, epochs=0)
    with pytest.raises(ConfigurationError):
        trainer.TrainConfig(learning_rate=0.0, epochs=1)
    with pytest.raises(ConfigurationError):
        trainer.TrainConfig(learning_rate=1e-3, epochs=1, batch_size=0)


def test_cosine_schedule_endpoints():
    cfg = trainer.TrainConfig(learning_rate=1e-2, epochs=1, lr_floor=1e-4)
    total = 100
    assert trainer.cosine_lr(cfg, 0, total) == pytest.approx(1e-2)
    assert trainer.cosine_lr(cfg, total - 1, total) == pytest.approx(1e-4)
    mid = trainer.cosine_lr(cfg, (total - 1) // 2, total)
    assert 1e-4 < mid < 1e-2


def test_cosine_schedule_single_step():
    cfg = trainer.TrainConfig(learning_rate=5e-3, epochs=1)
    assert trainer.cosine_lr(cfg, 0, 1) == pytest.approx(5e-3)


def test_warmup_ramps_then_decays():
    cfg = trainer.TrainConfig(learning_rate=1e-2, epochs=1, warmup_steps=10)
    assert trainer.cosine_lr(cfg, 0, 100) == pytest.approx(1e-3)
    assert trainer.cosine_lr(cfg, 9, 100) == pytest.approx(1e-2)
    assert trainer.cosine_lr(cfg, 10, 100) == pytest.approx(1e-2)
    assert trainer.cosine_lr(cfg, 99, 100) == pytest.approx(cfg.lr_floor)


def test_step_arithmetic(tiny_corpus):
    data = small_data(tiny_corpus, 1)  # 4 facts
    assert trainer.steps_per_epoch(data, batch_size=64) == 1
    assert trainer.steps_per_epoch(data, batch_size=3) == 2


# ---------------------------------------------------------------- streams

def test_weighted_equals_physical_duplication_stream():
    pairs = [(f"prompt {i}:", f"value {i}") for i in range(10)]
    weights = [3, 1, 2, 1, 1, 4, 1, 2, 1, 1]
    weighted = trainer.EncodedDataset.from_pairs(pairs, weights)
    physical_pairs = []
    for (p, t), w in zip(pairs, weights):
        physical_pairs.extend([(p, t)] * w)
    physical = trainer.EncodedDataset.from_pairs(physical_pairs)
    for epoch in range(3):
        sw = trainer.epoch_stream(weighted, seed=5, epoch=epoch)
        sp = trainer.epoch_stream(physical, seed=5, epoch=epoch)
        rendered_w = [weighted.examples[i].prompt_text for i in sw]
        rendered_p = [physical.examples[i].prompt_text for i in sp]
        assert rendered_w == rendered_p


def test_epoch_stream_is_permutation(tiny_corpus):
    data = small_data(tiny_corpus)
    stream = trainer.epoch_stream(data, seed=1, epoch=0)
    assert sorted(stream) == sorted(data.expanded_indices())
    assert not np.array_equal(stream, trainer.epoch_stream(data, seed=1, epoch=1))


def test_make_batch_shapes(tiny_corpus):
    data = small_data(tiny_corpus)
    tokens, mask = trainer.make_batch(data.examples[:5])
    assert tokens.shape == mask.shape
    assert tokens[0, 0] == tokenizer.BOS
    for i, e in enumerate(data.examples[:5]):
        assert not mask[i, :e.target_start].any()
        assert mask[i, e.target_start:len(e.tokens)].all()
        assert not mask[i, len(e.tokens):].any()


# ---------------------------------------------------------------- training

def test_train_deterministic(tiny_corpus, tiny_model_cfg):
    data = small_data(tiny_corpus)
    finals = []
    for _ in range(2):
        st = model.init_model(tiny_model_cfg, seed=9)
        trainer.train(st, data, trainer.TrainConfig(learning_rate=2e-3, epochs=4,
                                                    batch_size=8, seed=9))
        finals.append(st.params)
    assert all(np.array_equal(finals[0][k], finals[1][k]) for k in finals[0])


def test_train_divergence_aborts(tiny_corpus, tiny_model_cfg):
    data = small_data(tiny_corpus)
    st = model.init_model(tiny_model_cfg, seed=0)
    with pytest.raises(DivergenceError) as exc:
        trainer.train(st, data, trainer.TrainConfig(learning_rate=1e4, epochs=30,
                                                    batch_size=8, seed=0))
    assert "epoch" in exc.value.snapshot


def test_weighted_vs_duplicated_updates_identical(tiny_model_cfg):
    pairs = [(f"p{i}:", f"v{i}") for i in range(6)]
    weighted = trainer.EncodedDataset.from_pairs(pairs, [2, 1, 1, 3, 1, 1])
    phys_pairs = []
    for (p, t), w in zip(pairs, [2, 1, 1, 3, 1, 1]):
        phys_pairs.extend([(p, t)] * w)
    physical = trainer.EncodedDataset.from_pairs(phys_pairs)
    cfg = trainer.TrainConfig(learning_rate=2e-3, epochs=3, batch_size=4, seed=3)
    st1 = model.init_model(tiny_model_cfg, seed=1)
    trainer.train(st1, weighted, cfg)
    st2 = model.init_model(tiny_model_cfg, seed=1)
    trainer.train(st2, physical, cfg)
    assert all(np.array_equal(st1.params[k], st2.params[k]) for k in st1.params)


def test_run_dir_layout_and_resume(tmp_path, tiny_corpus, tiny_model_cfg):
    data = small_data(tiny_corpus)
    rd = tmp_path / "run"
    cfg = trainer.TrainConfig(learning_rate=2e-3, epochs=6, batch_size=8, seed=2,
                              checkpoint_every=2)
    st = model.init_model(tiny_model_cfg, seed=2)
    trainer.train(st, data, cfg, run_dir=rd)
    assert (rd / "config.json").exists()
    assert (rd / "metrics.csv").exists()
    assert (rd / "checkpoints" / "final.ckpt").exists()
    assert (rd / "checkpoints" / "epoch_00002.ckpt").exists()

    # resumed run from epoch 4 matches an uninterrupted run bit for bit
    st_resume = model.init_model(tiny_model_cfg, seed=2)
    rd2 = tmp_path / "run2"
    cfg4 = trainer.TrainConfig(learning_rate=2e-3, epochs=4, batch_size=8, seed=2,
                               checkpoint_every=4)
    # train 4 epochs with the schedule of the full 6-epoch run, then resume
    import dataclasses
    st_partial = model.init_model(tiny_model_cfg, seed=2)
    full_cfg = dataclasses.replace(cfg, checkpoint_every=2)
    # emulate interruption: run the full config but stop by training a copy
    trainer.train(st_partial, data, full_cfg, run_dir=rd2)
    # wipe checkpoints after epoch 4 and resume
    (rd2 / "checkpoints" / "final.ckpt").unlink()
    (rd2 / "checkpoints" / "epoch_00006.ckpt").unlink()
    st_resumed = model.init_model(tiny_model_cfg, seed=2)
    trainer.train(st_resumed, data, full_cfg, run_dir=rd2, resume=True)
    assert all(np.array_equal(st.params[k], st_resumed.params[k]) for k in st.params)


def test_report_fields(tiny_corpus, tiny_model_cfg):
    data = small_data(tiny_corpus)
    st = model.init_model(tiny_model_cfg, seed=0)
    cfg = trainer.TrainConfig(learning_rate=2e-3, epochs=3, batch_size=8, seed=0,
                              eval_every=1)
    rep = trainer.train(st, data, cfg)
    assert len(rep.epoch_losses) == 3
    assert all(math.isfinite(x) for x in rep.epoch_losses)
    assert rep.effective_examples_per_epoch == data.total_weight()
    assert [e for e, _ in rep.mr_snapshots] == [1, 2, 3]


# ---------------------------------------------------------------- phased

def test_phased_single_phase_equals_train(tiny_corpus, tiny_model_cfg):
    data = small_data(tiny_corpus)
    cfg = trainer.TrainConfig(learning_rate=2e-3, epochs=3, batch_size=8, seed=4)
    st1 = model.init_model(tiny_model_cfg, seed=4)
    trainer.train(st1, data, cfg)
    st2 = model.init_model(tiny_model_cfg, seed=4)
    rep = trainer.train_phased(st2, [(data, cfg)])
    assert all(np.array_equal(st1.params[k], st2.params[k]) for k in st1.params)
    assert len(rep.phase_snapshots) == 1


def test_phased_reports_boundary_mr(tiny_corpus, tiny_model_cfg):
    a = small_data(tiny_corpus, 4)
    sub_b = factgen.sample_facts(tiny_corpus, 4, seed=77)
    b = trainer.EncodedDataset.from_facts(sub_b)
    cfg = trainer.TrainConfig(learning_rate=2e-3, epochs=2, batch_size=8, seed=4)
    st = model.init_model(tiny_model_cfg, seed=4)
    rep = trainer.train_phased(st, [(a, cfg), (b, cfg)])
    assert len(rep.phase_snapshots) == 2
    assert len(rep.phase_snapshots[0]) == 2  # MR of both datasets after each phase


# ---------------------------------------------------------------- grad check

def test_grad_check_random_model():
    cfg = model.ModelConfig(num_layers=2, hidden=32, intermediate=96, heads=4)
    res = trainer.grad_check(cfg, seed=3)
    assert res.max_rel_error < 1e-4
    assert res.worst_group in res.per_group
    assert set(res.per_group) >= {"wq", "wk", "wv", "wo", "wg", "wu", "wd",
                                  "attn_norm", "mlp_norm", "embed", "head",
                                  "final_norm", "bq", "bk", "bv"}


def test_grad_check_zero_projections():
    cfg = model.ModelConfig(num_layers=1, hidden=16, intermediate=32, heads=2,
                            init_std=0.0)
    res = trainer.grad_check(cfg, seed=1, coords_per_group=2)
    assert res.max_rel_error < 1e-4


# ---------------------------------------------------------------- smoke (slow)

@pytest.mark.slow
def test_smoke_memorizes_50_facts(tiny_schema):
    corpus = factgen.synth_corpus(tiny_schema, num_keys=13, seed=42)
    sub = factgen.sample_facts(corpus, 13, seed=0)  # 52 facts
    data = trainer.EncodedDataset.from_facts(sub)
    cfg = model.ModelConfig(num_layers=2, hidden=64, intermediate=128, heads=4,
                            max_seq_len=160)
    st = model.init_model(cfg, seed=0)
    tcfg = trainer.TrainConfig(learning_rate=3e-3, epochs=300, batch_size=16, seed=0,
                               eval_every=50, stop_at_mr=1.0)
    trainer.train(st, data, tcfg)
    assert evaluator.memorization_rate(st, data).overall_mr == 1.0
