import dataclasses
import json

import numpy as np
import pytest

from ctcreorder.errors import ConfigError, DataError
from ctcreorder.nn_encoder import CTCEncoder, ModelConfig, load_checkpoint, parameter_arrays
from ctcreorder.synth_corpus import TaskSpec, generate
from ctcreorder.trainer import (
    TrainConfig, TrainingLog, accumulate_gradients, average_checkpoints, average_models,
    examples_from_manifest, global_grad_norm, noam_lr, train,
)


def toy_model(asr=False, seed=0, dropout=0.1):
    return CTCEncoder(ModelConfig(num_layers=2, attention_dim=8, num_heads=2, ffn_dim=16,
                                  st_vocab_size=7, feat_dim=4, dropout=dropout, seed=seed,
                                  asr_layer=1 if asr else None, asr_vocab_size=7 if asr else None))


@pytest.fixture(scope="module")
def corpus():
    spec = TaskSpec(kind="local_swap", src_vocab_size=6, tgt_vocab_size=6, min_len=2, max_len=5,
                    feat_dim=4, frames_per_symbol=6, seed=1)
    return generate(spec, 24, "train")


def test_noam_values():
    assert noam_lr(1, 32, 400, 2.5) == pytest.approx(5.524e-5, rel=1e-3)
    peak = noam_lr(400, 32, 400, 2.5)
    assert peak == pytest.approx(2.5 * 32 ** -0.5 * 400 ** -0.5, rel=1e-12)
    warm = [noam_lr(s, 32, 400, 2.5) for s in range(1, 401)]
    decay = [noam_lr(s, 32, 400, 2.5) for s in range(400, 2000)]
    assert all(a < b for a, b in zip(warm, warm[1:]))
    assert all(a > b for a, b in zip(decay, decay[1:]))
    with pytest.raises(ConfigError):
        noam_lr(0, 32, 400, 2.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stepz": 3})
    assert TrainConfig.from_dict(TrainConfig(steps=7).to_dict()).steps == 7


def test_zero_steps_leave_parameters(corpus):
    m = toy_model()
    before = parameter_arrays(m)
    res = train(m, examples_from_manifest(corpus, False), TrainConfig(steps=0))
    assert res.log.records == [] and res.checkpoints == []
    for k, v in parameter_arrays(m).items():
        assert np.array_equal(v, before[k])


def test_training_is_deterministic(corpus, tmp_path):
    ex = examples_from_manifest(corpus, True)
    cfg = TrainConfig(steps=6, batch_size=5, grad_accum=2, checkpoint_every=3, seed=4)
    a = train(toy_model(True), ex, cfg, out_dir=tmp_path / "a")
    b = train(toy_model(True), ex, cfg, out_dir=tmp_path / "b")
    assert a.log.to_jsonl(with_clock=False) == b.log.to_jsonl(with_clock=False)
    for step in (3, 6):
        assert (tmp_path / "a" / f"ckpt_{step}.bin").read_bytes() == \
            (tmp_path / "b" / f"ckpt_{step}.bin").read_bytes()
    assert (tmp_path / "a" / "latest").read_text().strip() == "ckpt_6.bin"
    rec = json.loads(a.log.to_jsonl().splitlines()[0])
    assert set(rec) == {"step", "lr", "loss", "st_loss", "asr_loss", "grad_norm", "wall_clock"}
    loaded = load_checkpoint(tmp_path / "a" / "ckpt_6.bin")
    for k, v in parameter_arrays(a.model).items():
        assert np.array_equal(parameter_arrays(loaded)[k], v)


def test_loss_decreases(corpus):
    ex = examples_from_manifest(corpus, False)
    res = train(toy_model(), ex, TrainConfig(steps=60, batch_size=8, grad_accum=1, warmup_steps=10,
                                             lr_scale=1.0))
    first = np.mean([r["loss"] for r in res.log.records[:5]])
    last = np.mean([r["loss"] for r in res.log.records[-5:]])
    assert last < first


def test_clipping_bounds_update_norm(corpus):
    ex = examples_from_manifest(corpus, False)
    norms = []
    m = toy_model()
    train(m, ex, TrainConfig(steps=5, batch_size=6, grad_clip=0.01, grad_accum=1),
          progress=lambda step, rec: norms.append((rec["grad_norm"], global_grad_norm(m.parameters()))))
    for pre, post in norms:
        assert post <= 0.01 + 1e-9
        assert pre >= post


def test_accumulation_equals_union_batch(corpus):
    ex = examples_from_manifest(corpus, True)[:7]
    m = toy_model(True, dropout=0.0)
    accumulate_gradients(m, [ex[:3], ex[3:]], lam=0.4)
    split = {k: p.grad.clone() for k, p in m.named_parameters()}
    m.zero_grad(set_to_none=True)
    accumulate_gradients(m, [ex], lam=0.4)
    for k, p in m.named_parameters():
        np.testing.assert_allclose(split[k].numpy(), p.grad.numpy(), atol=1e-10)


def test_multitask_needs_transcriptions(corpus):
    with pytest.raises(DataError):
        train(toy_model(True), examples_from_manifest(corpus, False), TrainConfig(steps=1))
    with pytest.raises(DataError):
        train(toy_model(), [], TrainConfig(steps=1))


def test_infeasible_examples_dropped(corpus, caplog):
    cfg = toy_model().config
    utts = list(corpus.utterances)
    utts[0] = dataclasses.replace(utts[0], features=utts[0].features[:4])
    short = dataclasses.replace(corpus, utterances=utts)
    ex = examples_from_manifest(short, False, cfg=cfg)
    assert [e.id for e in ex] == [u.id for u in utts[1:]]
    assert utts[0].id in caplog.text


def test_average_checkpoints():
    a = {"w": np.zeros((2, 2)), "b": np.zeros(3)}
    b = {"w": np.full((2, 2), 2.0), "b": np.full(3, 2.0)}
    avg = average_checkpoints([a, b])
    assert np.array_equal(avg["w"], np.ones((2, 2))) and np.array_equal(avg["b"], np.ones(3))
    assert np.array_equal(average_checkpoints([a])["w"], a["w"])
    assert np.array_equal(average_checkpoints([b, b, b])["b"], b["b"])
    with pytest.raises(DataError):
        average_checkpoints([a, {"w": np.zeros((2, 2))}])
    with pytest.raises(DataError):
        average_checkpoints([])


def test_average_models_and_result_average(corpus):
    m1, m2 = toy_model(seed=1), toy_model(seed=2)
    avg = average_models([m1, m2])
    p1, p2 = parameter_arrays(m1), parameter_arrays(m2)
    for k, v in parameter_arrays(avg).items():
        np.testing.assert_allclose(v, (p1[k] + p2[k]) / 2, atol=1e-15)
    with pytest.raises(DataError):
        average_models([m1, toy_model(asr=True)])
    res = train(toy_model(), examples_from_manifest(corpus, False),
                TrainConfig(steps=4, batch_size=4, grad_accum=1, checkpoint_every=2, average_last_k=2))
    assert [s for s, _ in res.checkpoints] == [2, 4]
    assert res.averaged(1).config == res.model.config


def test_log_steps_must_increase():
    log = TrainingLog()
    log.append(step=1)
    with pytest.raises(ValueError):
        log.append(step=1)


def test_pretrain_asr_targets_source_symbols(corpus):
    from ctcreorder.pipeline import pretrain_asr

    res = pretrain_asr(corpus, {"num_layers": 1, "attention_dim": 8, "ffn_dim": 16},
                       TrainConfig(steps=3, batch_size=4, grad_accum=1))
    assert res.model.config.st_vocab_size == len(corpus.src_vocab)
    assert res.model.config.asr_layer is None and len(res.log.records) == 3
