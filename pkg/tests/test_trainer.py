import math

import numpy as np
import pytest
import torch

from streamdisfl import trainer as trainer_mod
from streamdisfl.corpus import GeneratorConfig, Utterance, Vocabulary, generate_corpus, split_corpus, TokenRole
from streamdisfl.decoder import decode_corpus
from streamdisfl.encoder import EncoderConfig, StreamingTagger, save_checkpoint
from streamdisfl.metrics import average_waiting_time
from streamdisfl.objective import LossConfig
from streamdisfl.trainer import (
    PRESETS,
    TrainingDiverged,
    build_prefix_batch,
    enumerate_prefixes,
    evaluate_dev_loss,
    make_train_config,
    read_config_file,
    train,
    write_config_file,
)

SMALL = dict(d_model=16, d_ff=32, n_layers=1, n_heads=2, dropout_rate=0.0)


@pytest.fixture(scope="module")
def data():
    cfg = GeneratorConfig(seed=3, utterance_length_range=(3, 6))
    tr, dv, _ = split_corpus(generate_corpus(cfg, 200), [0.7, 0.15, 0.15], seed=1)
    vocab = Vocabulary.build(tr + dv)
    return tr, dv, vocab


def enc(vocab, **kw):
    return EncoderConfig(vocab_size=len(vocab), **{**SMALL, **kw})


@pytest.mark.parametrize("n", [1, 3, 6])
def test_enumerate_prefixes(n):
    ids = list(range(10, 10 + n))
    prefixes = enumerate_prefixes(ids)
    assert [len(p) for p in prefixes] == list(range(1, n + 1))
    assert prefixes[-1] == ids
    assert all(p == ids[: len(p)] for p in prefixes)


def test_enumerate_prefixes_rejects_empty():
    with pytest.raises(ValueError):
        enumerate_prefixes([])


def test_prefix_batch_layout():
    batch = build_prefix_batch([([5, 6, 7], [0, 1, 0]), ([8], [1])])
    assert batch.n_forward == 4
    assert batch.prefix_lengths.tolist() == [1, 2, 3, 1]
    assert batch.utterance_index.tolist() == [0, 0, 0, 1]
    assert batch.ids[1].tolist() == [5, 6, 0]
    marked = build_prefix_batch([([5, 6], [0, 1])], start_marker=True)
    assert marked.ids[0].tolist() == [2, 5, 0]


def quick(**overrides):
    """Desk preset without the warm-up and latency ramp, for short runs."""
    return make_train_config(**{"warmup_epochs": 0, "lambda_start": None, "lambda_ramp_epochs": 0, **overrides})


def test_presets():
    paper = make_train_config("paper")
    assert (paper.loss.lambda_, paper.learning_rate, paper.loss.gamma, paper.batch_size, paper.epochs) == (
        1.5e-7, 1.2e-4, 1.9, 8, 12)
    desk = make_train_config("desk")
    assert (desk.loss.lambda_, desk.learning_rate, desk.epochs, desk.warmup_epochs, desk.lambda_start,
            desk.lambda_ramp_epochs) == (1.5, 1e-3, 30, 10, 1.0, 15)
    assert make_train_config("desk", gamma=0.0).loss.gamma == 0.0
    assert set(PRESETS) == {"paper", "desk"}


def test_latency_schedule():
    cfg = make_train_config(epochs=8, warmup_epochs=2, lambda_start=1.0, lambda_ramp_epochs=3, lambda_=2.0)
    weights = [(cfg.epoch_loss(e).gamma, cfg.epoch_loss(e).lambda_) for e in range(1, 9)]
    g = cfg.loss.gamma
    assert weights == [(0.0, 0.0), (0.0, 0.0), (g, 1.0), (g, 1.0), (g, 1.0), (g, 1.0), (g, 1.5), (g, 2.0)]
    assert [cfg.in_warmup(e) for e in (1, 2, 3)] == [True, True, False]
    one = make_train_config(epochs=3, warmup_epochs=0, lambda_start=0.5, lambda_ramp_epochs=1, lambda_=2.0)
    assert [one.epoch_loss(e).lambda_ for e in (1, 2, 3)] == [0.5, 0.5, 2.0]


def test_schedule_leaves_full_sequence_runs_alone():
    cfg = make_train_config(gamma=0.0, lambda_=0.0)
    assert all(cfg.epoch_loss(e) == cfg.loss for e in range(1, cfg.epochs + 1))
    assert not any(cfg.in_warmup(e) for e in range(1, cfg.epochs + 1))
    prefix_only = make_train_config(lambda_=0.0)
    assert prefix_only.epoch_loss(prefix_only.epochs).lambda_ == 0.0


@pytest.mark.parametrize("overrides", [
    {"epochs": 20},  # warm-up and ramp no longer fit
    {"lambda_start": -1.0},
    {"lambda_ramp_epochs": 0},  # a start value without a ramp
])
def test_bad_schedules_are_rejected(overrides):
    with pytest.raises(ValueError):
        make_train_config(**overrides)


def test_zero_weights_train_on_full_loss_only(data):
    tr, dv, vocab = data
    seen = []

    def record(step, batch, breakdown):
        seen.append((breakdown.total.item(), breakdown.full.item()))

    cfg = quick(gamma=0.0, lambda_=0.0, epochs=1)
    train(tr[:40], dv, enc(vocab), cfg, vocab=vocab, step_callback=record)
    assert seen and all(total == full for total, full in seen)


def test_warmup_epochs_use_full_loss_and_are_not_selected(data):
    tr, dv, vocab = data
    seen = []

    def record(step, batch, breakdown):
        seen.append((breakdown.total.item(), breakdown.full.item()))

    cfg = quick(epochs=2, warmup_epochs=1, lambda_=1.0)
    _, report = train(tr[:40], dv, enc(vocab), cfg, vocab=vocab, step_callback=record)
    per_epoch = len(seen) // 2
    assert all(total == full for total, full in seen[:per_epoch])
    assert all(total > full for total, full in seen[per_epoch:])
    assert report.best_epoch == 2


@pytest.mark.parametrize("warmup", [-1, 3])
def test_warmup_must_leave_a_trained_epoch(warmup):
    with pytest.raises(ValueError):
        quick(epochs=3, warmup_epochs=warmup)


def test_forward_pass_accounting(data):
    tr, dv, vocab = data
    cfg = quick(epochs=2)
    _, report = train(tr[:30], dv, enc(vocab), cfg, vocab=vocab)
    assert report.forward_passes == 2 * sum(len(u) for u in tr[:30])
    assert len(report.epochs) == 2


def test_training_is_reproducible(data, tmp_path):
    tr, dv, vocab = data
    cfg = quick(epochs=2, shuffle_seed=4, dropout_seed=9)
    blobs = []
    for k in range(2):
        model, _ = train(tr[:40], dv, enc(vocab, dropout_rate=0.1), cfg, vocab=vocab)
        save_checkpoint(model, tmp_path / f"{k}.ckpt")
        blobs.append((tmp_path / f"{k}.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_dev_loss_of_an_uninformative_tagger(data):
    _, dv, vocab = data
    model = StreamingTagger(enc(vocab, seed=1))
    with torch.no_grad():
        model.disfluency_head.weight.zero_()
        model.disfluency_head.bias.zero_()
    loss = evaluate_dev_loss(model, dv, vocab, LossConfig())
    mean_len = np.mean([len(u) for u in dv])
    assert loss.full == pytest.approx(mean_len * math.log(2), rel=1e-12)
    again = evaluate_dev_loss(model, dv, vocab, LossConfig())
    assert again.as_dict() == loss.as_dict()


def test_dev_full_loss_decreases(data):
    tr, dv, vocab = data
    cfg = quick(epochs=4, learning_rate=3e-3, gamma=0.0, lambda_=0.0)
    _, report = train(tr, dv, enc(vocab), cfg, vocab=vocab)
    best = report.epochs[report.best_epoch - 1]
    assert report.best_epoch == 1 or best.dev.full < report.epochs[0].dev.full


def test_large_lambda_prices_out_waiting(data):
    tr, dv, vocab = data
    awt = {}
    for lam in (0.0, 10.0):
        cfg = quick(epochs=3, lambda_=lam, learning_rate=3e-3)
        model, _ = train(tr, dv, enc(vocab), cfg, vocab=vocab)
        awt[lam] = average_waiting_time(decode_corpus(model, dv, vocab, "dynamic"))
    assert awt[10.0] < 0.05
    assert awt[0.0] > awt[10.0]


def test_training_log_columns(data, tmp_path):
    tr, dv, vocab = data
    train(tr[:20], dv, enc(vocab), quick(epochs=2), vocab=vocab, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,full,prefix,latency,total,dev_streaming_f1"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]


def test_divergence_names_the_batch(data, monkeypatch):
    tr, dv, vocab = data
    real = trainer_mod.batch_losses

    def poisoned(*args, **kwargs):
        full, pre, lat, tot = real(*args, **kwargs)
        return full, pre, lat, tot * float("nan")

    monkeypatch.setattr(trainer_mod, "batch_losses", poisoned)
    with pytest.raises(TrainingDiverged, match="step 0.*utt"):
        train(tr[:10], dv, enc(vocab), quick(epochs=1), vocab=vocab)


def test_truncation_is_reported(data):
    _, dv, vocab = data
    long = Utterance("long", tuple(["w1"] * 12), tuple([TokenRole.FLUENT] * 12))
    short = [u for u in dv if len(u) <= 8][:3]
    _, report = train([long] + short, dv, enc(vocab), quick(epochs=1, max_prefix_len=8), vocab=vocab)
    assert report.truncated_utterances == 1


def test_rejects_small_vocab_size(data):
    tr, dv, vocab = data
    with pytest.raises(ValueError):
        train(tr, dv, EncoderConfig(vocab_size=5), quick(epochs=1), vocab=vocab)


def test_config_file_round_trip(tmp_path):
    e = EncoderConfig(vocab_size=30, d_model=16)
    for t in (quick(gamma=0.5, epochs=3), make_train_config(gamma=0.5)):
        write_config_file(tmp_path / "c.cfg", e, t)
        enc_over, train_over, loss_over = read_config_file(tmp_path / "c.cfg")
        assert EncoderConfig(**enc_over) == e
        assert make_train_config("desk", **train_over, **loss_over) == t


@pytest.mark.parametrize("text, line", [("epochs = 2\nbogus = 1\n", 2), ("epochs\n", 1), ("epochs = x\n", 1)])
def test_config_file_errors_name_line(tmp_path, text, line):
    (tmp_path / "c.cfg").write_text(text)
    with pytest.raises(ValueError, match=f":{line}:"):
        read_config_file(tmp_path / "c.cfg")


def test_config_file_comments_and_booleans(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\n\nstart_marker = true  # trailing\nlambda_ = 0.01\n")
    enc_over, _, loss_over = read_config_file(tmp_path / "c.cfg")
    assert enc_over == {"start_marker": True} and loss_over == {"lambda_": 0.01}
