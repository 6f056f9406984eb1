import csv

import numpy as np
import pytest

from compseg import losses
from compseg.data import GenConfig, generate, make_splits, write_corpus
from compseg.network import SegNetConfig, build
from compseg.tensor import Tensor, select_channel
from compseg.trainer import (Corpus, TrainConfig, TrainingError, compose_batches, epoch_batches, evaluate,
                             load_checkpoint, log_columns, resume_optimizer, save_checkpoint, score_masks,
                             train, write_metrics_csv)
from compseg.metrics import read_metrics_csv

SIZE = 32


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    samples = generate(GenConfig(size=SIZE, hole_prob=0.0, fuzz=2.0), 16)
    write_corpus(samples, d)
    make_splits([s.id for s in samples], 4, 1.0, 0).write(d / "splits.csv")
    return d


@pytest.fixture(scope="module")
def corpus(corpus_dir):
    return Corpus(corpus_dir)


def splits_for(corpus, fraction=1.0):
    return make_splits(sorted(corpus.samples), 4, fraction, 0)


def tiny_net(seed=0):
    return build(SegNetConfig(input_size=SIZE, base_channels=4), seed)


def cfg(**kw):
    base = dict(epochs=2, batch_size=4, seed=0, base_channels=4, eval_every=1)
    base.update(kw)
    return TrainConfig(**base)


def read_log(path):
    with open(path) as fh:
        return fh.read()


# -- batching --------------------------------------------------------------------------

def test_compose_two_plus_two_with_padding():
    lab = [f"l{i}" for i in range(3)]
    unl = [f"u{i}" for i in range(7)]
    batches = compose_batches(lab, unl, 4, 2)
    assert [sum(f for _, f in b) for b in batches] == [2, 1, 0]
    assert [len(b) for b in batches] == [4, 4, 2]
    flat = [i for b in batches for i, _ in b]
    assert sorted(flat) == sorted(lab + unl)
    assert [len(b) for b in compose_batches(lab, [], 2, 1)] == [2, 1]


def test_full_labels_give_fully_labeled_batches(corpus):
    sp = splits_for(corpus)
    batches = epoch_batches(corpus, sp.labeled_ids(0), sp.unlabeled_ids(0), cfg(), 0)
    assert all(b.labeled.all() for b in batches)
    assert sum(len(b.ids) for b in batches) == 12


def test_unlabeled_rows_carry_no_mask(corpus):
    sp = splits_for(corpus, 0.25)
    batches = epoch_batches(corpus, sp.labeled_ids(0), sp.unlabeled_ids(0), cfg(), 0)
    for b in batches:
        assert np.all(b.masks[~b.labeled] == 0)
    assert batches[0].labeled.sum() == 2 and len(batches[0].ids) == 4
    assert corpus.unlabeled(sp.unlabeled_ids(0)[0]).mask is None


def test_epoch_order_depends_on_seed_and_epoch(corpus):
    sp = splits_for(corpus)
    ids = lambda c, e: [b.ids for b in epoch_batches(corpus, sp.labeled_ids(0), [], c, e)]
    assert ids(cfg(), 0) == ids(cfg(), 0)
    assert ids(cfg(), 0) != ids(cfg(), 1)
    assert ids(cfg(), 0) != ids(cfg(seed=5), 0)


# -- training runs -----------------------------------------------------------------------

def test_fg_only_leaves_bg_untouched_and_drops_columns(corpus, tmp_path):
    cnet = tiny_net()
    before = {k: p.data.tobytes() for k, p in cnet.bg.named_parameters().items()}
    train(cnet, corpus, splits_for(corpus), cfg(mode="fg_only", epochs=1), log_path=tmp_path / "log.csv")
    assert {k: p.data.tobytes() for k, p in cnet.bg.named_parameters().items()} == before
    header = read_log(tmp_path / "log.csv").splitlines()[0].split(",")
    assert "L_back" not in header and "L_mutual" not in header
    assert header == log_columns("fg_only")


def test_complementary_log_columns(corpus, tmp_path):
    train(tiny_net(), corpus, splits_for(corpus), cfg(epochs=1), log_path=tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert list(rows[0]) == ["epoch", "lr", "L_fore", "L_back", "L_mutual", "L_total", "val_DI_fg", "val_DI_fused"]
    r = rows[0]
    assert float(r["L_total"]) == pytest.approx(float(r["L_fore"]) + float(r["L_back"]) + float(r["L_mutual"]),
                                                rel=1e-6)


def test_identical_flags_identical_logs(corpus, tmp_path):
    for name in ("a", "b"):
        train(tiny_net(3), corpus, splits_for(corpus, 0.5), cfg(seed=3), log_path=tmp_path / f"{name}.csv")
    assert read_log(tmp_path / "a.csv") == read_log(tmp_path / "b.csv")


def test_resume_reproduces_next_epoch_exactly(corpus, tmp_path):
    sp = splits_for(corpus, 0.5)
    straight = tiny_net(1)
    train(straight, corpus, sp, cfg(epochs=2, seed=1), log_path=tmp_path / "straight.csv")

    first = tiny_net(1)
    res = train(first, corpus, sp, cfg(epochs=1, seed=1, checkpoint_dir=str(tmp_path / "ck")),
                log_path=tmp_path / "resumed.csv")
    cnet, tensors, meta = load_checkpoint(tmp_path / "ck" / "last.cseg")
    assert meta["epoch"] == 1
    opt = resume_optimizer(cnet, tensors, "complementary", 1e-3)
    train(cnet, corpus, sp, cfg(epochs=2, seed=1), opt=opt, start_epoch=meta["epoch"],
          log_path=tmp_path / "resumed.csv")
    assert read_log(tmp_path / "straight.csv") == read_log(tmp_path / "resumed.csv")
    for k, p in straight.named_parameters().items():
        assert p.data.tobytes() == cnet.named_parameters()[k].data.tobytes()


def test_mutual_loss_alone_reaches_bg_network():
    cnet = tiny_net()
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, SIZE, SIZE)).astype(np.float32))
    p_f = select_channel(cnet.fg(x)[0], 1)
    p_b = select_channel(cnet.bg(x)[0], 1)
    losses.total_loss(losses.LossInputs(p_f, p_b, None, np.zeros(2, bool))).total.backward()
    assert sum(float(np.sum(p.grad ** 2)) for p in cnet.bg.parameters()) > 0


def test_training_loss_decreases(corpus):
    res = train(tiny_net(2), corpus, splits_for(corpus), cfg(epochs=8, seed=2, eval_every=8, base_lr=3e-3))
    assert res.log[-1]["L_total"] < res.log[0]["L_total"]


def test_empty_labeled_pool_and_bad_config(corpus):
    sp = splits_for(corpus)
    empty = type(sp)([r if r.role == "val" else type(r)(r.id, r.fold, r.role, False) for r in sp.rows])
    with pytest.raises(TrainingError):
        train(tiny_net(), corpus, empty, cfg())
    with pytest.raises(ValueError):
        cfg(batch_size=0).validate()
    with pytest.raises(ValueError):
        cfg(mode="both").validate()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_writes_diagnostic(corpus, tmp_path):
    cnet = tiny_net()
    cnet.fg.named_parameters()["head.weight"].data[...] = 3e38
    with pytest.raises(TrainingError):
        train(cnet, corpus, splits_for(corpus), cfg(checkpoint_dir=str(tmp_path)))
    assert (tmp_path / "diverged.json").exists()


# -- checkpoints and evaluation ------------------------------------------------------------

def test_checkpoint_round_trip_forward_bitwise(tmp_path):
    cnet = tiny_net(4)
    save_checkpoint(tmp_path / "c.cseg", cnet, epoch=0)
    back, _, meta = load_checkpoint(tmp_path / "c.cseg")
    assert meta["input_size"] == SIZE and meta["base_channels"] == 4
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, SIZE, SIZE)).astype(np.float32))
    for a, b in ((cnet.fg, back.fg), (cnet.bg, back.bg)):
        assert a(x)[0].data.tobytes() == b(x)[0].data.tobytes()


def test_perfect_masks_score_one(corpus, tmp_path):
    samples = [corpus.labeled(i) for i in sorted(corpus.samples)[:4]]
    truth = np.stack([s.mask[0] for s in samples])
    rows = score_masks(samples, {"fused": truth, "fg_only": truth})
    summary = write_metrics_csv(tmp_path / "m.csv", rows)
    for k in ("AC", "DI", "JA", "SE", "AC_fg_only", "DI_fg_only", "JA_fg_only", "SE_fg_only"):
        assert summary[k] == 1.0


def test_evaluation_is_deterministic_and_reports_both_fusions(corpus, tmp_path):
    cnet = tiny_net(5)
    sp = splits_for(corpus)
    a = evaluate(cnet, corpus, sp, 0, tmp_path / "a.csv")
    b = evaluate(cnet, corpus, sp, 0, tmp_path / "b.csv")
    assert a == b and read_log(tmp_path / "a.csv") == read_log(tmp_path / "b.csv")
    per_image, summary = read_metrics_csv(tmp_path / "a.csv")
    assert len(per_image) == 4 and len(summary) == 1
    assert {"DI", "DI_fg_only"} <= set(per_image[0])
    assert float(summary[0]["DI"]) == pytest.approx(np.mean([float(r["DI"]) for r in per_image]), abs=1e-9)
