import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ampattn import tensor as tn
from ampattn.model import ModelConfig, init_params
from ampattn.training import (ABLATION_COLUMNS, AblationRow, AdamState, TrainConfig, aggregate_reports,
                              aggregate_utterance, alignment_analysis, alignment_from_maps, cross_entropy,
                              cv_splits, evaluate, report_from_predictions, run_cv, train_fold, wa_ua,
                              write_ablation_csv, adam_step)

TINY = dict(seg_len=50, conv_channels=2, lstm_hidden=4, heads=2, fc_hidden=6)


# --- loss and optimiser --------------------------------------------------------


def test_cross_entropy_uniform_and_confident():
    assert float(cross_entropy(tn.Tensor(np.zeros(4)), 2).data) == pytest.approx(math.log(4), abs=1e-12)
    assert float(cross_entropy(tn.Tensor(np.array([100.0, 0, 0])), 0).data) < 1e-40
    batch = np.array([[1.0, 2.0], [0.5, -1.0]])
    ref = -np.mean([batch[0, 1] - np.logaddexp(*batch[0]), batch[1, 0] - np.logaddexp(*batch[1])])
    assert float(cross_entropy(tn.Tensor(batch), [1, 0]).data) == pytest.approx(ref, abs=1e-14)
    with pytest.raises(ValueError):
        cross_entropy(tn.Tensor(np.zeros(3)), 3)


def test_cross_entropy_gradient(rng):
    z = tn.parameter(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)
    assert tn.grad_check_params(lambda: cross_entropy(z, labels), [z]) <= 1e-6


def test_adam_first_step_is_signed_lr():
    p = tn.parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 1e3])
    cfg = TrainConfig(lr=1e-3)
    adam_step({"p": p}, AdamState(), cfg)
    assert np.allclose(p.data - np.array([1.0, -2.0, 3.0]), -1e-3 * np.sign([0.5, -4.0, 1e3]), rtol=1e-6)


def test_adam_zero_lr_and_determinism(rng):
    g = rng.normal(size=(3, 2))
    runs = []
    for lr in (0.0, 1e-2, 1e-2):
        p = tn.parameter(np.ones((3, 2)))
        st_ = AdamState()
        for _ in range(5):
            p.grad = g.copy()
            adam_step({"p": p}, st_, TrainConfig(lr=lr))
        runs.append(p.data.copy())
    assert np.array_equal(runs[0], np.ones((3, 2)))
    assert np.array_equal(runs[1], runs[2])


# --- metrics -----------------------------------------------------------------------


def test_wa_ua_worked_example():
    truth = [0] * 10 + [1] * 5
    pred = [0] * 9 + [1] + [1] + [0] * 4
    rep = report_from_predictions(truth, pred, 2)
    assert rep.WA == 10 / 15 and rep.UA == pytest.approx(0.55, abs=1e-15)
    assert rep.confusion.tolist() == [[9, 1], [4, 1]]


def test_perfect_and_constant_predictors():
    truth = np.repeat(np.arange(4), 5)
    assert wa_ua(report_from_predictions(truth, truth, 4).confusion) == (1.0, 1.0)
    const = report_from_predictions(truth, np.zeros(20, int), 4)
    assert const.WA == const.UA == 0.25


def test_zero_support_class_excluded(caplog):
    rep = report_from_predictions([0, 0, 1], [0, 1, 1], 3)
    assert rep.UA == pytest.approx(0.75)
    assert "no test support" in caplog.text


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_metrics_match_recount(pairs):
    truth, pred = map(list, zip(*pairs))
    rep = report_from_predictions(truth, pred, 4)
    assert rep.WA == sum(t == p for t, p in pairs) / len(pairs)
    recalls = [sum(1 for t, p in pairs if t == c and p == c) / sum(1 for t, _ in pairs if t == c)
               for c in range(4) if any(t == c for t, _ in pairs)]
    assert rep.UA == pytest.approx(float(np.mean(recalls)), abs=1e-15)
    balanced = all(truth.count(c) == truth.count(truth[0]) for c in set(truth))
    if balanced:
        assert rep.UA == pytest.approx(rep.WA, abs=1e-12)


def test_aggregate_reports_mean_std():
    a = report_from_predictions([0, 1], [0, 1], 2)
    b = report_from_predictions([0, 1], [0, 0], 2)
    agg = aggregate_reports([a, b])
    assert agg.WA == 0.75 and agg.WA_std == 0.25 and agg.confusion.sum() == 4


def test_utterance_aggregation():
    assert aggregate_utterance([[0.1, 2.0, 0.3]]) == 1
    lg = np.log(np.array([[0.6, 0.4], [0.2, 0.8]]))
    assert aggregate_utterance(lg) == 1
    assert aggregate_utterance(np.zeros((3, 4))) == 0


# --- cross-validation --------------------------------------------------------------


@pytest.mark.parametrize("k,sizes", [(10, 8), (5, 3)])
def test_cv_split_sizes(k, sizes):
    splits = cv_splits(k)
    assert len(splits) == k and all(len(tr) == sizes for tr, _, _ in splits)
    assert sorted(te for _, _, te in splits) == list(range(k))
    for tr, va, te in splits:
        assert va == (te + 1) % k and te not in tr and va not in tr
    with pytest.raises(ValueError):
        cv_splits(2)


def _mcfg(fs, **kw):
    return ModelConfig(n_mfcc=fs.X.shape[-1], n_classes=fs.n_classes, **{**TINY, **kw})


def test_train_fold_shapes_and_determinism(small_corpus):
    _, _, _, fs = small_corpus
    tr, va = fs.subset(fs.fold_indices([0])), fs.subset(fs.fold_indices([1]))
    tcfg = TrainConfig(lr=3e-3, batch_size=4, epochs=3, seed=1)
    a = train_fold(tr, va, tcfg, _mcfg(fs))
    b = train_fold(tr, va, tcfg, _mcfg(fs))
    assert len(a.history) == 3 and [r["epoch"] for r in a.history] == [1, 2, 3]
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]
    for k in a.checkpoint.params:
        assert np.array_equal(a.checkpoint.params[k].data, b.checkpoint.params[k].data)
    with pytest.raises(ValueError):
        train_fold(tr, tr, tcfg, _mcfg(fs))


def test_zero_lr_keeps_params(small_corpus):
    _, _, _, fs = small_corpus
    tr, va = fs.subset(fs.fold_indices([0])), fs.subset(fs.fold_indices([1]))
    cfg = _mcfg(fs)
    res = train_fold(tr, va, TrainConfig(lr=0.0, batch_size=64, epochs=2), cfg)
    init = init_params(cfg, 0)
    assert all(np.array_equal(init.params[k].data, res.checkpoint.params[k].data) for k in init.params)
    losses = [r["train_loss"] for r in res.history]
    assert losses[0] == pytest.approx(losses[1], rel=1e-3)


def test_initial_loss_near_log_n(small_corpus):
    _, _, _, fs = small_corpus
    cfg = _mcfg(fs)
    res = train_fold(fs.subset(fs.fold_indices([0])), fs.subset(fs.fold_indices([1])),
                     TrainConfig(lr=0.0, batch_size=64, epochs=1), cfg)
    assert abs(res.history[0]["train_loss"] - math.log(fs.n_classes)) <= 0.5


def test_run_cv_covers_every_utterance_once(small_corpus, tmp_path):
    _, _, _, fs = small_corpus
    res = run_cv(fs, 3, _mcfg(fs), TrainConfig(lr=3e-3, batch_size=8, epochs=1), out_dir=tmp_path,
                 tolerance=5)
    assert sorted(res.report.truth) == sorted(fs.utt_labels.tolist())
    assert res.report.n_utterances == len(fs.utt_ids)
    assert len(res.folds) == 3 and res.alignment is not None
    rows = list(csv.DictReader(open(tmp_path / "fold0" / "history.csv")))
    assert list(rows[0]) == ["epoch", "train_loss", "val_WA", "val_UA"]
    assert (tmp_path / "fold2" / "checkpoint" / "manifest.json").is_file()
    # stored predictions reproduce the metrics exactly
    for f in res.folds:
        again = report_from_predictions(f.test.truth, f.test.pred, fs.n_classes)
        assert (again.WA, again.UA) == (f.test.WA, f.test.UA)


def test_run_cv_rejects_missing_folds(small_corpus):
    _, _, _, fs = small_corpus
    bad = fs.subset(np.arange(len(fs.utt_ids)))
    bad.utt_folds = bad.utt_folds.copy()
    bad.utt_folds[0] = -1
    with pytest.raises(ValueError):
        run_cv(bad, 3, _mcfg(fs), TrainConfig(epochs=1))


def test_evaluate_rejects_empty(small_corpus):
    _, _, _, fs = small_corpus
    with pytest.raises(ValueError):
        evaluate(init_params(_mcfg(fs), 0), fs.subset([]))


# --- alignment ----------------------------------------------------------------------


def test_alignment_all_hits():
    m = 50
    peaks = np.array([7, 30])
    maps = np.zeros((2, 2, m, m))
    for i, p in enumerate(peaks):
        maps[i, :, :, p] = 1.0
    rep = alignment_from_maps(maps, peaks, 5)
    assert rep.hit_rate == 1.0 and rep.self_query_offpeak_rate == 0.0


def test_alignment_uniform_random_near_window_ratio():
    r = np.random.default_rng(0)
    m, n = 50, 400
    peaks = r.integers(5, 45, size=n)
    rep = alignment_from_maps(r.random((n, 1, m, m)), peaks, 5)
    assert rep.chance_rate == pytest.approx(11 / 50)
    assert abs(rep.hit_rate - 0.22) < 0.01


def test_alignment_untrained_model_near_chance(small_corpus):
    _, _, _, fs = small_corpus
    hits = []
    for seed in range(3):
        rep = alignment_analysis(init_params(_mcfg(fs, variant="bmhsa"), seed), fs, 5)
        hits.extend(np.mean(s["hit_rate"]) for s in rep.segments)
    # permutation-style band: random-init argmax positions carry no peak information
    hits = np.array(hits)
    assert len(hits) >= 20
    assert abs(hits.mean() - rep.chance_rate) < 3 * hits.std() / math.sqrt(len(hits)) + 0.1


# --- ablation output -----------------------------------------------------------------


def test_ablation_csv_columns(tmp_path):
    rows = [AblationRow(v, [0.5, 0.7], [0.4, 0.6], [0.2, 0.3]) for v in ("bmhsa", "fa", "faca")]
    write_ablation_csv(tmp_path / "a.csv", rows)
    got = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert list(got[0]) == ABLATION_COLUMNS and len(got) == 3
    assert float(got[0]["UA_mean"]) == pytest.approx(0.5) and float(got[0]["WA_std"]) == pytest.approx(0.1)
