import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcgnet.errors import PredictError, SplitError, StitchError, TrainError
from pcgnet.features import MfccHeatMap
from pcgnet.pcg_io import Label, PcgRecording
from pcgnet.synthetic import generate_recording
from pcgnet.tensor_nn import Architecture, Mode, checkpoint_bytes, init_params, network_forward
from pcgnet.trainer import (
    AdamState, Hyperparams, adam_step, batch_schedule, center_output_bias, hard_se_sp, predict_recording,
    split_dataset, stitch_prediction, train,
)

SMALL = Architecture(input_shape=(1, 6, 20), conv1=(4, 2, 3), pool1=(1, 2, 1, 2), conv2=(4, 2, 3),
                     pool2=(1, 2, 1, 2), hidden=(16, 8), classes=2)


def _blobs(n, seed, abnormal_fraction=0.2):
    """Maps drawn from two Gaussian blobs in coefficient space."""
    rng = np.random.default_rng(seed)
    maps = []
    for i in range(n):
        ab = rng.random() < abnormal_fraction
        centre = np.linspace(-1, 1, 6)[:, None] * (2.0 if ab else -2.0)
        values = centre + rng.normal(scale=0.5, size=(6, 20))
        maps.append(MfccHeatMap(values, f"m{i}", 0, Label.ABNORMAL if ab else Label.NORMAL))
    return maps


# Adam

def test_adam_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState.zeros_like(p)
    g1, g2 = np.array([0.5, -0.1]), np.array([-0.2, 0.3])
    lr = 0.1
    adam_step(p, {"w": g1.copy()}, state, lr)
    # first step: bias-corrected moments are g and g**2
    expected = np.array([1.0, -2.0]) - lr * g1 / (np.abs(g1) + 1e-8)
    assert np.allclose(p["w"], expected, atol=1e-15)
    adam_step(p, {"w": g2.copy()}, state, lr)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected = expected - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(p["w"], expected, atol=1e-14)
    assert state.t == 2


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-6, 1.0))
def test_adam_zero_gradient_is_noop(values, lr):
    p = {"w": np.asarray(values)}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros_like(before)}, AdamState.zeros_like(p), lr)
    assert np.array_equal(p["w"], before)


# splitting

def _recs(subjects):
    return [PcgRecording(f"r{i}", np.zeros(4), 2000, subject_id=s) for i, s in enumerate(subjects)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=80), st.integers(0, 1000))
def test_splits_are_subject_disjoint(subject_ids, seed):
    recs = _recs([f"s{s}" for s in subject_ids])
    if len(set(subject_ids)) < 3:
        with pytest.raises(SplitError):
            split_dataset(recs, seed=seed)
        return
    plan = split_dataset(recs, seed=seed)
    owner = {r.id: r.subject_id for r in recs}
    parts = [{owner[i] for i in ids} for ids in (plan.train, plan.validation, plan.holdout)]
    assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
    assert sorted(plan.train + plan.validation + plan.holdout) == sorted(r.id for r in recs)
    assert all(parts)
    assert split_dataset(recs, seed=seed) == plan


def test_split_fraction_validation():
    with pytest.raises(ValueError):
        split_dataset(_recs(["a", "b"]), (0.5, 0.6))


# batching

def test_batch_composition_follows_dataset_ratio():
    labels = np.array([0] * 800 + [1] * 200)
    rng = np.random.default_rng(0)
    batches = batch_schedule(len(labels), 256, rng)
    assert [len(b) for b in batches] == [256, 256, 256, 232]
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(1000))
    frac = np.mean(labels[np.concatenate(batches)] == 1)
    assert abs(frac - 0.2) <= 0.02
    # individual batches are plain shuffles, not stratified
    per_batch = [np.mean(labels[b]) for b in batches]
    assert max(per_batch) != min(per_batch)


# stitching and metrics

def test_stitch_examples():
    r = stitch_prediction([(0.8, 0.2), (0.6, 0.4)])
    assert np.allclose(r.probabilities, [0.7, 0.3]) and r.label is Label.NORMAL
    assert stitch_prediction([(0.3, 0.7)]).label is Label.ABNORMAL
    assert stitch_prediction([(0.5, 0.5)]).label is Label.NORMAL
    with pytest.raises(StitchError):
        stitch_prediction([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.randoms())
def test_stitch_is_order_invariant(ps, rnd):
    pairs = [(1 - p, p) for p in ps]
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert stitch_prediction(pairs).label is stitch_prediction(shuffled).label


def test_hard_se_sp():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.4, 0.6], [0.7, 0.3]])
    assert hard_se_sp(probs, np.array([0, 1, 0, 1])) == (0.5, 0.5)
    assert hard_se_sp(probs[:1], np.array([0])) == (1.0, 1.0)


# training

def test_hyperparam_validation():
    with pytest.raises(ValueError):
        Hyperparams(learning_rate=0)
    with pytest.raises(ValueError):
        Hyperparams(keep_prob=0)
    with pytest.raises(ValueError):
        Hyperparams(warmup_steps=-1)


def test_centering_zeroes_median_gap():
    params = init_params(SMALL, seed=3)
    x = np.random.default_rng(0).normal(size=(41, 1, 6, 20)).astype(np.float32)
    center_output_bias(params, x)
    logits = network_forward(x, params, Mode.EVAL)[1].logits
    assert abs(np.median(logits[:, 1] - logits[:, 0])) < 1e-5


def test_separable_maps_reach_high_accuracy():
    tr, va = _blobs(400, 0), _blobs(100, 1)
    res = train(tr, va, Hyperparams(learning_rate=1e-3, batch_size=64, max_epochs=20, patience=20), arch=SMALL)
    best = max(row.val_score for row in res.log)
    assert best >= 0.99
    assert res.log[res.best_epoch].val_score == best


def test_same_seed_is_reproducible(tmp_path):
    tr, va = _blobs(120, 2), _blobs(40, 3)
    hyper = Hyperparams(batch_size=32, max_epochs=2, seed=7)
    a = train(tr, va, hyper, arch=SMALL, log_path=tmp_path / "a.csv")
    b = train(tr, va, hyper, arch=SMALL, log_path=tmp_path / "b.csv")
    assert a.log[0].train_loss == b.log[0].train_loss
    assert checkpoint_bytes(a.params) == checkpoint_bytes(b.params)
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,train_loss,val_se,val_sp,val_score"
    other = train(tr, va, Hyperparams(batch_size=32, max_epochs=1, seed=8), arch=SMALL)
    assert other.log[0].train_loss != a.log[0].train_loss


def test_unlabelled_or_empty_sets_rejected():
    tr = _blobs(10, 0)
    with pytest.raises(TrainError):
        train(tr, [], Hyperparams(max_epochs=1), arch=SMALL)
    bad = [MfccHeatMap(np.zeros((6, 20)))]
    with pytest.raises(TrainError):
        train(bad, tr, Hyperparams(max_epochs=1), arch=SMALL)


# prediction

def _pipeline_params():
    from pcgnet.trainer import Pipeline, featurize_recordings

    rng = np.random.default_rng(0)
    recs = [generate_recording(rng, abnormal=i % 2 == 1, duration=6.0, record_id=f"p{i}").recording
            for i in range(4)]
    maps = featurize_recordings(recs, Pipeline())
    res = train(maps, maps, Hyperparams(max_epochs=1, batch_size=64))
    return recs, res.params


def test_prediction_determinism_and_short_input():
    recs, params = _pipeline_params()
    a = predict_recording(recs[0], params)
    b = predict_recording(recs[0], params)
    assert np.array_equal(a.probabilities, b.probabilities) and a.label is b.label
    assert np.allclose(a.probabilities, a.segment_probabilities.mean(axis=0))
    with pytest.raises(PredictError):
        predict_recording(PcgRecording("tiny", np.zeros(500), 2000), params)
    params.norm_stats = None
    with pytest.raises(PredictError):
        predict_recording(recs[0], params)


def test_learning_rate_warmup_is_linear():
    from pcgnet.trainer import _lr_at

    hyper = Hyperparams(learning_rate=0.2, warmup_steps=4)
    assert [_lr_at(s, hyper) for s in range(6)] == pytest.approx([0.05, 0.1, 0.15, 0.2, 0.2, 0.2])
    assert _lr_at(0, Hyperparams(learning_rate=0.2, warmup_steps=0)) == 0.2
