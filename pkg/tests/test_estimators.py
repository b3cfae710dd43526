import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from regate.data import IGNORE, Role, SyntheticTaskConfig, TokenSequence, generate_dataset
from regate.estimators import ReferenceTeacher, RegateTrainer
from regate.validation import check_mask, check_sequences

TASK = SyntheticTaskConfig(n_pretrain=64, n_finetune=32, n_heldout=16)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(TASK)


@pytest.fixture(scope="module")
def teacher(data):
    return ReferenceTeacher(task=TASK, max_steps=6, batch_size=8, eval_every=3).fit(data.pretrain,
                                                                                     eval_set=data.heldout)


def test_params_round_trip_and_clone():
    t = ReferenceTeacher(task=TASK, d_model=16)
    assert t.get_params()["d_model"] == 16
    t.set_params(max_steps=7)
    c = clone(t)
    assert c.get_params()["max_steps"] == 7 and not hasattr(c, "params_")
    r = RegateTrainer(lam=0.0, n_steps=5)
    assert clone(r).get_params()["lam"] == 0.0


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        ReferenceTeacher().transform(data.heldout)
    with pytest.raises(NotFittedError):
        RegateTrainer().predict(data.heldout)


def test_teacher_transform(teacher, data):
    assert teacher.report_.steps == 6
    ref = teacher.transform(data.heldout)
    assert ref.shape == (16, TASK.seq_len)
    lab = np.stack([s.roles == Role.LABEL for s in data.heldout])
    assert np.isfinite(ref[lab]).all() and np.isnan(ref[~lab]).all()


def test_trainer_fit_predict_score(teacher, data):
    est = RegateTrainer(teacher=teacher, n_steps=6, batch_size=4, eval_every=3, cycle=4, dense_prefix=1, warmup=2)
    assert est.fit(data.finetune, eval_set=data.heldout) is est
    assert est.n_steps_ == 6 and len(est.metrics_) == 6
    assert est.summary_["teacher_sha256"] == teacher.params_.sha256()
    pred = est.predict(data.heldout)
    lab = np.stack([s.roles == Role.LABEL for s in data.heldout])
    assert pred.shape == lab.shape
    assert (pred[~lab] == -1).all() and (pred[lab] >= 0).all()
    assert est.score(data.heldout) < 0


def test_baseline_mode_needs_no_cache(teacher, data):
    est = RegateTrainer(teacher=teacher.params_, mode="baseline", n_steps=3, batch_size=4, eval_every=3)
    est.fit(data.finetune)
    assert est.ref_cache_.reads == 0 and len(est.ref_cache_) == 0


def test_bad_teacher_type(data):
    with pytest.raises(TypeError):
        RegateTrainer(teacher="nope").fit(data.finetune)


def test_check_sequences_errors(teacher):
    cfg = teacher.params_.config
    good = TokenSequence(0, [1, 5], [Role.PROMPT, Role.LABEL], [IGNORE, 4])
    with pytest.raises(ValueError, match="empty"):
        check_sequences([])
    with pytest.raises(TypeError):
        check_sequences(good)
    with pytest.raises(TypeError):
        check_sequences([np.zeros(3)])
    with pytest.raises(ValueError, match="unique"):
        check_sequences([good, good])
    with pytest.raises(ValueError, match="no sample has a label"):
        check_sequences([TokenSequence(0, [1, 5], [0, 0], [IGNORE, IGNORE])])
    with pytest.raises(ValueError, match="visual"):
        check_sequences([TokenSequence(0, [1, 30], [0, 2], [IGNORE, 4])], cfg)
    with pytest.raises(ValueError, match="pad"):
        check_sequences([TokenSequence(0, [1, 0], [0, 2], [IGNORE, 4])], cfg)
    with pytest.raises(ValueError, match="label target"):
        check_sequences([TokenSequence(0, [1, 5], [0, 2], [IGNORE, 99])], cfg)
    with pytest.raises(ValueError, match="max_seq_len"):
        check_sequences([TokenSequence(0, [1] * 20, [0] * 19 + [2], [IGNORE] * 19 + [3])], cfg)
    assert check_sequences([good], cfg) == [good]


def test_check_mask():
    assert check_mask([[1, 0]], (1, 2)).dtype == bool
    with pytest.raises(ValueError):
        check_mask([[1, 0]], (2, 1))
    with pytest.raises(ValueError):
        check_mask([[2, 0]], (1, 2))
