import numpy as np
import pytest
from scipy import stats

from mddm.schedule import (
    NoiseSchedule,
    corrupt,
    corrupt_ids,
    cumulative_matrix,
    sequential_corrupt_ids,
    transition_matrix,
)
from mddm.vocab import JointVocabulary, SequenceLayout, TokenSequence


@pytest.fixture
def schedule():
    return NoiseSchedule(n_steps=16)


def test_retention_boundaries(schedule):
    assert schedule.retention(0.0) == 1.0
    assert schedule.retention(1.0) == 0.0
    assert schedule.retention(0.25) == 0.75
    with pytest.raises(ValueError):
        schedule.retention(-0.1)
    with pytest.raises(ValueError):
        schedule.retention(1.1)


def test_loss_weight(schedule):
    assert schedule.loss_weight(0.5) == 2.0
    assert schedule.loss_weight(1.0) == 1.0
    assert schedule.loss_weight(1e-6) == pytest.approx(1000.0)
    with pytest.raises(ValueError):
        schedule.loss_weight(1.5)


def test_expected_mask_fraction(schedule):
    assert schedule.expected_mask_fraction(0.0) == 0.0
    assert schedule.expected_mask_fraction(1.0) == 1.0
    assert schedule.expected_mask_fraction(0.25) == 0.25


def test_alpha_bar_grid(schedule):
    bar = schedule.alpha_bar
    assert bar[0] == 1.0
    assert bar[-1] == 0.0
    assert (np.diff(bar) <= 0).all()
    for j in range(1, schedule.n_steps + 1):
        if bar[j - 1] > 0:
            assert 0.0 <= schedule.per_step_retention(j) <= 1.0


def test_transition_matrix_identity_and_absorbing():
    vocab = JointVocabulary(k_text=2, k_img=1)
    assert np.array_equal(transition_matrix(1.0, vocab), np.eye(4))
    q0 = transition_matrix(0.0, vocab)
    e_m = np.zeros(4)
    e_m[3] = 1.0
    for row in q0:
        assert np.array_equal(row, e_m)


def test_transition_matrix_explicit():
    vocab = JointVocabulary(k_text=2, k_img=1)  # k_total = 3
    q = transition_matrix(0.8, vocab)
    expected = np.array(
        [
            [0.8, 0.0, 0.0, 0.2],
            [0.0, 0.8, 0.0, 0.2],
            [0.0, 0.0, 0.8, 0.2],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    assert np.abs(q - expected).max() <= 1e-15
    with pytest.raises(ValueError):
        transition_matrix(1.2, vocab)


def test_row_stochastic_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        vocab = JointVocabulary(
            k_text=int(rng.integers(1, 7)), k_img=int(rng.integers(0, 6))
        )
        q = transition_matrix(float(rng.random()), vocab)
        assert (q >= 0).all()
        assert np.abs(q.sum(axis=1) - 1.0).max() <= 1e-12


def test_two_step_product_matches_closed_form():
    vocab = JointVocabulary(k_text=3, k_img=2)
    product = transition_matrix(0.8, vocab) @ transition_matrix(0.75, vocab)
    closed = transition_matrix(0.8 * 0.75, vocab)
    assert np.abs(product - closed).max() <= 1e-12


def test_cumulative_matrix_matches_explicit_product(schedule):
    vocab = JointVocabulary(k_text=3, k_img=2)
    product = np.eye(vocab.k_total + 1)
    for j in range(1, schedule.n_steps + 1):
        product = product @ transition_matrix(schedule.per_step_retention(j), vocab)
        closed = cumulative_matrix(schedule, j, vocab)
        assert np.abs(product - closed).max() <= 1e-12
        assert np.abs(closed.sum(axis=1) - 1.0).max() <= 1e-12


def test_cumulative_matrix_boundaries(schedule):
    vocab = JointVocabulary(k_text=2, k_img=2)
    e_m = np.zeros(5)
    e_m[4] = 1.0
    final = cumulative_matrix(schedule, schedule.n_steps, vocab)
    for row in final:
        assert np.array_equal(row, e_m)
    first = cumulative_matrix(schedule, 1, vocab)
    assert np.array_equal(first, transition_matrix(schedule.per_step_retention(1), vocab))
    with pytest.raises(ValueError):
        cumulative_matrix(schedule, 0, vocab)


@pytest.fixture
def clean_seq():
    layout = SequenceLayout(len_report=2, len_image=2)
    vocab = JointVocabulary(k_text=3, k_img=3)
    return TokenSequence(np.array([0, 1, 3, 5]), layout), vocab


def test_corrupt_boundaries(clean_seq, schedule):
    seq, vocab = clean_seq
    rng = np.random.default_rng(0)
    assert np.array_equal(corrupt(seq, 0.0, schedule, vocab, rng).ids, seq.ids)
    assert (corrupt(seq, 1.0, schedule, vocab, rng).ids == vocab.mask_id).all()
    with pytest.raises(ValueError):
        corrupt(corrupt(seq, 1.0, schedule, vocab, rng), 0.5, schedule, vocab, rng)


def test_corrupt_binomial_statistics(schedule):
    vocab = JointVocabulary(k_text=4, k_img=4)
    n, t = 1000, 0.3
    ids = np.zeros(n, dtype=np.int64)
    sigma = np.sqrt(n * t * (1 - t))
    total = 0
    seeds = 100
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        out = corrupt_ids(ids, t, vocab.mask_id, rng)
        count = int((out == vocab.mask_id).sum())
        assert abs(count - n * t) <= 4 * sigma
        total += count
    sigma_total = np.sqrt(seeds * n * t * (1 - t))
    assert abs(total - seeds * n * t) <= 4 * sigma_total


def test_absorption_along_the_grid(schedule):
    vocab = JointVocabulary(k_text=4, k_img=0)
    rng = np.random.default_rng(1)
    ids = np.zeros(256, dtype=np.int64)
    state = ids
    masked_before = np.zeros(256, dtype=bool)
    for j in range(1, schedule.n_steps + 1):
        state = corrupt_ids(
            state, 1.0 - schedule.per_step_retention(j), vocab.mask_id, rng
        )
        masked_now = state == vocab.mask_id
        assert (masked_now | ~masked_before).all()  # once masked, stays masked
        masked_before = masked_now
    assert masked_before.all()  # alpha_bar[T] == 0 forces full absorption


def test_sequential_vs_single_shot_chi_square():
    schedule = NoiseSchedule(n_steps=32)
    vocab = JointVocabulary(k_text=4, k_img=0)
    n = 10_000
    ids = np.zeros(n, dtype=np.int64)
    for j in (8, 16, 24):
        rng = np.random.default_rng(100 + j)
        seq = sequential_corrupt_ids(ids, schedule, j, vocab.mask_id, rng)
        single = corrupt_ids(
            ids, 1.0 - float(schedule.alpha_bar[j]), vocab.mask_id, rng
        )
        table = np.array(
            [
                [(seq == vocab.mask_id).sum(), (seq != vocab.mask_id).sum()],
                [(single == vocab.mask_id).sum(), (single != vocab.mask_id).sum()],
            ]
        )
        _, p, _, _ = stats.chi2_contingency(table)
        assert p > 0.001


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(kind="cosine")
    with pytest.raises(ValueError):
        NoiseSchedule(t_min=0.0)
    with pytest.raises(ValueError):
        NoiseSchedule(n_steps=0)
