import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saq.data import (
    DatasetFormatError,
    DiscreteTransitionDataset,
    TransitionDataset,
    load_dataset,
    save_dataset,
)


def random_dataset(rng, n, state_dim=2, action_dim=2, metadata=None):
    return TransitionDataset(
        states=rng.normal(size=(n, state_dim)),
        actions=rng.normal(size=(n, action_dim)),
        rewards=rng.normal(size=n),
        next_states=rng.normal(size=(n, state_dim)),
        terminals=rng.random(n) < 0.3,
        metadata=metadata or {"env": "test"},
    )


def test_round_trip(tmp_path):
    ds = random_dataset(np.random.default_rng(0), 17)
    p = tmp_path / "d.saqd"
    save_dataset(ds, p)
    loaded = load_dataset(p)
    assert loaded.equal(ds)


def test_round_trip_discrete(tmp_path):
    rng = np.random.default_rng(1)
    ds = DiscreteTransitionDataset(
        states=rng.normal(size=(9, 3)),
        codes=rng.integers(0, 8, size=9),
        original_actions=rng.normal(size=(9, 2)),
        rewards=rng.normal(size=9),
        next_states=rng.normal(size=(9, 3)),
        terminals=rng.random(9) < 0.5,
        num_codes=8,
        metadata={"env": "x"},
    )
    p = tmp_path / "d.saqd"
    save_dataset(ds, p)
    loaded = load_dataset(p)
    assert isinstance(loaded, DiscreteTransitionDataset)
    assert loaded.num_codes == 8
    np.testing.assert_array_equal(loaded.codes, ds.codes)
    np.testing.assert_array_equal(loaded.original_actions, ds.original_actions)


def test_truncated_file_errors(tmp_path):
    ds = random_dataset(np.random.default_rng(2), 5)
    p = tmp_path / "d.saqd"
    save_dataset(ds, p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-9])
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_corrupt_byte_fails_crc(tmp_path):
    ds = random_dataset(np.random.default_rng(3), 5)
    p = tmp_path / "d.saqd"
    save_dataset(ds, p)
    blob = bytearray(p.read_bytes())
    blob[40] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(DatasetFormatError, match="offset"):
        load_dataset(p)


def test_empty_dataset_round_trip(tmp_path):
    ds = TransitionDataset(
        states=np.zeros((0, 2)), actions=np.zeros((0, 2)), rewards=np.zeros(0),
        next_states=np.zeros((0, 2)), terminals=np.zeros(0, dtype=bool),
        metadata={"env": "empty", "state_dim": 2, "action_dim": 2},
    )
    p = tmp_path / "d.saqd"
    save_dataset(ds, p)
    loaded = load_dataset(p)
    assert len(loaded) == 0
    assert loaded.metadata["env"] == "empty"


def test_code_range_enforced():
    with pytest.raises(ValueError, match="code index"):
        DiscreteTransitionDataset(
            states=np.zeros((1, 2)), codes=np.array([5]), original_actions=np.zeros((1, 2)),
            rewards=np.zeros(1), next_states=np.zeros((1, 2)), terminals=np.zeros(1, dtype=bool),
            num_codes=4,
        )


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 40),
    state_dim=st.integers(1, 5),
    action_dim=st.integers(1, 4),
    seed=st.integers(0, 2**31),
)
def test_serialization_bijection(tmp_path_factory, n, state_dim, action_dim, seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n, state_dim, action_dim, metadata={"env": "prop", "seed": seed})
    p = tmp_path_factory.mktemp("ser") / "d.saqd"
    save_dataset(ds, p)
    assert load_dataset(p).equal(ds)
