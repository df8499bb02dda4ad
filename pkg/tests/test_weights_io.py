"""Weight container (KVCW) round trips and corruption handling."""

import numpy as np
import pytest

from kvcbench.errors import FormatError, MissingArtifactError
from kvcbench.modelcore import ModelConfig, init_random_model, tensor_names
from kvcbench.weights import load_weights, save_weights

CONFIG = ModelConfig(n_layers=2, n_heads=2, hidden_size=16, head_dim=8,
                     vocab_size=32, max_position=64)


@pytest.fixture
def saved(tmp_path):
    model = init_random_model(CONFIG, seed=3)
    path = tmp_path / "model.kvcw"
    save_weights(model, path)
    return model, path


def test_round_trip_is_bit_identical(saved):
    model, path = saved
    loaded = load_weights(path, CONFIG)
    assert loaded.fingerprint == model.fingerprint
    for name in tensor_names(CONFIG):
        assert np.array_equal(loaded.weights[name], model.weights[name])
        assert loaded.weights[name].dtype == np.float32


def test_save_is_deterministic(saved, tmp_path):
    model, path = saved
    again = tmp_path / "again.kvcw"
    save_weights(model, again)
    assert path.read_bytes() == again.read_bytes()


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_weights(tmp_path / "absent.kvcw", CONFIG)


def test_bad_magic(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="not a KVCW container"):
        load_weights(path, CONFIG)


def test_unsupported_version(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_weights(path, CONFIG)


def test_unknown_dtype_code(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    # magic(4) + version(4) + count(4) + name_len(4) + "embedding"(9) -> dtype byte
    raw[25] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="dtype"):
        load_weights(path, CONFIG)


def test_truncated_container(saved):
    _, path = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="unexpected end of container"):
        load_weights(path, CONFIG)


def test_trailing_bytes(saved):
    _, path = saved
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(FormatError, match="trailing bytes"):
        load_weights(path, CONFIG)


def test_missing_tensor_for_config(saved):
    _, path = saved
    bigger = ModelConfig(n_layers=3, n_heads=2, hidden_size=16, head_dim=8,
                         vocab_size=32, max_position=64)
    with pytest.raises(FormatError, match="missing tensor"):
        load_weights(path, bigger)


def test_extra_tensor_for_config(saved):
    _, path = saved
    smaller = ModelConfig(n_layers=1, n_heads=2, hidden_size=16, head_dim=8,
                          vocab_size=32, max_position=64)
    with pytest.raises(FormatError, match="unexpected tensor"):
        load_weights(path, smaller)


def test_shape_mismatch_for_config(saved):
    _, path = saved
    wider = ModelConfig(n_layers=2, n_heads=2, hidden_size=32, head_dim=16,
                        vocab_size=32, max_position=64)
    with pytest.raises(FormatError, match="shape"):
        load_weights(path, wider)
