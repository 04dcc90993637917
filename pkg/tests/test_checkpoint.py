import numpy as np
import pytest

from lesionnet.checkpoint import (
    CheckpointError,
    capture,
    load_checkpoint,
    network_from_checkpoint,
    read_header,
    restore,
    save_checkpoint,
)
from lesionnet.network import ConfigError, NetworkConfig, build_network
from lesionnet.optim import AdamState, adam_step


def small(**kw):
    return NetworkConfig(input_size=32, width_multiplier=0.125, **kw)


@pytest.fixture
def net(rng):
    n = build_network(small(), rng)
    n.forward(rng.random((2, 3, 32, 32)).astype(np.float32), training=True)  # move BN running stats
    return n


def test_roundtrip_bit_exact(net, tmp_path, rng):
    path = save_checkpoint(tmp_path / "a.lnckpt", capture(net, meta={"note": "x"}))
    ck = load_checkpoint(path)
    assert ck.config == net.config and ck.meta["note"] == "x"
    for name, p in net.registry.items():
        assert ck.tensors[name].tobytes() == p.value.tobytes()
    for name, b in net.buffers().items():
        assert ck.tensors[name].tobytes() == b.astype(np.float32).tobytes()
    x = rng.random((2, 3, 32, 32)).astype(np.float32)
    assert network_from_checkpoint(ck)(x).tobytes() == net(x).tobytes()


def test_adam_state_roundtrip(net, tmp_path):
    adam = AdamState()
    for p in net.parameters():
        p.grad[...] = 0.1
    adam_step(net.parameters(), adam, 1e-3)
    ck = load_checkpoint(save_checkpoint(tmp_path / "b.lnckpt", capture(net, adam)))
    other = build_network(small(), np.random.default_rng(5))
    adam2 = AdamState()
    restore(ck, other, adam2)
    assert adam2.t == 1
    for name in adam.m:
        assert adam2.m[name].tobytes() == adam.m[name].tobytes()
        assert adam2.v[name].tobytes() == adam.v[name].tobytes()


def test_config_mismatch_names_field(net, tmp_path):
    ck = load_checkpoint(save_checkpoint(tmp_path / "c.lnckpt", capture(net)))
    other = build_network(small(res_unit_depth=2), np.random.default_rng(0))
    with pytest.raises(ConfigError, match="res_unit_depth"):
        restore(ck, other)


def test_offsets_match_payload(net, tmp_path):
    path = save_checkpoint(tmp_path / "d.lnckpt", capture(net))
    _, _, directory, blob, start = read_header(path)
    offset = 0
    for name, dims, off, nbytes in directory:
        assert off == offset
        assert nbytes == 4 * int(np.prod(dims))
        offset += nbytes
    assert start + offset == len(blob)
    assert len(directory) == len(net.registry) + len(net.buffers())


def test_truncated_payload(net, tmp_path):
    path = save_checkpoint(tmp_path / "e.lnckpt", capture(net))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_version_mismatch(net, tmp_path):
    path = save_checkpoint(tmp_path / "f.lnckpt", capture(net))
    path.write_bytes(path.read_bytes().replace(b"LNCKPT 1\n", b"LNCKPT 9\n", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "g").write_bytes(b"hello\nEND\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "g")


def test_unknown_tensor(net):
    ck = capture(net)
    ck.tensors["mystery.weight"] = np.zeros(3, np.float32)
    with pytest.raises(CheckpointError, match="mystery"):
        restore(ck, build_network(small(), np.random.default_rng(1)))


def test_missing_tensor(net):
    ck = capture(net)
    del ck.tensors["head.bias"]
    with pytest.raises(CheckpointError, match="head.bias"):
        restore(ck, build_network(small(), np.random.default_rng(1)))
