import struct

import pytest
import torch

from tiny import tiny_model
from wsworld.checkpoint import (
    CheckpointFormatError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    MissingSectionError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    parse_sections,
    require,
    save_checkpoint,
)
from wsworld.model import COMPONENTS

KINDS = ("gru", "lstm", "transformer")


def _random_model(rng: torch.Generator):
    pick = lambda n: int(torch.randint(n, (1,), generator=rng))  # noqa: E731
    model = tiny_model(
        seed=pick(1000),
        gcm_kind=KINDS[pick(3)],
        gcm_heads=2,
        gcm_max_T=6,
        gcm_blocks=1,
        n_codes=pick(3) * 4,
        fdm_mode=("additive", "joint")[pick(2)],
        channels=1 + 2 * pick(2),
    )
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=rng))
    names = [c for c in COMPONENTS if model.component(c) is not None]
    model.trained = {c for c in names if pick(2)}
    return model


def _assert_same(a, b):
    assert a.config == b.config
    assert a.trained == b.trained
    sa, sb = a.state_dict(), b.state_dict()
    for k, v in sa.items():
        if k.split(".")[0] in a.trained:
            assert torch.equal(v, sb[k]), k


def test_random_round_trips_are_bit_exact():
    rng = torch.Generator().manual_seed(0)
    for i in range(100):
        model = _random_model(rng)
        data = checkpoint_bytes(model, {"phase": "2", "step": i, "seed": 7})
        back = parse_checkpoint(data)
        _assert_same(model, back)
        assert back.meta == {"phase": "2", "step": str(i), "seed": "7"}
        assert checkpoint_bytes(back) == data


def test_round_trip_on_disk(tmp_path):
    model = tiny_model()
    model.trained = {"encoder", "zbar"}
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"phase": "1", "step": 3, "seed": 0})
    _assert_same(model, load_checkpoint(path))
    assert list(tmp_path.iterdir()) == [path]


def test_layout_header_and_config_section():
    model = tiny_model()
    data = checkpoint_bytes(model)
    assert data[:4] == b"NVCK"
    version, count = struct.unpack("<HI", data[4:10])
    assert version == 1 and count == 1
    (n,) = struct.unpack("<H", data[10:12])
    assert data[12 : 12 + n] == b"config"
    text = parse_sections(data)["config"].decode()
    assert "height = 16" in text and "meta.trained = " in text


def test_errors_are_distinct():
    model = tiny_model()
    model.trained = {"encoder", "zbar"}
    data = checkpoint_bytes(model)
    with pytest.raises(CheckpointMagicError):
        parse_checkpoint(b"NVDS" + data[4:])
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(data[:4] + struct.pack("<H", 9) + data[6:])
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(data[:-3])
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(data[:2])
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(data + b"\0")
    classes = (CheckpointMagicError, CheckpointVersionError, CheckpointTruncatedError, MissingSectionError)
    for a in classes:
        for b in classes:
            assert a is b or not issubclass(a, b)


def test_missing_section_detected():
    model = tiny_model()
    model.trained = {"zbar"}
    data = checkpoint_bytes(model)
    assert set(parse_sections(data)) == {"config", "zbar"}
    # keep only the config section and fix the count
    cut = data.index(b"\x04\x00zbar")
    stripped = data[:4] + struct.pack("<HI", 1, 1) + data[10:cut]
    with pytest.raises(MissingSectionError):
        parse_checkpoint(stripped)


def test_purpose_rules():
    phase2 = tiny_model()
    phase2.trained = {"encoder", "zbar", "idm", "fdm"}
    require(phase2, "phase3")
    phase1 = tiny_model()
    phase1.trained = {"encoder", "zbar"}
    require(phase1, "phase2")
    with pytest.raises(MissingSectionError, match="gcm"):
        require(phase1, "rollout")
    with pytest.raises(MissingSectionError):
        require(phase1, "phase3")
