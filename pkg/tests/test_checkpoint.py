import numpy as np
import pytest

from handprior import checkpoint
from handprior.checkpoint import CheckpointError


def sample():
    rng = np.random.default_rng(0)
    return {"arch": {"kind": "deep"}, "note": "ü"}, {"a.W": rng.normal(size=(3, 4)).astype(np.float32),
                                                     "a.b": np.zeros(3, np.float32)}


def test_round_trip(tmp_path):
    manifest, tensors = sample()
    checkpoint.save(tmp_path / "m.dpck", manifest, tensors)
    m2, t2 = checkpoint.load(tmp_path / "m.dpck")
    assert m2["arch"] == manifest["arch"] and m2["note"] == "ü"
    assert [e["name"] for e in m2["tensors"]] == ["a.W", "a.b"]
    for k in tensors:
        np.testing.assert_array_equal(t2[k], tensors[k])


def test_layout_and_determinism():
    manifest, tensors = sample()
    raw = checkpoint.dumps(manifest, tensors)
    assert raw.startswith(b"DPCK1")
    end = raw.index(b"\0")
    assert len(raw) - end - 1 == 4 * (12 + 3)
    assert raw == checkpoint.dumps(manifest, tensors)


@pytest.mark.parametrize("mutate,match", [
    (lambda r: b"XPCK1" + r[5:], "magic"),
    (lambda r: r[:-4], "truncated"),
    (lambda r: r + b"\0\0\0\0", "trailing"),
])
def test_corrupt_files_rejected(mutate, match):
    raw = checkpoint.dumps(*sample())
    with pytest.raises(CheckpointError, match=match):
        checkpoint.loads(mutate(raw))


def test_unterminated_manifest_rejected():
    raw = checkpoint.dumps({"a": 1}, {})
    with pytest.raises(CheckpointError, match="null"):
        checkpoint.loads(raw[:-1])
