import numpy as np
import pytest

from crossmod import container as C


def make_record(rng, rid="r0", label=0, ts=0, L=2, K=3, T=4, d=4):
    return C.FeatureRecord(
        id=rid,
        label=label,
        timestamp=ts,
        text_tokens=rng.standard_normal((L, d)).astype(np.float32),
        rewrite_tokens=[rng.standard_normal((L, d)).astype(np.float32) for _ in range(3)],
        visual_frames=rng.standard_normal((K, d)).astype(np.float32),
        audio_frames=rng.standard_normal((T, d)).astype(np.float32),
    )


def test_roundtrip_single_record(tmp_path):
    rng = np.random.default_rng(0)
    rec = make_record(rng, L=2, d=4)
    path = tmp_path / "one.mgc3"
    C.write_container([rec], path)
    back = C.read_container(path)
    assert len(back) == 1
    assert back[0] == rec


def test_empty_record_list_rejected(tmp_path):
    with pytest.raises(C.ContainerError, match="empty"):
        C.write_container([], tmp_path / "x.mgc3")


def test_roundtrip_many_random_records_and_byte_count(tmp_path):
    rng = np.random.default_rng(1)
    recs = [
        make_record(
            rng,
            rid=f"r{i}",
            label=int(rng.integers(2)),
            ts=int(rng.integers(10_000)),
            L=int(rng.integers(1, 6)),
            K=int(rng.integers(1, 5)),
            T=int(rng.integers(2, 7)),
            d=6,
        )
        for i in range(1000)
    ]
    path = tmp_path / "many.mgc3"
    nbytes = C.write_container(recs, path)
    assert nbytes == path.stat().st_size
    back = C.read_container(path)
    assert all(a == b for a, b in zip(back, recs))

    # header offsets must account for every payload byte
    import json, struct
    blob = path.read_bytes()
    hlen = struct.unpack("<IQ", blob[4:16])[1]
    header = json.loads(blob[16 : 16 + hlen])
    last = header["records"][-1]
    assert last["offset"] + last["nbytes"] == header["payload_bytes"]
    assert 16 + hlen + header["payload_bytes"] == nbytes


def test_bitwise_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    recs = [make_record(rng, rid=f"r{i}", ts=i) for i in range(5)]
    p1, p2 = tmp_path / "a.mgc3", tmp_path / "b.mgc3"
    C.write_container(recs, p1)
    C.write_container(C.read_container(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_single_byte_corruption_detected(tmp_path):
    rng = np.random.default_rng(3)
    recs = [make_record(rng, rid=f"r{i}", ts=i) for i in range(3)]
    path = tmp_path / "c.mgc3"
    C.write_container(recs, path)
    blob = bytearray(path.read_bytes())
    # flip one byte in the payload region
    import struct
    hlen = struct.unpack("<IQ", bytes(blob[4:16]))[1]
    payload_positions = rng.integers(16 + hlen, len(blob), size=20)
    for pos in payload_positions:
        corrupted = bytearray(blob)
        corrupted[pos] ^= 0xFF
        path.write_bytes(bytes(corrupted))
        with pytest.raises(C.ChecksumError, match="CRC32"):
            C.read_container(path)


def test_distinct_errors(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "e.mgc3"
    C.write_container([make_record(rng)], path)
    blob = path.read_bytes()

    bad_magic = b"XXXX" + blob[4:]
    path.write_bytes(bad_magic)
    with pytest.raises(C.MalformedHeaderError, match="magic"):
        C.read_container(path)

    path.write_bytes(blob[:-10])
    with pytest.raises(C.TruncatedPayloadError, match="truncated"):
        C.read_container(path)

    # corrupt a shape in the header so shapes and nbytes disagree
    import json, struct
    hlen = struct.unpack("<IQ", blob[4:16])[1]
    header = json.loads(blob[16 : 16 + hlen])
    header["records"][0]["shapes"][0][1][0] += 1
    hb = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(blob[:4] + struct.pack("<IQ", 1, len(hb)) + hb + blob[16 + hlen :])
    with pytest.raises(C.LayoutMismatchError):
        C.read_container(path)


def test_invalid_records_rejected(tmp_path):
    rng = np.random.default_rng(5)
    rec = make_record(rng)
    rec.audio_frames = rec.audio_frames[:1]  # T < 2
    with pytest.raises(C.ContainerError, match="audio"):
        C.write_container([rec], tmp_path / "x.mgc3")

    rec2 = make_record(rng)
    rec2.rewrite_tokens = rec2.rewrite_tokens[:2]
    with pytest.raises(C.ContainerError, match="rewrite"):
        C.write_container([rec2], tmp_path / "y.mgc3")


# ---------------------------------------------------------------------------
# chronological split
# ---------------------------------------------------------------------------

def _stub_records(timestamps):
    rng = np.random.default_rng(9)
    return [make_record(rng, rid=f"r{i:04d}", ts=t) for i, t in enumerate(timestamps)]


def test_split_exact_arithmetic():
    recs = _stub_records(range(1, 21))
    train, val, test = C.chronological_split(recs, (0.7, 0.15, 0.15))
    assert [r.timestamp for r in train] == list(range(1, 15))
    assert [r.timestamp for r in val] == [15, 16, 17]
    assert [r.timestamp for r in test] == [18, 19, 20]


def test_split_sizes_floor_floor_rest():
    recs = _stub_records(range(3624))
    train, val, test = C.chronological_split(recs, (0.7, 0.15, 0.15))
    assert (len(train), len(val), len(test)) == (2536, 543, 545)


def test_split_shuffle_invariance():
    recs = _stub_records(range(50))
    rng = np.random.default_rng(10)
    shuffled = [recs[i] for i in rng.permutation(50)]
    a = C.chronological_split(recs, (0.7, 0.15, 0.15))
    b = C.chronological_split(shuffled, (0.7, 0.15, 0.15))
    for part_a, part_b in zip(a, b):
        assert [r.id for r in part_a] == [r.id for r in part_b]


def test_split_ordering_boundaries():
    rng = np.random.default_rng(11)
    recs = _stub_records(rng.integers(0, 1000, size=200))
    train, val, test = C.chronological_split(recs, (0.7, 0.15, 0.15))
    assert max(r.timestamp for r in train) <= min(r.timestamp for r in val)
    assert max(r.timestamp for r in val) <= min(r.timestamp for r in test)


def test_split_bad_ratios_and_too_few():
    recs = _stub_records(range(10))
    with pytest.raises(ValueError, match="sum to 1"):
        C.chronological_split(recs, (0.5, 0.2, 0.2))
    with pytest.raises(ValueError, match="non-empty"):
        C.chronological_split(_stub_records([1, 2]), (0.7, 0.15, 0.15))
