import numpy as np
import pytest

from driftlearn.errors import ConfigurationError, GenerationError, StreamFormatError
from driftlearn.streams import (
    Frame,
    RegimeSpec,
    StreamSpec,
    SubChunk,
    generate_stream,
    load_manifest,
    load_stream,
    read_feature_file,
    read_mask_pgm,
    save_manifest,
    save_stream,
    stationary_spec,
    write_feature_file,
    write_mask_pgm,
)


def two_chunk_spec(noise=0.0, seed=5):
    regime_a = RegimeSpec(
        object_shape="disc",
        object_scale=3.0,
        foreground_feature_mean=(5.0, 0.0),
        background_feature_mean=(0.0, 0.0),
        feature_noise_std=noise,
    )
    regime_b = RegimeSpec(
        object_shape="rectangle",
        object_scale=3.0,
        foreground_feature_mean=(-5.0, 0.0),
        background_feature_mean=(0.0, 0.0),
        feature_noise_std=noise,
    )
    return StreamSpec(
        height=16,
        width=16,
        channels=2,
        seed=seed,
        sub_chunks=[SubChunk(0, 9, regime_a), SubChunk(10, 19, regime_b)],
        annotated_frames=[0, 4, 10, 14, 19],
    )


def test_stationary_zero_noise_frames_identical():
    spec = stationary_spec(height=12, width=12, channels=3, n_frames=6)
    spec.sub_chunks[0] = SubChunk(
        0,
        5,
        RegimeSpec(
            object_scale=3.0,
            foreground_feature_mean=(1.0, 0.0, 0.0),
            background_feature_mean=(-1.0, 0.0, 0.0),
            feature_noise_std=0.0,
        ),
    )
    frames = generate_stream(spec)
    assert len(frames) == 6
    for frame in frames[1:]:
        np.testing.assert_array_equal(frame.features, frames[0].features)
        np.testing.assert_array_equal(frame.truth_mask, frames[0].truth_mask)


def test_foreground_mean_flips_sign_at_boundary():
    spec = two_chunk_spec(noise=0.3)
    frames = generate_stream(spec)
    for frame in frames:
        fg = frame.features[frame.truth_mask.astype(bool), 0].mean()
        if frame.index < 10:
            assert fg > 2.0
        else:
            assert fg < -2.0


def test_same_seed_bit_identical():
    a = generate_stream(two_chunk_spec(noise=0.7, seed=11))
    b = generate_stream(two_chunk_spec(noise=0.7, seed=11))
    for fa, fb in zip(a, b):
        assert fa.features.tobytes() == fb.features.tobytes()
        assert fa.truth_mask.tobytes() == fb.truth_mask.tobytes()


def test_masks_binary_and_nonempty():
    frames = generate_stream(two_chunk_spec(noise=0.2))
    for frame in frames:
        assert set(np.unique(frame.truth_mask)) <= {0, 1}
        assert frame.truth_mask.sum() > 0


def test_object_leaving_canvas_raises_with_frame_index():
    regime = RegimeSpec(
        object_scale=2.0,
        foreground_feature_mean=(1.0,),
        background_feature_mean=(0.0,),
        motion=(0.0, 4.0),
    )
    spec = StreamSpec(
        height=16, width=16, channels=1, sub_chunks=[SubChunk(0, 19, regime)]
    )
    with pytest.raises(GenerationError) as exc:
        generate_stream(spec)
    assert exc.value.frame_index is not None


def test_ring_and_rectangle_shapes_render():
    for shape in ("ring", "rectangle"):
        regime = RegimeSpec(
            object_shape=shape,
            object_scale=4.0,
            foreground_feature_mean=(1.0,),
            background_feature_mean=(0.0,),
        )
        spec = StreamSpec(
            height=16, width=16, channels=1, sub_chunks=[SubChunk(0, 0, regime)]
        )
        (frame,) = generate_stream(spec)
        assert frame.truth_mask.any()
        if shape == "ring":
            assert frame.truth_mask[8, 8] == 0  # hollow center


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    features = rng.normal(size=(5, 7, 3))
    path = tmp_path / "frame_000000.clvf"
    write_feature_file(path, features)
    loaded = read_feature_file(path)
    assert loaded.tobytes() == features.tobytes()


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "bad.clvf"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(StreamFormatError, match="bad.clvf"):
        read_feature_file(path)


def test_feature_file_truncated(tmp_path):
    path = tmp_path / "frame_000000.clvf"
    write_feature_file(path, np.zeros((2, 2, 1)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(StreamFormatError):
        read_feature_file(path)


def test_mask_pgm_round_trip_and_threshold(tmp_path):
    mask = np.zeros((4, 6), dtype=np.uint8)
    mask[1:3, 2:5] = 1
    path = tmp_path / "mask_000000.pgm"
    write_mask_pgm(path, mask)
    np.testing.assert_array_equal(read_mask_pgm(path), mask)

    # values >= 128 load as foreground
    gray = tmp_path / "gray.pgm"
    gray.write_bytes(b"P5\n3 1\n255\n" + bytes([127, 128, 200]))
    np.testing.assert_array_equal(read_mask_pgm(gray), [[0, 1, 1]])


def test_mask_pgm_with_comment_header(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 255, 255, 0]))
    np.testing.assert_array_equal(read_mask_pgm(path), [[0, 1], [1, 0]])


def test_save_load_round_trip(tmp_path):
    spec = two_chunk_spec(noise=0.4)
    spec.sub_chunks = spec.sub_chunks[:1]
    spec.annotated_frames = [0, 4, 9]
    frames = generate_stream(spec)[:10]
    save_stream(spec, frames, tmp_path / "s")
    loaded_spec, loaded = load_stream(tmp_path / "s")
    assert loaded_spec.to_dict() == spec.to_dict()
    assert len(loaded) == len(frames)
    for a, b in zip(frames, loaded):
        assert a.features.tobytes() == b.features.tobytes()
        assert a.truth_mask.tobytes() == b.truth_mask.tobytes()


def test_sparse_masks_only_for_annotated(tmp_path):
    spec = two_chunk_spec(noise=0.1)
    frames = generate_stream(spec)
    save_stream(spec, frames, tmp_path / "s", masks="annotated")
    _, loaded = load_stream(tmp_path / "s")
    with_mask = [f.index for f in loaded if f.truth_mask is not None]
    assert with_mask == [0, 4, 10, 14, 19]


def test_load_missing_feature_file(tmp_path):
    spec = two_chunk_spec()
    frames = generate_stream(spec)
    save_stream(spec, frames, tmp_path / "s")
    (tmp_path / "s" / "frame_000003.clvf").unlink()
    with pytest.raises(StreamFormatError, match="frame_000003"):
        load_stream(tmp_path / "s")


def test_manifest_rejects_noncontiguous_chunks(tmp_path):
    spec = two_chunk_spec()
    d = spec.to_dict()
    d["sub_chunks"][1]["start"] = 12  # gap after frame 9
    path = tmp_path / "stream.json"
    path.write_text(__import__("json").dumps(d))
    with pytest.raises(StreamFormatError):
        load_manifest(path)


def test_manifest_rejects_out_of_range_annotation():
    spec = two_chunk_spec()
    spec.annotated_frames = [0, 25]
    with pytest.raises(ConfigurationError):
        spec.validate()


def test_ground_truth_frame_must_be_in_first_chunk():
    spec = two_chunk_spec()
    spec.ground_truth_frame = 15
    with pytest.raises(ConfigurationError):
        spec.validate()


def test_long_manifest_round_trips(tmp_path):
    # 23 sub-chunks totalling 3589 frames with 43 annotated frames is a
    # representable manifest shape.
    lengths = [201] + [188] * 14 + [1] * 4 + [188] * 4
    assert sum(lengths) == 3589
    chunks = []
    start = 0
    regime = RegimeSpec(
        object_scale=5.0,
        foreground_feature_mean=(1.0,),
        background_feature_mean=(0.0,),
    )
    for n in lengths:
        chunks.append(SubChunk(start, start + n - 1, regime))
        start += n
    from driftlearn.curation import select_annotation_frames

    annotated = select_annotation_frames(
        [(c.start_frame, c.end_frame) for c in chunks], 3589
    )
    assert len(annotated) == 43
    spec = StreamSpec(
        height=64,
        width=64,
        channels=1,
        sub_chunks=chunks,
        annotated_frames=annotated,
    )
    spec.validate()
    save_manifest(spec, tmp_path / "stream.json")
    loaded = load_manifest(tmp_path / "stream.json")
    assert loaded.to_dict() == spec.to_dict()
    assert len(loaded.sub_chunks) == 23
    assert loaded.total_frames == 3589


def test_frame_dataclass_defaults():
    f = Frame(index=3, features=np.zeros((2, 2, 1)))
    assert f.truth_mask is None
