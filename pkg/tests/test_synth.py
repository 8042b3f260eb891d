import numpy as np

from text2pose import synth
from text2pose.pose import FrameDims, PoseSequence, load_pose_sequence, normalize_coordinates


def test_class_corpus_is_deterministic_and_labelled():
    a, caps, labels = synth.class_corpus(2, 6, seed=4, frames=16)
    b, _, _ = synth.class_corpus(2, 6, seed=4, frames=16)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (6, 16, 128, 3)
    assert labels.tolist() == [0, 1, 0, 1, 0, 1]
    assert caps[0] != caps[1] and caps[0] == caps[2]


def test_attribute_captions_are_distinct():
    _, caps = synth.attribute_corpus(100, seed=0, frames=8)
    assert len(set(caps)) == 100


def test_poses_stay_inside_frame():
    poses, _ = synth.attribute_corpus(40, seed=2, frames=32)
    assert (poses[..., 0] >= 0).all() and (poses[..., 0] <= synth.DIMS.width).all()
    assert (poses[..., 1] >= 0).all() and (poses[..., 1] <= synth.DIMS.height).all()
    assert ((poses[..., 2] >= 0) & (poses[..., 2] <= 1)).all()


def test_normalized_matches_pose_normalization():
    poses, _ = synth.attribute_corpus(3, seed=1, frames=8)
    ref = normalize_coordinates(PoseSequence(poses[0]), FrameDims(512, 512))
    np.testing.assert_allclose(synth.normalized(poses)[0], ref.data, atol=1e-6)


def test_write_corpus_round_trip(tmp_path):
    poses, caps = synth.attribute_corpus(3, seed=1, frames=8)
    manifest = synth.write_corpus(tmp_path, poses, caps)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 3
    seq = load_pose_sequence(tmp_path / "clip_0002.mvp")
    np.testing.assert_allclose(seq.data, poses[2], atol=1e-6)
