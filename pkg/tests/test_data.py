import hashlib

import numpy as np
import pytest

from ovmlc.backbones import Tokenizer
from ovmlc.data import Dataset, SyntheticDatasetSpec, SyntheticVideos, concept_table, generate_synthetic_dataset
from ovmlc.vocab import ACTION_CONCEPTS, ENTITY_CONCEPTS

SMALL = {"train": 20, "val": 6, "test_closed": 6, "test_open": 4}


def _index(spec, kind):
    return next(c.index for c in concept_table(spec) if c.kind == kind)


def test_static_concept_noise_free_frames_identical():
    spec = SyntheticDatasetSpec(noise=0.0)
    frames = SyntheticVideos(spec).render([_index(spec, "entity")], noise_seed=1)
    assert all(np.array_equal(frames[0], f) for f in frames[1:])


def test_temporal_concept_frames_differ_and_mean_matches():
    spec = SyntheticDatasetSpec(noise=0.0)
    sv = SyntheticVideos(spec)
    a = _index(spec, "action")
    frames = sv.render([a], noise_seed=1)
    assert not np.array_equal(frames[0], frames[-1])
    pattern = sv.action_frames(a, spec.frames_per_video)
    assert np.allclose(frames.mean(0), pattern.mean(0), atol=1e-6)


def test_reversed_partner_has_same_frame_multiset():
    spec = SyntheticDatasetSpec(noise=0.0)
    sv = SyntheticVideos(spec)
    a = _index(spec, "action")
    fwd = sv.action_frames(a, 8)
    rev = sv.action_frames(concept_table(spec)[a].partner, 8)
    assert np.allclose(fwd, rev[::-1])
    assert np.allclose(fwd.mean(0), rev.mean(0))


def _digest(ds):
    h = hashlib.sha256()
    for r in ds.records:
        h.update(repr(sorted(r.items())).encode())
        h.update(ds.frames(r).tobytes())
    return h.hexdigest()


def test_fixed_seed_is_byte_identical():
    a = Dataset.synthetic(SyntheticDatasetSpec(videos=SMALL, seed=5))
    b = Dataset.synthetic(SyntheticDatasetSpec(videos=SMALL, seed=5))
    c = Dataset.synthetic(SyntheticDatasetSpec(videos=SMALL, seed=6))
    assert _digest(a) == _digest(b) != _digest(c)


def test_capacity_and_spec_errors():
    with pytest.raises(ValueError, match="capacity"):
        concept_table(SyntheticDatasetSpec(n_entities=len(ENTITY_CONCEPTS) + 1))
    with pytest.raises(ValueError, match="capacity"):
        concept_table(SyntheticDatasetSpec(n_actions=len(ACTION_CONCEPTS) + 2))
    with pytest.raises(ValueError):
        concept_table(SyntheticDatasetSpec(n_actions=3))
    with pytest.raises(ValueError):
        concept_table(SyntheticDatasetSpec(min_labels=0))


def test_desk_defaults():
    spec = SyntheticDatasetSpec()
    cons = concept_table(spec)
    assert len(cons) == 16 and sum(c.kind == "action" for c in cons) == 6
    assert spec.videos == {"train": 256, "val": 64, "test_closed": 64, "test_open": 32}
    assert spec.grid == 4


def test_manifest_invariants():
    records, vocab = generate_synthetic_dataset(SyntheticDatasetSpec(videos=SMALL))
    ids = [r["video"] for r in records]
    assert len(set(ids)) == len(ids)
    known = set(vocab)
    assert all(set(r["labels"]) <= known for r in records)
    train_labels = {lb for r in records if r["split"] == "train" for lb in r["labels"]}
    open_labels = {lb for r in records if r["split"] == "test_open" for lb in r["labels"]}
    assert open_labels and not open_labels & train_labels
    words = set(Tokenizer.default().words)
    assert all(w in words for lb in open_labels for w in lb.split())
    cons = concept_table(SyntheticDatasetSpec())
    for r in records:
        pick = r["source"]["concepts"]
        assert 1 <= len(pick) <= 4
        assert not any(cons[i].partner in pick for i in pick)


def test_split_vocabularies():
    ds = Dataset.synthetic(SyntheticDatasetSpec(videos=SMALL))
    closed, open_ = ds.split_vocabulary("train"), ds.split_vocabulary("test_open")
    assert len(closed) == len(open_) == 16 and not set(closed) & set(open_)
    assert ds.labels_of_kind("action") == set(ACTION_CONCEPTS) | set(ACTION_CONCEPTS.values())


def test_save_load_round_trip(tmp_path):
    ds = Dataset.synthetic(SyntheticDatasetSpec(videos=SMALL, seed=2))
    ds.save(tmp_path)
    back = Dataset.load(tmp_path)
    assert back.records == ds.records and back.vocabulary == ds.vocabulary and back.label_info == ds.label_info
    r = ds.records[3]
    assert back.frames(r).tobytes() == ds.frames(r).tobytes()


def test_raw_frame_source(tmp_path):
    x = np.arange(2 * 4 * 4 * 8, dtype="<f4").reshape(2, 4, 4, 8)
    x.tofile(tmp_path / "v.f32")
    rec = {"video": "v", "split": "train", "labels": ["dog"],
           "source": {"kind": "raw", "path": "v.f32", "shape": [2, 4, 4, 8]}}
    ds = Dataset([rec], ["dog"], root=tmp_path)
    assert np.array_equal(ds.frames(rec), x)
    bad = dict(rec, source=dict(rec["source"], shape=[3, 4, 4, 8]))
    with pytest.raises(ValueError):
        Dataset([bad], ["dog"], root=tmp_path).frames(bad)


def test_labels_outside_vocabulary_rejected():
    with pytest.raises(ValueError, match="outside the vocabulary"):
        Dataset([{"video": "v", "split": "train", "labels": ["cat"], "source": {}}], ["dog"])
    with pytest.raises(ValueError, match="duplicate"):
        Dataset([{"video": "v", "split": "train", "labels": [], "source": {}}] * 2, [])
