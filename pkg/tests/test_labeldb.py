import threading

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ovmlc.labeldb import (DB_VERSION, DatabaseError, ModelMismatchError, VocabularyDB, decode_db, encode_db,
                           expand_vocabulary, infer, infer_video, load_db, model_encoder, save_db)
from ovmlc.trainer import Model, make_config, score
from ovmlc.video_encoder import sample_frames

H1, H2 = "ab" * 32, "cd" * 32


def _unit_rows(n, d, seed=0):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def _hash_encoder(d=8):
    """Deterministic per-label unit vectors keyed by the label text."""
    def encode(labels):
        out = []
        for lb in labels:
            seed = int.from_bytes(lb.encode("utf-8")[:8].ljust(8, b"\0"), "little") + len(lb)
            out.append(_unit_rows(1, d, seed)[0])
        return np.array(out)
    return encode


def _db(labels, d=8, h=H1):
    return expand_vocabulary(VocabularyDB(d), labels, _hash_encoder(d), h, "classname")


# serialization


def test_round_trip(tmp_path):
    db = _db(["dog", "red car", "water slide"])
    save_db(db, tmp_path / "v.db")
    back = load_db(tmp_path / "v.db")
    assert back == db and back.vectors.tobytes() == db.vectors.tobytes()
    assert back.model_hash == H1 and back.variant == "classname"
    assert not (tmp_path / "v.db.tmp").exists()


def test_header_layout():
    raw = encode_db(_db(["a"]))
    assert raw[:4] == b"OVDB"
    assert int.from_bytes(raw[4:8], "little") == DB_VERSION
    assert int.from_bytes(raw[8:12], "little") == 8
    assert int.from_bytes(raw[12:16], "little") == 1


def test_every_truncation_is_rejected():
    raw = encode_db(_db(["dog", "cat"]))
    for cut in range(len(raw)):
        with pytest.raises(DatabaseError):
            decode_db(raw[:cut])
    with pytest.raises(DatabaseError):
        decode_db(raw + b"x")


def test_version_and_dim_mismatch():
    raw = bytearray(encode_db(_db(["dog"])))
    with pytest.raises(DatabaseError, match="dimension"):
        decode_db(bytes(raw), expect_dim=16)
    raw[4] = 9
    with pytest.raises(DatabaseError, match="version"):
        decode_db(bytes(raw))


def test_fuzzed_unicode_round_trip_1000_entries():
    rng = np.random.default_rng(0)
    alphabet = "abcxyzé漢字🙂 -_\t"
    labels = list(dict.fromkeys("".join(rng.choice(list(alphabet), size=rng.integers(1, 12)))
                                for _ in range(1300)))[:1000]
    db = VocabularyDB(16, "learnable_llm", H2, labels, _unit_rows(len(labels), 16))
    assert decode_db(encode_db(db)) == db


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=10), min_size=0, max_size=20, unique=True))
def test_round_trip_property(labels):
    db = VocabularyDB(4, "coop", H1, labels, _unit_rows(len(labels), 4))
    assert decode_db(encode_db(db)) == db


def test_db_invariants():
    with pytest.raises(DatabaseError):
        VocabularyDB(2, labels=["a", "a"], vectors=_unit_rows(2, 2))
    with pytest.raises(DatabaseError):
        VocabularyDB(2, labels=["a"], vectors=np.array([[1.0, 1.0]]))


# expansion


def test_expand_existing_label_is_noop():
    db = _db(["dog", "cat"])
    assert expand_vocabulary(db, ["dog"], _hash_encoder(), H1, "classname") == db


def test_expand_adds_exactly_k_and_keeps_rows():
    db = _db(["dog", "cat"])
    new = expand_vocabulary(db, ["lion", "dog", "tiger"], _hash_encoder(), H1, "classname")
    assert len(new) == len(db) + 2
    assert new.labels == ["dog", "cat", "lion", "tiger"]
    assert new.vectors[:2].tobytes() == db.vectors.tobytes()


def test_expand_order_independence():
    a = expand_vocabulary(_db(["x", "y"]), ["y", "z"], _hash_encoder(), H1, "classname")
    assert a == _db(["x", "y", "z"])


def test_expand_model_mismatch():
    with pytest.raises(ModelMismatchError, match="vocabulary built with different model"):
        expand_vocabulary(_db(["dog"]), ["cat"], _hash_encoder(), H2, "classname")


def test_expand_rejects_dim_mismatch():
    with pytest.raises(DatabaseError):
        expand_vocabulary(VocabularyDB(4), ["dog"], _hash_encoder(8), H1, "classname")


# inference


def test_self_entry_scores_one_and_ranks_first():
    db = _db(["dog", "cat", "lion"])
    v = db.vector("cat").astype(np.float64)
    res = infer(v, db, H1, "vid")
    assert res.scores["cat"] == pytest.approx(1.0, abs=1e-6)
    assert max(res.scores, key=res.scores.get) == "cat"
    assert all(-1 - 1e-6 <= s <= 1 + 1e-6 for s in res.scores.values())


def test_threshold_above_one_is_empty():
    db = _db(["dog", "cat"])
    assert infer(db.vector("dog"), db, H1, threshold=1.5).predicted == []
    assert "dog" in infer(db.vector("dog"), db, H1, threshold=0.9).predicted


def test_infer_errors():
    with pytest.raises(DatabaseError):
        infer(np.ones(8) / np.sqrt(8), VocabularyDB(8), H1)
    with pytest.raises(ModelMismatchError):
        infer(np.ones(8) / np.sqrt(8), _db(["dog"]), H2)


def test_expansion_never_changes_existing_scores():
    db = _db(["dog", "cat"])
    v = _unit_rows(1, 8, 42)[0]
    before = infer(v, db, H1).scores
    after = infer(v, expand_vocabulary(db, ["lion", "a b c"], _hash_encoder(), H1, "classname"), H1).scores
    assert all(after[k] == before[k] for k in before)


def test_concurrent_infer_identical():
    db = _db([f"label {i}" for i in range(50)])
    vids = _unit_rows(8, 8, 7)
    results = [None] * 8

    def run(i):
        results[i] = infer(vids[i], db, H1).scores

    threads = [threading.Thread(target=run, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == [infer(v, db, H1).scores for v in vids]


def test_infer_matches_trainer_score_with_model():
    cfg = make_config({"label_encoder.variant": "classname", "temporal.blocks": 2, "video.frames_per_clip": 4,
                       "video.eval_clips": 2})
    model = Model(cfg)
    labels = ["dog", "red car", "guitar"]
    db = expand_vocabulary(VocabularyDB(model.backbones.cfg.joint_dim), labels, model_encoder(model), H1, "classname")
    g, c = model.backbones.cfg.grid, model.backbones.cfg.patch_channels
    video = np.random.default_rng(0).standard_normal((10, g, g, c)).astype(np.float32)
    clips = video[sample_frames(10, 4, 2, "eval")]
    res = infer_video(clips, db, model, H1, "v0", threshold=0.0)
    model.set_swa(False)
    with torch.no_grad():
        v = model.video_encoder(torch.from_numpy(clips)[None])[0]
        t = model.label_encoder.encode(labels)
    for j, lb in enumerate(labels):
        assert res.scores[lb] == pytest.approx(float(score(t[j], v)), abs=1e-6)


def test_dualcoop_not_storable():
    model = Model(make_config({"label_encoder.variant": "dualcoop", "temporal.blocks": 1}))
    with pytest.raises(DatabaseError):
        model_encoder(model)
