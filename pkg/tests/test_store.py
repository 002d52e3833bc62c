"""Artifact store: content addressing, referential integrity, traces."""

import random
import threading

import pytest

from dataevolver.store import (
    ArtifactId,
    ArtifactKind,
    ArtifactStore,
    CompletenessReport,
    DanglingRefError,
    DuplicateSampleError,
    EmptyPayloadError,
    SampleRecord,
    UnknownSampleError,
)


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "store")


def test_put_is_idempotent(store):
    data = b"same bytes"
    a = store.put_artifact(data, ArtifactKind.RGB_IMAGE)
    b = store.put_artifact(data, ArtifactKind.RGB_IMAGE)
    assert a == b
    assert store.get_artifact(a) == data


def test_distinct_content_distinct_ids(store):
    a = store.put_artifact(b"one", ArtifactKind.MASK)
    b = store.put_artifact(b"two", ArtifactKind.MASK)
    assert a.digest != b.digest


def test_thousand_random_blobs_round_trip(store):
    rng = random.Random(17)
    originals = {}
    for _ in range(1000):
        blob = rng.randbytes(rng.randint(1, 256))
        aid = store.put_artifact(blob, ArtifactKind.DIAGNOSTIC_LOG)
        originals[aid] = blob
    for aid, blob in originals.items():
        assert store.get_artifact(aid) == blob


def test_empty_payload_rejected(store):
    with pytest.raises(EmptyPayloadError):
        store.put_artifact(b"", ArtifactKind.RGB_IMAGE)


def test_digest_shape_is_validated():
    with pytest.raises(ValueError):
        ArtifactId(digest="abc", kind=ArtifactKind.MASK)
    with pytest.raises(ValueError):
        ArtifactId(digest="Z" * 64, kind=ArtifactKind.MASK)


def test_record_round_trips_refs(store):
    render = store.put_artifact(b"render", ArtifactKind.RGB_IMAGE)
    review = store.put_artifact(b"review", ArtifactKind.REVIEW_TRACE)
    store.record_sample(SampleRecord(
        sample_id="s1", render_refs=(render,), review_refs=(review,)))
    rec = store.get_sample("s1")
    assert rec.render_refs == (render,)
    assert rec.review_refs == (review,)


def test_dangling_ref_names_the_missing_id(store):
    ghost = ArtifactId(digest="0" * 64, kind=ArtifactKind.MASK)
    with pytest.raises(DanglingRefError) as err:
        store.record_sample(SampleRecord(sample_id="s1", render_refs=(ghost,)))
    assert "0" * 64 in str(err.value)


def test_duplicate_sample_id_rejected(store):
    store.record_sample(SampleRecord(sample_id="dup"))
    with pytest.raises(DuplicateSampleError):
        store.record_sample(SampleRecord(sample_id="dup"))


def test_concurrent_writers_do_not_corrupt(tmp_path):
    store = ArtifactStore(tmp_path / "store")
    written: list[list[str]] = [[] for _ in range(4)]

    def writer(idx: int):
        for i in range(13 if idx == 0 else 12 + (1 if idx < 2 else 0)):
            sid = f"w{idx}-s{i}"
            ref = store.put_artifact(f"{sid}".encode(), ArtifactKind.RGB_IMAGE)
            store.record_sample(SampleRecord(sample_id=sid, render_refs=(ref,)))
            written[idx].append(sid)

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    expected = {sid for log in written for sid in log}
    assert len(expected) >= 50
    assert set(store.sample_ids()) == expected
    # a fresh instance re-reads the same index without corruption
    reread = ArtifactStore(tmp_path / "store")
    assert set(reread.sample_ids()) == expected


def test_trace_orders_reviews_by_round(store):
    reviews = tuple(store.put_artifact(f"rev{i}".encode(), ArtifactKind.REVIEW_TRACE)
                    for i in range(3))
    store.record_sample(SampleRecord(sample_id="s1", review_refs=reviews))
    trace = store.get_trace("s1")
    review_entries = [e for e in trace.entries if e.role == "review"]
    assert [e.artifact_id for e in review_entries] == list(reviews)
    assert [e.review_round for e in review_entries] == [0, 1, 2]


def test_trace_flags_open_without_verdict(store):
    store.record_sample(SampleRecord(sample_id="s1"))
    assert store.get_trace("s1").open
    review = store.put_artifact(b"rev", ArtifactKind.REVIEW_TRACE)
    verdict = store.put_artifact(b"verdict", ArtifactKind.VERDICT_RECORD)
    store.record_sample(SampleRecord(
        sample_id="s2", review_refs=(review,), verdict_ref=verdict))
    assert not store.get_trace("s2").open


def test_trace_equals_union_of_inserted_refs(store):
    rng = random.Random(3)
    for case in range(20):
        inserted = []

        def put(kind):
            ref = store.put_artifact(rng.randbytes(8), kind)
            inserted.append(ref)
            return ref

        record = SampleRecord(
            sample_id=f"rand-{case}",
            scene_ref=put(ArtifactKind.OBJECT_POSE),
            asset_refs=tuple(put(ArtifactKind.MESH) for _ in range(rng.randint(0, 3))),
            render_refs=tuple(put(ArtifactKind.RGB_IMAGE) for _ in range(rng.randint(0, 3))),
            geom_refs=tuple(put(ArtifactKind.DEPTH_MAP) for _ in range(rng.randint(0, 2))),
            review_refs=tuple(put(ArtifactKind.REVIEW_TRACE) for _ in range(rng.randint(1, 4))),
            verdict_ref=put(ArtifactKind.VERDICT_RECORD),
        )
        store.record_sample(record)
        trace = store.get_trace(f"rand-{case}")
        assert trace.artifact_ids() == set(inserted)


def test_trace_walks_supersedes_chain(store):
    r1 = store.put_artifact(b"v1", ArtifactKind.RGB_IMAGE)
    r2 = store.put_artifact(b"v2", ArtifactKind.RGB_IMAGE)
    store.record_sample(SampleRecord(sample_id="v1", render_refs=(r1,)))
    store.record_sample(SampleRecord(sample_id="v2", render_refs=(r2,), supersedes="v1"))
    trace = store.get_trace("v2")
    assert trace.versions == ("v1", "v2")
    assert {r1, r2} <= trace.artifact_ids()


def test_supersedes_must_resolve(store):
    with pytest.raises(UnknownSampleError):
        store.record_sample(SampleRecord(sample_id="s", supersedes="missing"))


def test_unknown_sample_raises(store):
    with pytest.raises(UnknownSampleError):
        store.get_trace("nope")


def test_completeness_all_present(store):
    refs = {
        ArtifactKind.RGB_IMAGE: store.put_artifact(b"rgb", ArtifactKind.RGB_IMAGE),
        ArtifactKind.MASK: store.put_artifact(b"mask", ArtifactKind.MASK),
        ArtifactKind.DEPTH_MAP: store.put_artifact(b"depth", ArtifactKind.DEPTH_MAP),
    }
    store.record_sample(SampleRecord(
        sample_id="s1",
        render_refs=(refs[ArtifactKind.RGB_IMAGE],),
        geom_refs=(refs[ArtifactKind.MASK], refs[ArtifactKind.DEPTH_MAP])))
    report = store.validate_completeness(
        "s1", {ArtifactKind.RGB_IMAGE, ArtifactKind.MASK, ArtifactKind.DEPTH_MAP})
    assert report == CompletenessReport(complete=True, missing=())


def test_completeness_reports_missing_kind(store):
    rgb = store.put_artifact(b"rgb", ArtifactKind.RGB_IMAGE)
    mask = store.put_artifact(b"mask", ArtifactKind.MASK)
    store.record_sample(SampleRecord(sample_id="s1", render_refs=(rgb,),
                                     geom_refs=(mask,)))
    report = store.validate_completeness(
        "s1", {ArtifactKind.RGB_IMAGE, ArtifactKind.MASK, ArtifactKind.DEPTH_MAP})
    assert not report.complete
    assert report.missing == (ArtifactKind.DEPTH_MAP,)


def test_completeness_matches_brute_force(store):
    rng = random.Random(11)
    kinds = list(ArtifactKind)
    for case in range(30):
        present = rng.sample(kinds, rng.randint(0, 6))
        refs = tuple(store.put_artifact(rng.randbytes(6), k) for k in present)
        store.record_sample(SampleRecord(sample_id=f"c{case}", geom_refs=refs))
        required = set(rng.sample(kinds, rng.randint(0, 8)))
        report = store.validate_completeness(f"c{case}", required)
        expected_missing = required - set(present)
        assert set(report.missing) == expected_missing
        assert report.complete == (not expected_missing)


def test_verdict_requires_review(store):
    verdict = store.put_artifact(b"verdict", ArtifactKind.VERDICT_RECORD)
    with pytest.raises(Exception):
        store.record_sample(SampleRecord(sample_id="s", verdict_ref=verdict))
