import struct

import pytest

from orchsim.errors import (
    BatchFailed,
    DuplicateMember,
    EmptyBatch,
    StaleLease,
    TransferFault,
    UnknownSection,
    UnknownSource,
)
from orchsim.object_store import ObjectStore
from orchsim.transfer import (
    DownloadConfig,
    FetchStats,
    MergedContainer,
    SimFetcher,
    SourceCatalog,
    SourceObject,
    WorkerOutcome,
    build_catalog,
    download_worker_step,
    encode_url_list,
    fetch_batch,
    merge,
    merged_key,
    process_message,
)
from orchsim.workqueue import CompletionSet, WorkQueue

SUBSET_RATIO = 246 / 455  # archive reduction the default catalog mirrors


def tiny_catalog(files=25, seed=7):
    return build_catalog(
        files=files,
        sections={"ivt": 0.5407, "other": 0.4593},
        total_bytes=files * 2000,
        subset_section="ivt",
        seed=seed,
    )


class TestCatalog:
    def test_section_extraction_sizes(self):
        catalog = SourceCatalog(
            seed=1,
            subset_section="ivt",
            objects=[SourceObject(url="f.nc", sections={"ivt": 100, "other": 85})],
        )
        assert len(catalog.section_content("f.nc", "ivt")) == 100
        assert len(catalog.section_content("f.nc", "other")) == 85
        assert catalog.total_bytes == 185

    def test_subset_ratio_close_to_configured(self):
        catalog = build_catalog(
            files=1000,
            sections={"ivt": 0.5407, "other": 0.4593},
            total_bytes=50_000_000,
            subset_section="ivt",
            seed=42,
        )
        ratio = catalog.subset_bytes / catalog.total_bytes
        assert abs(ratio - SUBSET_RATIO) / SUBSET_RATIO < 0.01

    def test_unknown_section_and_source(self):
        catalog = tiny_catalog()
        with pytest.raises(UnknownSection):
            catalog.section_content("file_000000.nc", "ghost")
        with pytest.raises(UnknownSource):
            catalog.section_content("ghost.nc", "ivt")

    def test_same_seed_reproduces_everything(self):
        a, b = tiny_catalog(seed=5), tiny_catalog(seed=5)
        assert a.manifest_dict() == b.manifest_dict()
        assert a.section_content("file_000003.nc", "ivt") == b.section_content(
            "file_000003.nc", "ivt"
        )

    def test_manifest_round_trip(self):
        a = tiny_catalog()
        b = SourceCatalog.from_manifest(a.manifest_dict())
        assert b.manifest_dict() == a.manifest_dict()
        assert b.section_content("file_000001.nc", "ivt") == a.section_content(
            "file_000001.nc", "ivt"
        )


class _FlakyFetcher:
    """Fails the first `faults` attempts for each url, then succeeds."""

    def __init__(self, catalog, faults):
        self.catalog = catalog
        self.faults = faults
        self.attempts = {}

    def subset_fetch(self, url, section):
        n = self.attempts.get(url, 0) + 1
        self.attempts[url] = n
        if n <= self.faults:
            raise TransferFault("injected")
        return self.catalog.section_content(url, section)


class TestFetchBatch:
    def test_in_flight_bounded_at_parallelism(self):
        catalog = tiny_catalog(files=100)
        stats = FetchStats()
        results = fetch_batch(
            SimFetcher(catalog), catalog.urls(), "ivt", parallelism=20, stats=stats
        )
        assert stats.max_in_flight == 20
        assert [u for u, _ in results] == catalog.urls()  # input order preserved

    def test_in_flight_bounded_by_work(self):
        catalog = tiny_catalog(files=1)
        stats = FetchStats()
        fetch_batch(SimFetcher(catalog), catalog.urls(), "ivt", parallelism=20, stats=stats)
        assert stats.max_in_flight == 1

    def test_retry_succeeds_after_two_faults(self):
        catalog = tiny_catalog(files=1)
        fetcher = _FlakyFetcher(catalog, faults=2)
        stats = FetchStats()
        results = fetch_batch(
            fetcher, catalog.urls(), "ivt", parallelism=20, retry_limit=3, stats=stats
        )
        assert stats.attempts == 3
        assert results[0][1] == catalog.section_content(catalog.urls()[0], "ivt")

    def test_retries_exhausted(self):
        catalog = tiny_catalog(files=1)
        fetcher = _FlakyFetcher(catalog, faults=99)
        with pytest.raises(BatchFailed) as err:
            fetch_batch(fetcher, catalog.urls(), "ivt", parallelism=4, retry_limit=3)
        assert err.value.attempts == 3

    def test_fetched_bytes_equal_subset_bytes(self):
        catalog = tiny_catalog(files=30)
        stats = FetchStats()
        fetch_batch(SimFetcher(catalog), catalog.urls(), "ivt", parallelism=20, stats=stats)
        assert stats.fetched_bytes == catalog.subset_bytes


class TestMerge:
    def test_offsets_are_contiguous(self):
        container = merge([("a", b"x" * 10), ("b", b"y" * 20), ("c", b"z" * 30)])
        assert [(m.url, m.offset, m.length) for m in container.members] == [
            ("a", 0, 10),
            ("b", 10, 20),
            ("c", 30, 30),
        ]
        assert len(container.payload) == 60

    def test_single_member(self):
        container = merge([("only", b"abc")])
        assert container.members[0].offset == 0

    def test_members_sorted_by_url(self):
        container = merge([("b", b"2"), ("a", b"1")])
        assert [m.url for m in container.members] == ["a", "b"]
        assert container.payload == b"12"

    def test_duplicate_member(self):
        with pytest.raises(DuplicateMember):
            merge([("a", b"1"), ("a", b"2")])

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            merge([])

    def test_wire_format_golden_bytes(self):
        # independently constructed expected encoding for one member "a" -> b"abc"
        expected = (
            b"MRGC"
            + struct.pack("<H", 1)
            + struct.pack("<I", 1)
            + struct.pack("<H", 1)
            + b"a"
            + struct.pack("<Q", 0)
            + struct.pack("<Q", 3)
            + b"abc"
        )
        assert merge([("a", b"abc")]).encode() == expected

    def test_encode_decode_round_trip(self):
        original = merge([("u1", b"abc"), ("u2", b"defgh")])
        decoded = MergedContainer.decode(original.encode())
        assert decoded.members == original.members
        assert decoded.payload == original.payload
        assert decoded.member_bytes("u2") == b"defgh"

    def test_encode_is_byte_stable(self):
        batch = [("u1", b"abc"), ("u2", b"defgh")]
        assert merge(batch).encode() == merge(list(reversed(batch))).encode()


def worker_env(files=100):
    catalog = tiny_catalog(files=files)
    queue = WorkQueue("ns", "q")
    store = ObjectStore()
    store.create_bucket("ns", "archive")
    completions = CompletionSet("ns", "downloaded")
    config = DownloadConfig(
        section="ivt",
        namespace="ns",
        output_bucket="archive",
        completion_set="downloaded",
    )
    return catalog, queue, store, completions, config


class TestWorkerStep:
    def test_fresh_message_processed(self):
        catalog, queue, store, completions, config = worker_env()
        queue.push(encode_url_list(catalog.urls()))
        result = download_worker_step(
            "w1", queue, store, SimFetcher(catalog), completions, config, now=1
        )
        assert result.outcome is WorkerOutcome.PROCESSED
        assert result.new_urls == 100
        assert len(completions) == 100
        keys = store.list("ns", "archive")
        assert keys == [merged_key("merged/", result.message_id)]
        container = MergedContainer.decode(store.get("ns", "archive", keys[0]))
        assert len(container.payload) == catalog.subset_bytes

    def test_empty_queue_is_idle(self):
        _, queue, store, completions, config = worker_env()
        result = download_worker_step(
            "w1", queue, store, SimFetcher(tiny_catalog()), completions, config, now=1
        )
        assert result.outcome is WorkerOutcome.IDLE

    def test_replay_is_side_effect_free(self):
        catalog, queue, store, completions, config = worker_env()
        payload = encode_url_list(catalog.urls())
        queue.push(payload)
        first = download_worker_step(
            "w1", queue, store, SimFetcher(catalog), completions, config, now=1
        )
        etag = store.stat("ns", "archive", merged_key("merged/", first.message_id)).etag
        # the same urls arrive again (e.g. an operator re-enqueues the list)
        queue.push(payload)
        replay = download_worker_step(
            "w2", queue, store, SimFetcher(catalog), completions, config, now=2
        )
        assert replay.outcome is WorkerOutcome.PROCESSED
        assert replay.fetched_bytes == 0 and replay.new_urls == 0
        assert completions.true_count == 100
        assert store.stat("ns", "archive", merged_key("merged/", first.message_id)).etag == etag

    def test_partial_duplicates_fetch_only_new(self):
        catalog, queue, store, completions, config = worker_env(files=10)
        urls = catalog.urls()
        for url in urls[:4]:
            completions.record(url)
        queue.push(encode_url_list(urls))
        result = download_worker_step(
            "w1", queue, store, SimFetcher(catalog), completions, config, now=1
        )
        assert result.new_urls == 6
        container = MergedContainer.decode(
            store.get("ns", "archive", merged_key("merged/", result.message_id))
        )
        assert [m.url for m in container.members] == sorted(urls[4:])

    def test_stale_ack_reports_stale(self, monkeypatch):
        catalog, queue, store, completions, config = worker_env(files=5)
        queue.push(encode_url_list(catalog.urls()))

        def stolen_ack(message_id, worker):
            raise StaleLease("lease moved on")

        monkeypatch.setattr(queue, "ack", stolen_ack)
        result = download_worker_step(
            "w1", queue, store, SimFetcher(catalog), completions, config, now=1
        )
        assert result.outcome is WorkerOutcome.STALE
        assert len(store.list("ns", "archive")) == 1  # the put still landed

    def test_exactly_once_payload_conservation(self):
        catalog, queue, store, completions, config = worker_env(files=60)
        urls = catalog.urls()
        for i in range(0, 60, 20):
            queue.push(encode_url_list(urls[i : i + 20]))
        fetcher = SimFetcher(catalog)
        while not queue.drained:
            download_worker_step("w", queue, store, fetcher, completions, config, now=1)
        total_payload = 0
        for key in store.list("ns", "archive"):
            total_payload += len(MergedContainer.decode(store.get("ns", "archive", key)).payload)
        assert total_payload == catalog.subset_bytes

    def test_process_message_counts_fetched_bytes(self):
        catalog, _, store, completions, config = worker_env(files=8)
        fetched, new = process_message(
            1, catalog.urls(), SimFetcher(catalog), completions, store, config
        )
        assert new == 8
        assert fetched == catalog.subset_bytes
