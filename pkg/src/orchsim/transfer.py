"""Data plane of the download step.

Source files are synthetic: each has named sections whose bytes are a pure
function of (seed, url, section), so any worker, any retry, and any rerun
fetches identical content. Fetching pulls one named section instead of the
whole file; a deterministic dispatcher bounds how many fetches are in
flight at once. Fetched sections are merged into a container object with a
fixed little-endian wire format so golden tests can pin exact bytes.
"""

from __future__ import annotations

import json
import struct
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .errors import (
    BatchFailed,
    DuplicateMember,
    EmptyBatch,
    StaleLease,
    TransferFault,
    UnknownMessage,
    UnknownSection,
    UnknownSource,
)
from .object_store import ObjectStore
from .seeding import content_bytes, substream
from .workqueue import CompletionSet, WorkQueue

# -- source catalog -----------------------------------------------------------


@dataclass(frozen=True)
class SourceObject:
    url: str
    sections: dict[str, int]  # section name -> size in bytes

    @property
    def total_size(self) -> int:
        return sum(self.sections.values())


@dataclass
class SourceCatalog:
    seed: int
    subset_section: str
    objects: list[SourceObject]
    _by_url: dict[str, SourceObject] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._by_url = {o.url: o for o in self.objects}

    def lookup(self, url: str) -> SourceObject:
        obj = self._by_url.get(url)
        if obj is None:
            raise UnknownSource(f"no source file {url!r}")
        return obj

    def section_size(self, url: str, section: str) -> int:
        obj = self.lookup(url)
        if section not in obj.sections:
            raise UnknownSection(f"file {url!r} has no section {section!r}")
        return obj.sections[section]

    def section_content(self, url: str, section: str) -> bytes:
        size = self.section_size(url, section)
        return content_bytes(self.seed, size, "content", url, section)

    @property
    def total_bytes(self) -> int:
        return sum(o.total_size for o in self.objects)

    @property
    def subset_bytes(self) -> int:
        return sum(o.sections[self.subset_section] for o in self.objects)

    def urls(self) -> list[str]:
        return [o.url for o in self.objects]

    def manifest_dict(self) -> dict:
        return {
            "schema_version": 1,
            "seed": self.seed,
            "subset_section": self.subset_section,
            "files": [
                {"url": o.url, "sections": dict(sorted(o.sections.items()))}
                for o in self.objects
            ],
        }

    @classmethod
    def from_manifest(cls, raw: dict) -> "SourceCatalog":
        objects = [
            SourceObject(url=f["url"], sections={k: int(v) for k, v in f["sections"].items()})
            for f in raw["files"]
        ]
        return cls(
            seed=int(raw["seed"]),
            subset_section=raw["subset_section"],
            objects=objects,
        )


def build_catalog(
    files: int,
    sections: dict[str, float],
    total_bytes: int,
    subset_section: str,
    seed: int,
) -> SourceCatalog:
    """Deterministic synthetic catalog.

    Per-file totals jitter around the mean, and each section gets its
    fraction of the file with a small independent jitter, so the archive
    looks uneven while the aggregate subset/total ratio stays within a
    fraction of a percent of the configured one.
    """
    if files < 1:
        raise ValueError("files must be >= 1")
    if subset_section not in sections:
        raise ValueError(f"subset section {subset_section!r} not in sections")
    if any(f <= 0 for f in sections.values()):
        raise ValueError("section fractions must be positive")
    rng = substream(seed, "catalog")
    norm = sum(sections.values())
    mean = max(len(sections), total_bytes // files)
    objects = []
    for i in range(files):
        url = f"file_{i:06d}.nc"
        file_total = max(len(sections), round(mean * rng.uniform(0.8, 1.2)))
        sizes = {}
        for name in sorted(sections):
            share = sections[name] / norm
            sizes[name] = max(1, round(file_total * share * rng.uniform(0.97, 1.03)))
        objects.append(SourceObject(url=url, sections=sizes))
    return SourceCatalog(seed=seed, subset_section=subset_section, objects=objects)


# -- fetchers -----------------------------------------------------------------


class SimFetcher:
    """In-process fetcher backed directly by the catalog.

    A fault rate can be injected; fault draws come from a dedicated
    substream keyed per attempt, so they never perturb content bytes.
    """

    def __init__(self, catalog: SourceCatalog, fault_rate: float = 0.0):
        self.catalog = catalog
        self.fault_rate = fault_rate
        self._fault_rng = substream(catalog.seed, "transfer-faults")
        self._attempts: dict[tuple[str, str], int] = {}

    def subset_fetch(self, url: str, section: str) -> bytes:
        key = (url, section)
        self._attempts[key] = self._attempts.get(key, 0) + 1
        if self.fault_rate > 0 and self._fault_rng.random() < self.fault_rate:
            raise TransferFault(f"injected fault fetching {url!r}#{section}")
        return self.catalog.section_content(url, section)


class HttpFetcher:
    """Fetcher speaking the loopback catalog server's GET protocol."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def subset_fetch(self, url: str, section: str) -> bytes:
        target = "{}/files/{}?section={}".format(
            self.base_url,
            urllib.parse.quote(url, safe=""),
            urllib.parse.quote(section, safe=""),
        )
        try:
            with urllib.request.urlopen(target, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as err:
            body = err.read().decode("utf-8", "replace")
            if err.code == 404 and "section" in body:
                raise UnknownSection(body) from None
            if err.code == 404:
                raise UnknownSource(body) from None
            raise TransferFault(f"HTTP {err.code} fetching {url!r}") from None
        except urllib.error.URLError as err:
            raise TransferFault(f"transport error fetching {url!r}: {err.reason}") from None


@dataclass
class FetchStats:
    max_in_flight: int = 0
    attempts: int = 0
    fetched_bytes: int = 0


def fetch_batch(
    fetcher,
    urls: list[str],
    section: str,
    parallelism: int,
    retry_limit: int = 3,
    stats: FetchStats | None = None,
) -> list[tuple[str, bytes]]:
    """Fetch every url's section with at most `parallelism` in flight.

    The dispatcher admits work into a bounded in-flight window and retires
    the oldest entry each round, retrying a faulted url until `retry_limit`
    total attempts are spent. Results come back in input order.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if retry_limit < 1:
        raise ValueError("retry_limit must be >= 1")
    pending: list[tuple[str, int]] = [(url, 0) for url in urls]
    in_flight: list[tuple[str, int]] = []
    results: dict[str, bytes] = {}
    while pending or in_flight:
        while pending and len(in_flight) < parallelism:
            in_flight.append(pending.pop(0))
            if stats is not None:
                stats.max_in_flight = max(stats.max_in_flight, len(in_flight))
        url, attempts = in_flight.pop(0)
        attempts += 1
        if stats is not None:
            stats.attempts += 1
        try:
            content = fetcher.subset_fetch(url, section)
        except TransferFault:
            if attempts >= retry_limit:
                raise BatchFailed(url, attempts) from None
            pending.append((url, attempts))
            continue
        results[url] = content
        if stats is not None:
            stats.fetched_bytes += len(content)
    return [(url, results[url]) for url in urls]


# -- merged containers --------------------------------------------------------

_MAGIC = b"MRGC"
_VERSION = 1


@dataclass(frozen=True)
class MergedMember:
    url: str
    offset: int
    length: int


@dataclass
class MergedContainer:
    members: list[MergedMember]
    payload: bytes

    def member_bytes(self, url: str) -> bytes:
        for m in self.members:
            if m.url == url:
                return self.payload[m.offset : m.offset + m.length]
        raise KeyError(url)

    def encode(self) -> bytes:
        """Wire format: magic, version u16, count u32, members, payload (LE)."""
        out = [_MAGIC, struct.pack("<H", _VERSION), struct.pack("<I", len(self.members))]
        for m in self.members:
            url_bytes = m.url.encode("utf-8")
            out.append(struct.pack("<H", len(url_bytes)))
            out.append(url_bytes)
            out.append(struct.pack("<QQ", m.offset, m.length))
        out.append(self.payload)
        return b"".join(out)

    @classmethod
    def decode(cls, blob: bytes) -> "MergedContainer":
        if blob[:4] != _MAGIC:
            raise ValueError("not a merged container")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported container version {version}")
        (count,) = struct.unpack_from("<I", blob, 6)
        pos = 10
        members = []
        for _ in range(count):
            (url_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            url = blob[pos : pos + url_len].decode("utf-8")
            pos += url_len
            offset, length = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            members.append(MergedMember(url=url, offset=offset, length=length))
        return cls(members=members, payload=blob[pos:])


def merge(results: Iterable[tuple[str, bytes]]) -> MergedContainer:
    """Concatenate fetched sections into one container, members sorted by url."""
    items = sorted(results, key=lambda r: r[0])
    if not items:
        raise EmptyBatch("cannot merge an empty batch")
    seen = set()
    members = []
    chunks = []
    offset = 0
    for url, content in items:
        if url in seen:
            raise DuplicateMember(f"duplicate url {url!r} in merge batch")
        seen.add(url)
        members.append(MergedMember(url=url, offset=offset, length=len(content)))
        chunks.append(content)
        offset += len(content)
    return MergedContainer(members=members, payload=b"".join(chunks))


# -- worker cycle -------------------------------------------------------------


class WorkerOutcome(str, Enum):
    PROCESSED = "processed"
    IDLE = "idle"
    STALE = "stale"


@dataclass(frozen=True)
class WorkerResult:
    outcome: WorkerOutcome
    message_id: int | None = None
    fetched_bytes: int = 0
    new_urls: int = 0


@dataclass
class DownloadConfig:
    section: str
    namespace: str
    output_bucket: str
    completion_set: str
    parallelism: int = 20
    retry_limit: int = 3
    lease_ticks: int = 60
    key_prefix: str = "merged/"


def merged_key(prefix: str, message_id: int) -> str:
    return f"{prefix}{message_id:06d}"


def decode_url_list(payload: bytes) -> list[str]:
    urls = json.loads(payload.decode("utf-8"))["urls"]
    return [str(u) for u in urls]


def encode_url_list(urls: list[str]) -> bytes:
    return json.dumps({"urls": urls}, sort_keys=True).encode("utf-8")


def process_message(
    message_id: int,
    urls: list[str],
    fetcher,
    completions: CompletionSet,
    store: ObjectStore,
    config: DownloadConfig,
    stats: FetchStats | None = None,
) -> tuple[int, int]:
    """Apply one message's data-plane effects; returns (fetched_bytes, new_urls).

    Every url is recorded in the completion set and fetched only when the
    record was new; already-complete urls are skipped entirely, which makes
    redelivered messages side-effect free. The merged object key derives
    from the message id, so a replayed put lands identical bytes on the
    same key.
    """
    fresh = [url for url in urls if completions.record(url)]
    if not fresh:
        return (0, 0)
    results = fetch_batch(
        fetcher,
        fresh,
        config.section,
        parallelism=config.parallelism,
        retry_limit=config.retry_limit,
        stats=stats,
    )
    container = merge(results)
    store.put(
        config.namespace,
        config.output_bucket,
        merged_key(config.key_prefix, message_id),
        container.encode(),
    )
    fetched = sum(len(content) for _, content in results)
    return (fetched, len(fresh))


def download_worker_step(
    worker: str,
    queue: WorkQueue,
    store: ObjectStore,
    fetcher,
    completions: CompletionSet,
    config: DownloadConfig,
    now: int,
    stats: FetchStats | None = None,
) -> WorkerResult:
    """One full claim -> fetch -> merge -> put -> ack worker cycle."""
    message = queue.claim(worker, config.lease_ticks, now)
    if message is None:
        return WorkerResult(outcome=WorkerOutcome.IDLE)
    urls = decode_url_list(message.payload)
    fetched, new_urls = process_message(
        message.id, urls, fetcher, completions, store, config, stats=stats
    )
    try:
        queue.ack(message.id, worker)
    except (StaleLease, UnknownMessage):
        # another worker holds (or already finished) this message; our put
        # wrote the same bytes to the same key, so nothing is torn
        return WorkerResult(
            outcome=WorkerOutcome.STALE,
            message_id=message.id,
            fetched_bytes=fetched,
            new_urls=new_urls,
        )
    return WorkerResult(
        outcome=WorkerOutcome.PROCESSED,
        message_id=message.id,
        fetched_bytes=fetched,
        new_urls=new_urls,
    )
