import json
import threading
import urllib.request

import pytest

from orchsim.catalog_server import make_server
from orchsim.demo import demo_cluster_dict, demo_pipeline_dict
from orchsim.errors import UnknownSection, UnknownSource
from orchsim.pipeline import Runner, parse_cluster_fixture, parse_spec
from orchsim.seeding import derive_seed
from orchsim.transfer import HttpFetcher, build_catalog


@pytest.fixture()
def seeded_dir(tmp_path):
    catalog = build_catalog(
        files=40,
        sections={"ivt": 0.5407, "other": 0.4593},
        total_bytes=400_000,
        subset_section="ivt",
        seed=derive_seed(5, "catalog"),
    )
    (tmp_path / "manifest.json").write_text(json.dumps(catalog.manifest_dict(), sort_keys=True))
    for obj in catalog.objects:
        d = tmp_path / "files" / obj.url
        d.mkdir(parents=True)
        for section in obj.sections:
            (d / section).write_bytes(catalog.section_content(obj.url, section))
    return tmp_path, catalog


@pytest.fixture()
def live_server(seeded_dir):
    root, catalog = seeded_dir
    server = make_server(root, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base, catalog
    server.shutdown()
    server.server_close()


def test_served_bytes_match_catalog(live_server):
    base, catalog = live_server
    url = catalog.urls()[3]
    fetched = urllib.request.urlopen(f"{base}/files/{url}?section=ivt").read()
    assert fetched == catalog.section_content(url, "ivt")


def test_unknown_file_is_404(live_server):
    base, _ = live_server
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(f"{base}/files/ghost.nc?section=ivt")
    assert err.value.code == 404


def test_http_fetcher_contract(live_server):
    base, catalog = live_server
    fetcher = HttpFetcher(base)
    url = catalog.urls()[0]
    assert fetcher.subset_fetch(url, "ivt") == catalog.section_content(url, "ivt")
    with pytest.raises(UnknownSource):
        fetcher.subset_fetch("ghost.nc", "ivt")
    with pytest.raises(UnknownSection):
        fetcher.subset_fetch(url, "ghost")


def test_integration_mode_matches_sim_digest(live_server):
    """The loopback server and the in-process fetcher satisfy one contract."""
    base, _ = live_server
    doc = demo_pipeline_dict()
    doc["catalog"]["files"] = 40
    doc["catalog"]["total_bytes"] = 400_000
    doc["queue"]["urls_per_message"] = 10
    doc["steps"][0]["workers"] = 2
    doc["steps"][2]["workers"] = 4
    spec = parse_spec(json.dumps(doc))
    fixture = parse_cluster_fixture(json.dumps(demo_cluster_dict()))
    sim = Runner(spec, fixture, seed=5, mode="sim").run()
    integration = Runner(spec, fixture, seed=5, mode="integration", catalog_url=base).run()
    assert integration.report.data_digest == sim.report.data_digest
