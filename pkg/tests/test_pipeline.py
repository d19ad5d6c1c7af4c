import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from orchsim.demo import demo_cluster_dict, demo_pipeline_dict
from orchsim.errors import MissingInput, ParseError, RunFailed, ValidationError
from orchsim.faults import FaultEvent, FaultSchedule
from orchsim.pipeline import (
    Runner,
    parse_cluster_fixture,
    parse_spec,
    partition_even,
    validate,
)
from orchsim.transfer import MergedContainer

GB = 1_000_000_000


class TestPartitionEven:
    def test_case_study_sized_partition(self):
        sizes = partition_even(112_249, 50)
        assert sizes == [2245] * 49 + [2244]
        assert sum(sizes) == 112_249

    def test_identity(self):
        assert partition_even(10, 1) == [10]

    def test_zero_items(self):
        assert partition_even(0, 5) == [0, 0, 0, 0, 0]

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            partition_even(1, 0)

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(min_value=0, max_value=10**6), k=st.integers(min_value=1, max_value=10**3))
    def test_partition_properties(self, n, k):
        sizes = partition_even(n, k)
        assert sum(sizes) == n
        assert len(sizes) == k
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)


class TestParse:
    def test_demo_spec_parses_with_expected_kinds(self, demo_spec):
        assert [s.kind for s in demo_spec.steps] == [
            "queue_fanout",
            "single",
            "partitioned_fanout",
            "summary",
        ]
        assert demo_spec.queue.urls_per_message == 100
        assert demo_spec.catalog.files == 1000

    def test_duplicate_step_names(self):
        doc = demo_pipeline_dict()
        doc["steps"][1]["name"] = doc["steps"][0]["name"]
        with pytest.raises(ValidationError):
            parse_spec(json.dumps(doc))

    def test_unknown_field_rejected(self):
        doc = demo_pipeline_dict()
        doc["foo"] = 1
        with pytest.raises(ParseError):
            parse_spec(json.dumps(doc))

    def test_unknown_task_field_rejected(self):
        doc = demo_pipeline_dict()
        doc["steps"][0]["task"]["surprise"] = True
        with pytest.raises(ParseError):
            parse_spec(json.dumps(doc))

    def test_bad_json_reports_line(self):
        with pytest.raises(ParseError) as err:
            parse_spec(b'{\n  "name": oops\n}')
        assert err.value.line == 2

    def test_defaults_filled(self):
        doc = {
            "name": "mini",
            "namespace": "ns",
            "steps": [
                {
                    "name": "dl",
                    "kind": "queue_fanout",
                    "workers": 2,
                    "requests": {"cpu_millicores": 1000},
                    "task": {"output_bucket": "data"},
                }
            ],
        }
        spec = parse_spec(json.dumps(doc))
        assert spec.queue.lease_ticks == 60
        assert spec.steps[0].task["fetch_parallelism"] == 20
        assert spec.catalog.subset_section == "ivt"


class TestValidate:
    def test_demo_spec_is_clean(self, demo_spec, demo_fixture):
        assert validate(demo_spec, demo_fixture) == []

    def test_gpu_parallelism_warning(self, demo_spec):
        cluster = demo_cluster_dict()
        cluster["nodes"] = [n for n in cluster["nodes"] if n["gpu_count"] == 0] + [
            dict(n, gpu_count=6) for n in cluster["nodes"] if n["gpu_count"] > 0
        ]  # 7 nodes x 6 GPUs = 42 < 50
        fixture = parse_cluster_fixture(json.dumps(cluster))
        issues = validate(demo_spec, fixture)
        warnings = [i for i in issues if i.severity == "warning"]
        assert any("parallelism exceeds cluster GPU capacity" in i.message for i in warnings)

    def test_infeasible_template_is_error(self, demo_fixture):
        doc = demo_pipeline_dict()
        doc["steps"][2]["requests"]["gpu_count"] = 9  # largest node has 8
        spec = parse_spec(json.dumps(doc))
        issues = validate(spec, demo_fixture)
        assert any(i.severity == "error" and "no node can fit" in i.message for i in issues)

    def test_unproduced_input_bucket_is_error(self, demo_fixture):
        doc = demo_pipeline_dict()
        doc["steps"][1]["task"]["input_bucket"] = "nowhere"
        spec = parse_spec(json.dumps(doc))
        issues = validate(spec, demo_fixture)
        assert any("never produced" in i.message for i in issues)

    def test_run_refuses_broken_dataflow(self, demo_fixture):
        doc = demo_pipeline_dict()
        doc["steps"][2]["task"]["input_bucket"] = "nowhere"
        spec = parse_spec(json.dumps(doc))
        with pytest.raises(RunFailed):
            Runner(spec, demo_fixture, seed=1).run()


class TestDemoRun:
    def test_merged_object_count_matches_message_count(self, demo_spec, demo_run):
        expected = math.ceil(demo_spec.catalog.files / demo_spec.queue.urls_per_message)
        keys = demo_run.cluster.store.list("atmos", "archive", "merged/")
        assert len(keys) == expected == 10

    def test_step1_pod_accounting(self, demo_run):
        s1 = demo_run.summaries[0]
        assert s1.pods == 12  # 10 workers + queue pod + coordinator
        assert s1.cpus == 42
        assert s1.gpus == 0

    def test_summary_gpus_never_exceed_cluster_capacity(self, demo_run):
        total_gpus = sum(n.capacity.gpu_count for n in demo_run.cluster.nodes.values())
        assert all(s.gpus <= total_gpus for s in demo_run.summaries)

    def test_download_bytes_equal_subset_bytes(self, demo_run):
        assert demo_run.summaries[0].data_processed_bytes == demo_run.catalog.subset_bytes

    def test_inference_reads_exactly_the_archive(self, demo_run):
        assert (
            demo_run.summaries[2].data_processed_bytes
            == demo_run.summaries[0].data_processed_bytes
        )

    def test_every_url_lands_in_exactly_one_container(self, demo_run):
        store = demo_run.cluster.store
        seen = {}
        for key in store.list("atmos", "archive", "merged/"):
            container = MergedContainer.decode(store.get("atmos", "archive", key))
            for member in container.members:
                assert member.url not in seen
                seen[member.url] = key
        assert sorted(seen) == demo_run.catalog.urls()

    def test_model_and_predictions_exist(self, demo_run):
        store = demo_run.cluster.store
        assert store.list("atmos", "model") == ["model/weights"]
        assert len(store.list("atmos", "predictions", "pred/")) == 10
        assert store.list("atmos", "stats") == ["stats/summary.json"]

    def test_stats_object_lists_prior_steps(self, demo_run):
        store = demo_run.cluster.store
        stats = json.loads(store.get("atmos", "stats", "stats/summary.json"))
        assert [s["step"] for s in stats["steps"]] == ["download", "train", "inference"]

    def test_summary_step_reports_na_duration(self, demo_run):
        assert demo_run.summaries[3].total_ticks == 0
        assert demo_run.report.table.splitlines()[-1].endswith("NA")

    def test_report_json_round_trip(self, demo_run):
        from orchsim.pipeline import RunReport

        text = demo_run.report.to_json()
        again = RunReport.from_json(text)
        assert again.to_json() == text


class TestDeterminismAndFaults:
    def test_same_seed_same_digest(self, demo_spec, demo_fixture, demo_run):
        other = Runner(demo_spec, demo_fixture, seed=42).run()
        assert other.report.digest == demo_run.report.digest
        assert other.report.to_json() == demo_run.report.to_json()

    def test_different_seed_different_data(self, demo_spec, demo_fixture, demo_run):
        other = Runner(demo_spec, demo_fixture, seed=43).run()
        assert other.report.data_digest != demo_run.report.data_digest

    def test_faulted_run_matches_data_digest(self, demo_spec, demo_fixture, demo_run):
        s1 = demo_run.summaries[0]
        kill_tick = 1 + max(1, round(0.3 * s1.total_ticks))
        faults = FaultSchedule(
            events=[
                FaultEvent(tick=kill_tick, kind="pod_kill", target="atmos/download-0"),
                FaultEvent(tick=kill_tick + 1, kind="node_offline", target="gpu-01"),
            ]
        )
        faulted = Runner(demo_spec, demo_fixture, seed=42, faults=faults).run()
        assert faulted.report.data_digest == demo_run.report.data_digest
        assert faulted.report.total_ticks > demo_run.report.total_ticks
        assert len(faulted.report.fault_events_applied) == 2
        # replacements mean more distinct pods ran in step 1
        assert faulted.summaries[0].pods > demo_run.summaries[0].pods

    def test_transfer_faults_are_retried_transparently(self, demo_spec, demo_fixture, demo_run):
        faults = FaultSchedule(events=[FaultEvent(tick=1, kind="transfer_fault_rate", value=0.05)])
        flaky = Runner(demo_spec, demo_fixture, seed=42, faults=faults).run()
        assert flaky.report.data_digest == demo_run.report.data_digest

    def test_identical_faulted_runs_reproduce_exactly(self, demo_spec, demo_fixture):
        def faulted():
            faults = FaultSchedule(
                events=[
                    FaultEvent(tick=3, kind="pod_kill", target="atmos/download-0"),
                    FaultEvent(tick=4, kind="node_offline", target="gpu-01"),
                ]
            )
            return Runner(demo_spec, demo_fixture, seed=42, faults=faults).run()

        assert faulted().report.to_json() == faulted().report.to_json()


class TestRunStep:
    def test_stepwise_fold_reproduces_full_run(self, demo_spec, demo_fixture, demo_run, tmp_path):
        state = None
        summaries = []
        last = None
        for i, step in enumerate(demo_spec.steps):
            out = tmp_path / f"state-{i}"
            runner = Runner(demo_spec, demo_fixture, seed=42)
            last = runner.run_step(step.name, pre_state=state, out_state=out)
            summaries.append(last.summaries[0])
            state = out
        assert [s.to_dict() for s in summaries] == [s.to_dict() for s in demo_run.summaries]
        assert last.report.data_digest == demo_run.report.data_digest
        # even the emitted stats object is byte-identical to the full run's
        assert (
            last.cluster.store.stat("atmos", "stats", "stats/summary.json").etag
            == demo_run.cluster.store.stat("atmos", "stats", "stats/summary.json").etag
        )

    def test_run_step_with_empty_prestate_raises_missing_input(
        self, demo_spec, demo_fixture, tmp_path
    ):
        runner = Runner(demo_spec, demo_fixture, seed=42)
        with pytest.raises(MissingInput):
            runner.run_step("inference", pre_state=tmp_path / "empty", out_state=None)

    def test_download_step_twice_same_seed_same_etags(self, demo_spec, demo_fixture, tmp_path):
        etags = []
        for attempt in range(2):
            runner = Runner(demo_spec, demo_fixture, seed=7)
            result = runner.run_step("download", out_state=tmp_path / f"s{attempt}")
            store = result.cluster.store
            etags.append(
                [store.stat("atmos", "archive", k).etag for k in store.list("atmos", "archive")]
            )
        assert etags[0] == etags[1]


def test_slow_workers_survive_lease_expiry():
    """Transfer windows longer than the lease redeliver messages, yet every
    url is fetched exactly once and each merged key holds stable bytes."""
    doc = demo_pipeline_dict()
    doc["catalog"]["files"] = 60
    doc["catalog"]["total_bytes"] = 600_000
    doc["queue"] = {"urls_per_message": 20, "lease_ticks": 2, "retry_limit": 3}
    doc["steps"] = [doc["steps"][0]]
    doc["steps"][0]["workers"] = 3
    doc["steps"][0]["task"]["bandwidth_bytes_per_tick"] = 1000  # ~5-6 tick windows
    spec = parse_spec(json.dumps(doc))
    fixture = parse_cluster_fixture(json.dumps(demo_cluster_dict()))
    result = Runner(spec, fixture, seed=3).run()

    queue = result.cluster.queues.queue("atmos", "url-batches")
    assert queue.counts()["Done"] == queue.total_pushed == 3
    assert any(m.delivery_count > 1 for m in queue.messages())  # expiry really hit
    cset = result.cluster.queues.completion_set("atmos", "downloaded")
    assert cset.true_count == len(cset) == 60
    total_payload = 0
    store = result.cluster.store
    for key in store.list("atmos", "archive"):
        total_payload += len(MergedContainer.decode(store.get("atmos", "archive", key)).payload)
    assert total_payload == result.catalog.subset_bytes


def test_gpu_starvation_fails_with_diagnosis():
    cluster = {
        "nodes": [
            {"name": "gpu-solo", "cpu_millicores": 24000, "gpu_count": 8, "memory_bytes": 96 * GB},
            {"name": "dtn-01", "cpu_millicores": 24000, "gpu_count": 0, "memory_bytes": 96 * GB},
        ],
        "namespaces": [{"name": "atmos", "admin": "pi"}],
    }
    doc = demo_pipeline_dict()
    doc["catalog"]["files"] = 100
    doc["catalog"]["total_bytes"] = 1_000_000
    doc["queue"]["urls_per_message"] = 50
    doc["stall_limit"] = 30
    doc["steps"][0]["workers"] = 2
    doc["steps"][2]["workers"] = 4
    spec = parse_spec(json.dumps(doc))
    fixture = parse_cluster_fixture(json.dumps(cluster))
    faults = FaultSchedule(events=[FaultEvent(tick=1, kind="node_offline", target="gpu-solo")])
    with pytest.raises(RunFailed) as err:
        Runner(spec, fixture, seed=1, faults=faults).run()
    assert err.value.step == "train"
    assert "no feasible node" in err.value.reason
