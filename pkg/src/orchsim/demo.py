"""Bundled desk-scale demo fixtures: a 10-node cluster and a 4-step pipeline.

The cluster mixes seven 8-GPU nodes with three CPU-only transfer nodes; the
pipeline downloads a 1,000-file synthetic archive through a 10-worker queue
fan-out, trains on a sampled container, fans inference out over 50
single-GPU workers, and emits a stats summary.
"""

from __future__ import annotations

GB = 1_000_000_000


def demo_cluster_dict() -> dict:
    nodes = []
    for i in range(1, 8):
        nodes.append(
            {
                "name": f"gpu-{i:02d}",
                "cpu_millicores": 24000,
                "gpu_count": 8,
                "memory_bytes": 96 * GB,
                "labels": {"pool": "gpu"},
            }
        )
    for i in range(1, 4):
        nodes.append(
            {
                "name": f"dtn-{i:02d}",
                "cpu_millicores": 24000,
                "gpu_count": 0,
                "memory_bytes": 96 * GB,
                "labels": {"pool": "transfer"},
            }
        )
    return {
        "nodes": nodes,
        "namespaces": [
            {
                "name": "atmos",
                "admin": "pi",
                "quota": {
                    "cpu_millicores": 100_000,
                    "gpu_count": 50,
                    "memory_bytes": 1000 * GB,
                },
            }
        ],
    }


def demo_pipeline_dict() -> dict:
    return {
        "name": "segmentation-demo",
        "namespace": "atmos",
        "catalog": {
            "files": 1000,
            "sections": {"ivt": 0.5407, "other": 0.4593},
            "total_bytes": 50_000_000,
            "subset_section": "ivt",
        },
        "queue": {"urls_per_message": 100, "lease_ticks": 60, "retry_limit": 3},
        "steps": [
            {
                "name": "download",
                "kind": "queue_fanout",
                "workers": 10,
                "requests": {
                    "cpu_millicores": 4000,
                    "gpu_count": 0,
                    "memory_bytes": 20 * GB,
                },
                "task": {
                    "output_bucket": "archive",
                    "fetch_parallelism": 20,
                    "bandwidth_bytes_per_tick": 500_000,
                },
            },
            {
                "name": "train",
                "kind": "single",
                "workers": 1,
                "requests": {
                    "cpu_millicores": 1000,
                    "gpu_count": 1,
                    "memory_bytes": 16 * GB,
                },
                "task": {
                    "input_bucket": "archive",
                    "output_bucket": "model",
                    "ticks": 30,
                    "sample_containers": 1,
                },
            },
            {
                "name": "inference",
                "kind": "partitioned_fanout",
                "workers": 50,
                "requests": {
                    "cpu_millicores": 1000,
                    "gpu_count": 1,
                    "memory_bytes": 12 * GB,
                },
                "task": {
                    "input_bucket": "archive",
                    "model_bucket": "model",
                    "output_bucket": "predictions",
                    "ticks_per_item": 5,
                },
            },
            {
                "name": "summarize",
                "kind": "summary",
                "workers": 1,
                "requests": {
                    "cpu_millicores": 1000,
                    "gpu_count": 1,
                    "memory_bytes": 4 * GB,
                },
                "task": {
                    "input_bucket": "predictions",
                    "output_bucket": "stats",
                },
            },
        ],
    }
