"""Python bindings for the dfsd incremental-learning engine."""

import json

from ._core import (
    allocate_counts,
    check_gradients,
    earth_movers,
    generate_task,
    sym_kl,
    temp_softmax,
    update_weights,
)

__all__ = [
    "allocate_counts",
    "check_gradients",
    "earth_movers",
    "generate_task",
    "run_stream",
    "sym_kl",
    "temp_softmax",
    "update_weights",
]


def run_stream(config, out_dir=None, progress=None):
    """Train a task stream from a config dict and return the report as a dict.

    When out_dir is given, report.json, accuracy.csv and emd_flows.csv are
    written there as well.
    """
    from ._core import run_stream_json

    text = run_stream_json(json.dumps(config), str(out_dir) if out_dir else "", progress)
    return json.loads(text)
