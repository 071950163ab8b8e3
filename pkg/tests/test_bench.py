import json

import pytest

from pcpad.bench import bench
from pcpad.cli import main
from pcpad.model import border_cnn

@pytest.mark.bench
def test_cached_iterations_not_slower_than_first():
    res = bench(border_cnn(width=8, size=64), iters=10)
    assert res["cache_misses"] > 0 and res["cache_hits"] > 0
    # 5% noise margin on the cache effect
    assert res["cached_iter_mean_ms"] <= 1.05 * res["first_iter_ms"]


@pytest.mark.bench
def test_zero_timings_stable_between_runs():
    spec = border_cnn(width=8, size=64)
    a = bench(spec, iters=20)["zero_iter_mean_ms"]
    b = bench(spec, iters=20)["zero_iter_mean_ms"]
    assert abs(a - b) <= 0.2 * max(a, b)


def test_bench_rejects_single_iteration():
    with pytest.raises(ValueError):
        bench(border_cnn(), iters=1)


def test_bench_command_json(capsys):
    assert main(["bench", "--iters", "3", "--size", "16", "--width", "4"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert {"first_iter_ms", "cached_iter_mean_ms", "ratio"} <= set(res)
