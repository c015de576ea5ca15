from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import RESULTS  # noqa: E402
from corpus import rich_config, rich_events, rich_window_ends  # noqa: E402

from bip.config import default_config_path, load_config  # noqa: E402
from bip.domain import DAY, resolve_window  # noqa: E402
from bip.pipeline import run_pipeline  # noqa: E402
from bip.simulate import example_funnel_spec, simulate_events  # noqa: E402

FUNNEL_JOURNEYS = 50_000


@pytest.fixture(scope="session")
def funnel_spec():
    return example_funnel_spec()


@pytest.fixture(scope="session")
def funnel_chain(funnel_spec):
    return funnel_spec.chain()


@pytest.fixture(scope="session")
def default_config():
    return load_config(default_config_path())


@pytest.fixture(scope="session")
def funnel_events(funnel_spec):
    records, _ = simulate_events(funnel_spec, FUNNEL_JOURNEYS)
    return records


@pytest.fixture(scope="session")
def funnel_run(tmp_path_factory, default_config, funnel_events):
    out = tmp_path_factory.mktemp("funnel")
    return run_pipeline(default_config, funnel_events, out)


@pytest.fixture(scope="session")
def rich_runs(tmp_path_factory):
    """Weekly runs over the rich corpus into one output directory, so the fact log accumulates."""
    out = tmp_path_factory.mktemp("rich")
    cfg = rich_config()
    events = rich_events(per_week=1_500)
    results = []
    for end in rich_window_ends():
        # a run reads its window and the one before it
        lo = end - 2 * cfg.window_days * DAY
        window_events = [r for r in events if lo <= _ts(r) < end]
        results.append(run_pipeline(cfg, window_events, out, resolve_window(end, cfg.window_days * DAY)))
    return out, results


_TS_CACHE: dict[str, int] = {}


def _ts(record) -> int:
    from bip.domain import parse_timestamp

    t = record["timestamp"]
    if t not in _TS_CACHE:
        _TS_CACHE[t] = parse_timestamp(t)
    return _TS_CACHE[t]



def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, title, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
