from __future__ import annotations

import shutil

import pytest

from bip.audit import audit_traceability, values_match
from bip.canonical import canonical_json, iter_jsonl
from bip.errors import MissingArtifact


@pytest.fixture()
def run_copy(funnel_run, tmp_path):
    out = tmp_path / "run"
    shutil.copytree(funnel_run.out_dir, out)
    return out


def test_full_audit_passes(run_copy, funnel_run):
    report = audit_traceability(run_copy, sample_size=10_000)
    assert len(report.sampled) == len(funnel_run.store)
    assert report.rate == 1.0, report.mismatches


def test_sampling_is_seeded(run_copy):
    a = audit_traceability(run_copy, sample_size=5, seed=1)
    assert len(a.sampled) == 5
    assert a.sampled == audit_traceability(run_copy, sample_size=5, seed=1).sampled
    with pytest.raises(ValueError):
        audit_traceability(run_copy, sample_size=0)


def test_corrupted_fact_detected(run_copy):
    path = run_copy / "facts.jsonl"
    rows = list(iter_jsonl(path))
    victim = next(r for r in rows if r["predicate"] == "is_activation_driver_for")
    victim["evidence"]["lift"] += 1.0
    path.write_text("".join(canonical_json(r) + "\n" for r in rows))
    report = audit_traceability(run_copy, sample_size=10_000)
    assert report.mismatches == (victim["fact_id"],)
    (bad,) = [r for r in report.results if not r.matched]
    assert "lift" in bad.mismatched_keys


def test_missing_artifacts(tmp_path):
    with pytest.raises(MissingArtifact):
        audit_traceability(tmp_path)


def test_values_match():
    assert values_match(1, 1.0)
    assert values_match(0.1 + 0.2, 0.3)
    assert not values_match(True, 1)
    assert not values_match(0.5, 0.51)
    assert values_match("a", "a") and not values_match("a", "b")
