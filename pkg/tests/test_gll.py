from __future__ import annotations

import json
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from helpers import window

from bip.bkg import FactStore, make_fact
from bip.errors import ConfigError, GenerationFailed, NoFacts, NoRelevantFacts, UnvalidatedBundle
from bip.gll.bundle import BundleLimits, assemble_bundle, build_fact_bundle
from bip.gll.client import HttpTextClient
from bip.gll.faithfulness import check_faithfulness, extract_numbers
from bip.gll.grounding import check_lift, validate_grounding
from bip.gll.narrative import ExternalGenerator, load_prompt, render_narrative, template_text
from bip.gll.query import JourneySnapshotRef, answer_query, resolve_scope, score_facts, snapshot_index, tokenize

PROV = {"snapshot_id": "snap-1", "detector": "ActivationDriver", "detector_version": "1.0.0", "finding_id": "find-1"}


class FakeClient:
    client_id = "fake"

    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def generate(self, prompt, params):
        self.prompts.append(prompt)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


@pytest.fixture(scope="module")
def driver(funnel_run):
    (finding,) = [f for f in funnel_run.findings
                  if f.predicate == "is_activation_driver_for" and f.subject == "state:import_data"]
    bundle = build_fact_bundle(finding, funnel_run.store)
    return finding, bundle


def _bundle(**ev):
    evidence = {"kind": "activation_driver", "sample_size": 500, "p_reached": 0.6, "p_not_reached": 0.03,
                "lift": 20.0, "reach_rate": 0.25, "removal_effect": 0.14, **ev}
    fact = make_fact("state:import_data", "is_activation_driver_for", "outcome:converted", (0.95, "High"),
                     window(0), evidence, PROV)
    return assemble_bundle("find-1", fact, [], BundleLimits())


# -- bundles -----------------------------------------------------------------


def test_bundle_primary_first_and_bounded(driver, funnel_run):
    finding, bundle = driver
    assert bundle.primary_fact.subject == finding.subject
    assert bundle.primary_fact.provenance["finding_id"] == finding.finding_id
    assert 1 <= len(bundle.facts) <= 8
    assert len({f.fact_id for f in bundle.facts}) == len(bundle.facts)
    small = build_fact_bundle(finding, funnel_run.store, BundleLimits(max_facts=2))
    assert len(small.facts) == 2
    assert build_fact_bundle(finding, funnel_run.store).bundle_id == bundle.bundle_id
    assert bundle.rendered_context.splitlines()[:3] == [
        "Finding: activation_driver", 'State: "import_data"', "Predicate: is_activation_driver_for"]


def test_bundle_requires_stored_fact(driver):
    finding, _ = driver
    with pytest.raises(NoFacts):
        build_fact_bundle(finding, FactStore())
    with pytest.raises(ValueError):
        BundleLimits(max_facts=0)


# -- grounding ---------------------------------------------------------------


def test_grounding_passes_on_pipeline_bundle(driver):
    _, bundle = driver
    report = validate_grounding(bundle, 100)
    assert report.overall, report.to_dict()


def test_grounding_rejects_bad_values():
    assert not validate_grounding(_bundle(p_reached=1.2, lift=40.0), 100).overall
    assert not validate_grounding(_bundle(lift=25.0), 100).overall
    assert not validate_grounding(_bundle(sample_size=10), 100).overall
    assert not validate_grounding(_bundle(removal_effect=1.5), 100).overall


def test_lift_display_rounding_tolerated():
    ok, rounded, _ = check_lift({"lift": 20.0, "p_reached": 0.58, "p_not_reached": 0.0288})
    assert ok and rounded
    ok, rounded, _ = check_lift({"lift": 20.0, "p_reached": 0.6, "p_not_reached": 0.03})
    assert ok and not rounded


# -- faithfulness ------------------------------------------------------------


def test_number_extraction():
    toks = extract_numbers("lift 20.1x, reach 25%, v2.3 shipped, step_2 and 1,200 users fell 18pp")
    assert [(t.text, t.value) for t in toks] == [
        ("20.1x", 20.1), ("25%", 0.25), ("1,200", 1200.0), ("18pp", 0.18)]


def test_faithfulness_checks():
    bundle = _bundle()
    assert check_faithfulness("Lift is 20.0 and reach is 25%.", bundle).faithful
    assert not check_faithfulness("Lift is 73.19.", bundle).faithful
    report = check_faithfulness("Importing data causes conversion.", bundle)
    assert report.forbidden == ("causes",) and not report.faithful


# -- narratives --------------------------------------------------------------


def test_template_narrative_is_grounded(driver):
    _, bundle = driver
    report = validate_grounding(bundle, 100)
    narrative = render_narrative(bundle, report)
    assert narrative.generator == {"type": "template"}
    assert check_faithfulness(narrative.text, bundle).faithful
    assert "Recommendation:" in narrative.text
    assert narrative.text == template_text(bundle)


def test_gate_blocks_unvalidated_bundles(driver):
    _, bundle = driver
    with pytest.raises(UnvalidatedBundle):
        render_narrative(bundle, None)
    bad = _bundle(lift=25.0)
    with pytest.raises(UnvalidatedBundle):
        render_narrative(bad, validate_grounding(bad, 100))
    with pytest.raises(UnvalidatedBundle):
        render_narrative(bundle, replace(validate_grounding(bundle, 100), bundle_id="bundle-other"))


def test_external_generator_faithful_output(driver):
    _, bundle = driver
    client = FakeClient(["Reaching import data is associated with higher conversion."])
    narrative = render_narrative(bundle, validate_grounding(bundle, 100), ExternalGenerator(client))
    assert narrative.generator["type"] == "external"
    assert narrative.generator["prompt"] == "narrative_prompt_v1"
    assert bundle.rendered_context in client.prompts[0]


def test_external_unfaithful_output_falls_back(driver):
    _, bundle = driver
    client = FakeClient(["It causes conversion."] * 3)
    narrative = render_narrative(bundle, validate_grounding(bundle, 100), ExternalGenerator(client, retries=2))
    assert narrative.generator["type"] == "template"
    assert narrative.generator["fallback_from"]["client_id"] == "fake"
    assert len(client.prompts) == 3


def test_external_retry_then_success(driver):
    _, bundle = driver
    client = FakeClient([TimeoutError("slow"), "Import data matters."])
    narrative = render_narrative(bundle, validate_grounding(bundle, 100), ExternalGenerator(client))
    assert narrative.text == "Import data matters."


def test_external_exceptions_raise(driver):
    _, bundle = driver
    client = FakeClient([RuntimeError("down")] * 3)
    with pytest.raises(GenerationFailed):
        render_narrative(bundle, validate_grounding(bundle, 100), ExternalGenerator(client))


def test_prompt_asset_has_context_slot():
    assert "{context}" in load_prompt()


# -- HTTP client -------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        reply = {"text": f"echo {body['params']['temperature']} {self.headers.get('Authorization')}"}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_http_client_round_trip():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/generate"
        client = HttpTextClient.from_env({"BIP_LLM_ENDPOINT": url, "BIP_LLM_TOKEN": "t0k"})
        assert client.generate("hi", {"temperature": 0.0}) == "echo 0.0 Bearer t0k"
    finally:
        server.shutdown()
    with pytest.raises(GenerationFailed):
        HttpTextClient(url, timeout=0.5).generate("hi", {})
    with pytest.raises(ConfigError):
        HttpTextClient.from_env({})


# -- query -------------------------------------------------------------------


def test_tokenize_drops_stopwords():
    assert tokenize("What drives import_data in the onboarding?") == ["drives", "import", "data", "onboarding"]


def test_resolve_scope():
    refs = [JourneySnapshotRef("s1", "onboarding", window(0)), JourneySnapshotRef("s2", "onboarding", window(1)),
            JourneySnapshotRef("s3", "billing", window(0))]
    assert resolve_scope("anything", refs)[2] == {"s2"}
    assert resolve_scope("billing conversion", refs)[2] == {"s3"}
    assert resolve_scope("onboarding on 2024-01-03", refs)[2] == {"s1"}
    with pytest.raises(NoRelevantFacts):
        resolve_scope("x", [])


def test_score_facts_ranks_by_overlap(driver, funnel_run):
    scored = score_facts("import data activation driver", list(funnel_run.store))
    assert scored[0][0].subject == "state:import_data"
    assert scored[0][0].predicate == "is_activation_driver_for"


def test_answer_query(funnel_run):
    index = snapshot_index({funnel_run.snapshot.snapshot_id: funnel_run.snapshot})
    answer = answer_query("Which step is an activation driver for conversion?", funnel_run.store, index, 100)
    assert answer.bundle.primary_fact.predicate == "is_activation_driver_for"
    assert answer.bundle.primary_fact.subject == "state:import_data"
    assert answer.grounding.overall and answer.narrative is not None
    assert answer.to_dict()["ranked_facts"]
    with pytest.raises(NoRelevantFacts):
        answer_query("zebra quantum", funnel_run.store, index, 100)
