"""Grounded language layer: fact bundles, grounding checks, narratives, faithfulness and queries."""

from __future__ import annotations

from bip.gll.bundle import BundleLimits, FactBundle, build_fact_bundle, fmt, render_context
from bip.gll.client import HttpTextClient
from bip.gll.faithfulness import FORBIDDEN_LEXICON, FaithfulnessReport, check_faithfulness, extract_numbers
from bip.gll.grounding import GroundingReport, validate_grounding
from bip.gll.narrative import ExternalGenerator, Narrative, render_narrative, template_text
from bip.gll.query import JourneySnapshotRef, QueryAnswer, answer_query, snapshot_index, tokenize

__all__ = [
    "FORBIDDEN_LEXICON",
    "BundleLimits",
    "ExternalGenerator",
    "FactBundle",
    "FaithfulnessReport",
    "GroundingReport",
    "HttpTextClient",
    "JourneySnapshotRef",
    "Narrative",
    "QueryAnswer",
    "answer_query",
    "build_fact_bundle",
    "check_faithfulness",
    "extract_numbers",
    "fmt",
    "render_context",
    "render_narrative",
    "snapshot_index",
    "template_text",
    "tokenize",
    "validate_grounding",
]
