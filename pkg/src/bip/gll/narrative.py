"""Constrained narrative generation: deterministic templates, or an external text generator behind a gate."""

from __future__ import annotations

import threading
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Protocol

from bip.bkg import BehavioralFact
from bip.canonical import content_hash
from bip.domain import format_timestamp
from bip.errors import GenerationFailed, UnvalidatedBundle
from bip.gll.bundle import FactBundle, display_name, fmt
from bip.gll.faithfulness import FORBIDDEN_LEXICON, check_faithfulness
from bip.gll.grounding import GroundingReport

PROMPT_VERSION = "narrative_prompt_v1"

RECOMMENDATIONS = {
    "is_activation_driver_for": "test onboarding changes that bring more users to {s} sooner, "
                                "and measure the result with a controlled experiment.",
    "necessary_for_conversion": "protect {s} from friction and monitor its completion rate closely.",
    "is_dropoff_point_for": "review the experience at {s} for friction and instrument why users exit there.",
    "regressed_after": "review the changes shipped in {o} that touch this step and consider a rollback test.",
    "changed_after": "check recent releases and experiments that touch this transition.",
    "diverges_from": "compare the {s} and {o} experiences step by step and prioritize the largest gap.",
    "more_common_in": "investigate what differs for segment {o} around {s}.",
    "less_common_in": "investigate what differs for segment {o} around {s}.",
    "exhibits_loop": "inspect why users return to {s} and simplify the step that sends them back.",
    "is_fast_path_to": "guide more users along this path, for example with contextual prompts.",
    "is_optimization_target": "shorten or simplify this path for the users who take it.",
    "transitions_to": "monitor this transition as part of the funnel.",
    "associated_with": "monitor this association over the next windows.",
    "increases_probability_of": "monitor this association over the next windows.",
}


def _f(ev: Mapping[str, Any], key: str) -> str:
    return fmt(ev[key])


def _activation(fact: BehavioralFact) -> str:
    ev, s, o = fact.evidence, display_name(fact.subject), display_name(fact.object)
    if fact.predicate == "necessary_for_conversion":
        return (f"Every {o} journey in this window passed through {s}: {_f(ev, 'p_reached')} of journeys "
                f"that reached it converted versus {_f(ev, 'p_not_reached')} of those that did not.")
    return (f"Reaching {s} is associated with a higher {o} rate: {_f(ev, 'p_reached')} among journeys that "
            f"reached it versus {_f(ev, 'p_not_reached')} among those that did not, a lift of "
            f"{_f(ev, 'lift')}. Without {s} in the journey graph the modeled {o} probability is "
            f"{_f(ev, 'removal_effect')} lower, and {_f(ev, 'reach_rate')} of journeys reach it.")


def _dropoff(fact: BehavioralFact) -> str:
    ev = fact.evidence
    where = ev["members"].replace(",", ", ") if "members" in ev else display_name(fact.subject)
    return (f"Journeys at {where} are more likely to end in {display_name(fact.object)}: exit probability "
            f"{_f(ev, 'exit_probability')} against {_f(ev, 'baseline_exit')} at other steps.")


def _regression(fact: BehavioralFact) -> str:
    ev = fact.evidence
    when = f"release {display_name(fact.object)}" if fact.predicate == "regressed_after" else "the previous window"
    text = (f"The {ev['src']} to {ev['dst']} transition probability fell from {_f(ev, 'p_prev')} to "
            f"{_f(ev, 'p_curr')} (change {_f(ev, 'delta')}) after {when}.")
    if ev.get("ambiguous"):
        text += " Several releases shipped in the window, so the change is not tied to one of them."
    return text


def _divergence(fact: BehavioralFact) -> str:
    ev = fact.evidence
    return (f"Segment {ev['segment_a']} diverges from segment {ev['segment_b']}: the reach-weighted "
            f"Jensen-Shannon divergence of their transition distributions is {_f(ev, 'jsd')}, with conversion "
            f"rates of {_f(ev, 'conv_a')} and {_f(ev, 'conv_b')}.")


def _reach_difference(fact: BehavioralFact) -> str:
    ev = fact.evidence
    word = "more" if fact.predicate == "more_common_in" else "less"
    return (f"{display_name(ev['entity'])} is {word} common in segment {ev['segment_a']} than in segment "
            f"{ev['segment_b']}: reach {_f(ev, 'reach_a')} versus {_f(ev, 'reach_b')}.")


def _loop(fact: BehavioralFact) -> str:
    ev = fact.evidence
    text = (f"Journeys that reach {ev['state']} visit it {_f(ev, 'mean_visits')} times on average, and "
            f"{_f(ev, 'affected_fraction')} of journeys come back to it")
    if ev["back_edge_from"]:
        text += f", most often from {ev['back_edge_from']}"
    return text + "."


def _path(fact: BehavioralFact) -> str:
    ev = fact.evidence
    route = " then ".join(ev["path"].split("|", 1)[0].split(">"))
    if ev["kind"] == "fast_path":
        return (f"The path {route} is a fast path to {display_name(fact.object)}: conversion rate "
                f"{_f(ev, 'conversion_rate')} over {_f(ev, 'length')} steps, with relative quality "
                f"{_f(ev, 'relative_quality')}.")
    return (f"The path {route} is common but slow: {_f(ev, 'occurrence')} journeys took it, with conversion "
            f"rate {_f(ev, 'conversion_rate')} and relative quality {_f(ev, 'relative_quality')}.")


def _supporting_sentence(fact: BehavioralFact) -> str:
    ev, s, o = fact.evidence, display_name(fact.subject), display_name(fact.object)
    if ev.get("kind") == "transition":
        return f"{s} moves on to {o} with probability {_f(ev, 'p')}."
    if ev.get("kind") == "exit_probability":
        return f"{s} is a drop-off point toward {o} with exit probability {_f(ev, 'p_dropoff')}."
    return fact.summary + "."


_BODIES: dict[str, Callable[[BehavioralFact], str]] = {
    "activation_driver": _activation,
    "dropoff_point": _dropoff,
    "dropoff_cluster": _dropoff,
    "regression": _regression,
    "segment_divergence": _divergence,
    "reach_difference": _reach_difference,
    "repeated_visit": _loop,
    "fast_path": _path,
    "optimization_target": _path,
}


def template_text(bundle: FactBundle, max_supporting: int = 3) -> str:
    primary = bundle.primary_fact
    ev = primary.evidence
    body = _BODIES.get(ev.get("kind", ""))
    lines = [body(primary) if body else _supporting_sentence(primary)]
    lines.append(f"Confidence is {primary.confidence[1]} with a sample size of {fmt(ev['sample_size'])}.")
    lines += [_supporting_sentence(f) for f in bundle.supporting_facts[:max_supporting]]
    rec = RECOMMENDATIONS.get(primary.predicate, "monitor this finding over the next windows.")
    lines.append("Recommendation: " + rec.format(s=display_name(primary.subject), o=display_name(primary.object)))
    return "\n".join(lines)


@dataclass(frozen=True)
class Narrative:
    finding_id: str
    text: str
    generator: Mapping[str, Any]
    bundle_id: str
    created_at: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "finding_id": self.finding_id,
            "text": self.text,
            "generator": dict(self.generator),
            "bundle_id": self.bundle_id,
            "created_at": format_timestamp(self.created_at),
        }


class TextClient(Protocol):
    client_id: str

    def generate(self, prompt: str, params: Mapping[str, Any]) -> str: ...


def load_prompt() -> str:
    return resources.files("bip.gll").joinpath("assets", f"{PROMPT_VERSION}.txt").read_text(encoding="utf-8")


@dataclass
class ExternalGenerator:
    """Sends the fixed prompt plus the rendered context; output must pass the faithfulness check."""

    client: TextClient
    params: Mapping[str, Any] = field(default_factory=lambda: {"temperature": 0.0, "max_tokens": 400})
    retries: int = 2
    _gate: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def describe(self) -> dict[str, Any]:
        return {"type": "external", "client_id": self.client.client_id, "model_params": dict(self.params),
                "prompt": PROMPT_VERSION}


def _check_gate(bundle: FactBundle, report: GroundingReport | None) -> None:
    if report is None or report.bundle_id != bundle.bundle_id or not report.overall:
        raise UnvalidatedBundle(f"bundle {bundle.bundle_id} has not passed grounding validation")


def _created_at(bundle: FactBundle) -> int:
    return bundle.primary_fact.validity_window.end


def render_narrative(
    bundle: FactBundle, report: GroundingReport | None, generator: ExternalGenerator | None = None
) -> Narrative:
    """Template narrative by default. External output failing faithfulness is retried, then replaced by the template."""
    _check_gate(bundle, report)
    if generator is None:
        return Narrative(bundle.finding_id, template_text(bundle), {"type": "template"}, bundle.bundle_id,
                         _created_at(bundle))
    prompt = load_prompt().format(context=bundle.rendered_context)
    errors = []
    for _ in range(1 + generator.retries):
        try:
            with generator._gate:
                text = generator.client.generate(prompt, generator.params)
        except Exception as exc:  # any client failure counts as one attempt
            errors.append(f"{type(exc).__name__}: {exc}")
            continue
        if check_faithfulness(text, bundle, FORBIDDEN_LEXICON).faithful:
            return Narrative(bundle.finding_id, text.strip(), generator.describe(), bundle.bundle_id,
                             _created_at(bundle))
        errors.append("unfaithful output")
    if errors and all(e != "unfaithful output" for e in errors):
        raise GenerationFailed("; ".join(errors))
    gen = {"type": "template", "fallback_from": generator.describe()}
    return Narrative(bundle.finding_id, template_text(bundle), gen, bundle.bundle_id, _created_at(bundle))


def narrative_id(n: Narrative) -> str:
    return content_hash(n.to_dict(), prefix="narr-")
