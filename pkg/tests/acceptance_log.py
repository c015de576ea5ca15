"""Per-criterion outcomes collected by the acceptance suite and printed in the terminal summary."""

from __future__ import annotations

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    RESULTS[number] = (ok, title, detail)
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
    return ok
