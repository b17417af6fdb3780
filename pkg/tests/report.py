"""Collects acceptance results for the end-of-run summary."""

from __future__ import annotations

from dataclasses import dataclass

NAMES = {
    1: "flat round trip",
    2: "jacobian correctness",
    3: "hermite properties",
    4: "refinement ordering (regulation)",
    5: "lemniscate ordering",
    6: "runtime linearity and constant overhead",
    7: "real-time budget",
    8: "refinement invariants",
    9: "determinism",
}


@dataclass
class Part:
    criterion: int
    label: str
    passed: bool
    detail: str


PARTS: list[Part] = []


def record(criterion: int, label: str, passed: bool, detail: str = "") -> bool:
    PARTS.append(Part(criterion, label, bool(passed), detail))
    return bool(passed)


def lines() -> list[str]:
    out = []
    for c, name in NAMES.items():
        parts = [p for p in PARTS if p.criterion == c]
        if not parts:
            continue
        ok = all(p.passed for p in parts)
        body = "; ".join(f"{p.label} {'ok' if p.passed else 'FAILED'}" + (f" ({p.detail})" if p.detail else "")
                         for p in parts)
        out.append(f"{'PASS' if ok else 'FAIL'} C{c} {name}: {body}")
    return out
