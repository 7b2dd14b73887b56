"""Structured check results shared by the validators and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any


@dataclass
class Check:
    name: str
    passed: bool
    worst_ratio: float = float("nan")
    witness: Any = None
    detail: str = ""


@dataclass
class DiagnosticsReport:
    """A named collection of pass/fail checks plus fitted values.

    ``values`` holds scalar outputs (fitted constants, standard errors) keyed
    by name; ``checks`` holds the individual assertions in evaluation order.
    """

    name: str
    checks: list[Check] = field(default_factory=list)
    values: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, passed, worst_ratio=float("nan"), witness=None, detail=""):
        check = Check(name, bool(passed), float(worst_ratio), witness, detail)
        self.checks.append(check)
        return check

    def extend(self, other: "DiagnosticsReport"):
        self.checks.extend(other.checks)
        self.values.update(other.values)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def rows(self):
        for c in self.checks:
            yield {
                "report": self.name,
                "check": c.name,
                "passed": int(c.passed),
                "worst_ratio": c.worst_ratio,
                "witness": "" if c.witness is None else repr(c.witness),
                "detail": c.detail,
            }

    def summary(self) -> str:
        n_fail = len(self.failures())
        state = "pass" if n_fail == 0 else f"FAIL ({n_fail} of {len(self.checks)})"
        return f"{self.name}: {state}"
