"""Append-only JSONL run reports and report comparison.

Every report embeds the resolved config and its fingerprint, so a report
is sufficient to re-execute the run and check that tokens, forward-pass
counts and attention counters come back identical.
"""

from __future__ import annotations

import json
import time

from blockdlm.config import fingerprint

SCHEMA_VERSION = 1


def make_report(command: str, resolved_config: dict, seed: int, payload: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "fingerprint": fingerprint(resolved_config),
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": resolved_config,
        **payload,
    }


def append_report(path: str, report: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(report) + "\n")


def read_reports(path: str) -> list[dict]:
    reports = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                reports.append(json.loads(line))
    return reports


def token_agreement(a: list[int], b: list[int]) -> tuple[float, int]:
    """Exact-match rate over the shared span and the first divergence index.

    The divergence index is -1 when the sequences agree everywhere
    (including equal length).
    """
    shared = min(len(a), len(b))
    matches = sum(1 for i in range(shared) if a[i] == b[i])
    first_div = -1
    for i in range(shared):
        if a[i] != b[i]:
            first_div = i
            break
    if first_div == -1 and len(a) != len(b):
        first_div = shared
    denom = max(len(a), len(b))
    return (matches / denom if denom else 1.0), first_div


def _ratio(x: float, y: float) -> float | None:
    return (x / y) if y else None


def compare_reports(report_a: dict, report_b: dict) -> dict:
    """Agreement and cost ratios of run B relative to run A.

    Agreement is symmetric; each ratio inverts when the arguments swap.
    """
    for r in (report_a, report_b):
        if "tokens" not in r:
            raise ValueError("compare needs generate reports with a 'tokens' field")
    agreement, first_div = token_agreement(report_a["tokens"], report_b["tokens"])
    return {
        "fingerprint_a": report_a["fingerprint"],
        "fingerprint_b": report_b["fingerprint"],
        "token_agreement": agreement,
        "first_divergence": first_div,
        "nfe_ratio": _ratio(report_b["nfe"], report_a["nfe"]),
        "attended_ratio": _ratio(report_b["attended"], report_a["attended"]),
        "wall_ratio": _ratio(report_b["wall_ns"], report_a["wall_ns"]),
    }
