"""Collects one PASS/FAIL line per acceptance criterion; conftest prints them after the run."""
LINES: list[str] = []


def report(label: str, ok: bool, detail: str) -> bool:
    LINES.append(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok
