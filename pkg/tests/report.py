"""Collects one summary line per acceptance criterion for the terminal report."""
LINES: dict = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    LINES[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(LINES[criterion], flush=True)
    return ok
