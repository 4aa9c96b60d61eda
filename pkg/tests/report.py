"""Collects the one-line acceptance verdicts so the terminal summary can repeat them."""

LINES = []
RESULTS = {}


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[number] = ok
    LINES.append(line)
    print(line)
    return ok
