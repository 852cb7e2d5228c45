"""Collector for one-line acceptance verdicts, printed in the terminal summary."""

LINES = {}


def record(number: int, ok: bool, title: str, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    LINES[number] = line
    print(line)
