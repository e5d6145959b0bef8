"""Collected pass/fail lines of the acceptance criteria."""

LINES = []


def record_criterion(number, title, passed, detail):
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    LINES.append((number, line))
    print(line)
    return passed
