"""Pass/fail lines collected by the acceptance suite, echoed in the summary."""

LINES: list = []


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
