"""Shared record of acceptance outcomes, printed at the end of the session."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    RESULTS[number] = (passed, detail)
    print(line(number))


def line(number: int) -> str:
    passed, detail = RESULTS[number]
    return f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
