"""Shared record of acceptance verdicts, printed in the pytest terminal summary."""

ACCEPTANCE_LINES: dict[int, str] = {}


def record(n: int, status: str, detail: str) -> str:
    line = f"C{n:<2} {status:<4} {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return line
