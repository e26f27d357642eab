import contextlib

_LINES = {}


@contextlib.contextmanager
def criterion(number: int, title: str, detail=None):
    """Record a PASS/FAIL line for acceptance criterion ``number``.

    ``detail`` is an optional list the body may append to; its items are
    joined into the reported line.
    """
    notes = detail if detail is not None else []
    try:
        yield notes
    except BaseException as e:
        first = str(e).strip().splitlines()
        msg = "; ".join(map(str, notes) if notes else (first[:1] or [type(e).__name__]))
        _LINES.setdefault(number, []).append(f"FAIL criterion {number} ({title}): {msg}")
        print(_LINES[number][-1])
        raise
    _LINES.setdefault(number, []).append(f"PASS criterion {number} ({title}): {'; '.join(map(str, notes))}")
    print(_LINES[number][-1])


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        for line in _LINES[n]:
            terminalreporter.write_line(line)
