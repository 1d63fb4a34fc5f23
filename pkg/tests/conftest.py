import pytest

_KEY = pytest.StashKey[list]()


class _Recorder:
    def __init__(self, lines):
        self._lines = lines

    def record(self, tag: str, ok: bool, detail: str) -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}"
        self._lines.append(line)
        print(line)
        return ok


@pytest.fixture
def acceptance(request):
    return _Recorder(request.config.stash.setdefault(_KEY, []))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
        terminalreporter.write_line(line)
