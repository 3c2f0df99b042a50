import threading

import pytest

from duetbench.sut import SutConfig, make_server


class RunningSut:
    def __init__(self, config: SutConfig):
        self.server = make_server(config)
        self.service = self.server.service
        host, port = self.server.server_address[:2]
        self.url = f"http://{host}:{port}"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def sut_factory():
    started = []

    def start(**overrides):
        cfg = dict(listen_port=0, work_factor=0, n_destinations=5, n_flights=40, seats_per_flight=12)
        cfg.update(overrides)
        sut = RunningSut(SutConfig(**cfg))
        started.append(sut)
        return sut

    yield start
    for sut in started:
        sut.stop()


@pytest.fixture
def sut(sut_factory):
    return sut_factory()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import ACCEPTANCE_LINES

    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
