from __future__ import annotations

import contextlib

import pytest

from ddns.forwarder import Forwarder, ForwarderConfig
from ddns.policy import Single, UpstreamResolver
from mock_upstream import MockUpstream


@pytest.fixture
def mock_upstream():
    created = []

    def make(**kwargs) -> MockUpstream:
        server = MockUpstream(**kwargs)
        created.append(server)
        return server

    yield make
    for server in created:
        server.close()


@pytest.fixture
def run_forwarder(tmp_path):
    """Start a Forwarder on an ephemeral port; stopped on teardown."""
    running = []

    def start(upstreams: dict[str, MockUpstream], strategy=None, **kwargs) -> Forwarder:
        resolvers = [UpstreamResolver(id=rid, address=s.address[0], port=s.port)
                     for rid, s in upstreams.items()]
        if strategy is None:
            strategy = Single(resolver_id=next(iter(upstreams)))
        kwargs.setdefault("metrics_log_path", str(tmp_path / "metrics.ndjson"))
        config = ForwarderConfig(resolvers=resolvers, strategy=strategy,
                                 listen_address="127.0.0.1", listen_port=0, **kwargs)
        fwd = Forwarder(config)
        fwd.start()
        running.append(fwd)
        return fwd

    yield start
    for fwd in running:
        with contextlib.suppress(Exception):
            fwd.stop()


# Acceptance criteria get one visible pass/fail line each in the summary.
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            if getattr(report, "when", "call") not in ("call", "setup"):
                continue
            name = nodeid.split("::")[-1]
            label = {"passed": "PASS", "failed": "FAIL", "error": "FAIL",
                     "skipped": "SKIP"}[status]
            lines.append((name, label))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, label in sorted(set(lines)):
            terminalreporter.write_line("%s: %s" % (name, label))
