import json
import socket
import threading
import time

import pytest

from ddns import wire
from ddns.forwarder import (BindError, Forwarder, ForwarderConfig, cache_ttl_seconds,
                            control_request)
from ddns.names import normalize_name
from ddns.policy import CdnAffinity, DomainResolverMap, Single, UpstreamResolver
from mock_upstream import MockUpstream


def query_bytes(name: str, msg_id: int = 100, qtype: int = wire.TYPE_A) -> bytes:
    return wire.encode(wire.build_query(normalize_name(name), qtype=qtype, msg_id=msg_id))


def udp_ask(port: int, payload: bytes, timeout: float = 5.0) -> bytes:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.settimeout(timeout)
        sock.sendto(payload, ("127.0.0.1", port))
        return sock.recv(65535)


def read_metrics(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def single_config(upstream: MockUpstream, **kwargs) -> ForwarderConfig:
    resolver = UpstreamResolver(id="up", address="127.0.0.1", port=upstream.port)
    kwargs.setdefault("listen_port", 0)
    return ForwarderConfig(resolvers=[resolver], strategy=Single(resolver_id="up"), **kwargs)


def test_config_validation():
    resolver = UpstreamResolver(id="up", address="127.0.0.1", port=53)
    with pytest.raises(ValueError):
        ForwarderConfig(resolvers=[resolver], strategy=Single(resolver_id="up"),
                        upstream_timeout_ms=0)
    with pytest.raises(ValueError):
        ForwarderConfig(resolvers=[resolver, resolver], strategy=Single(resolver_id="up"))
    with pytest.raises(ValueError):
        ForwarderConfig(resolvers=[resolver], strategy=Single(resolver_id="ghost"))


def test_forwarding_patches_only_the_transaction_id(mock_upstream):
    upstream = mock_upstream(answers={"a.test": ["1.2.3.4"]})
    fwd = Forwarder(single_config(upstream, cache_enabled=False))
    query = query_bytes("a.test", msg_id=4242)
    response = fwd.handle_query(query)
    assert wire.message_id(response) == 4242
    upstream_id = upstream.received()[0].msg_id
    assert upstream_id != 4242  # fresh id upstream
    # byte-identical to what the upstream produced except the 2 id bytes
    expected = wire.encode(upstream.build_answer(wire.decode(wire.patch_id(query, upstream_id))))
    assert response[2:] == expected[2:]
    assert wire.decode(response).answers[0].rdata.address.exploded == "1.2.3.4"


def test_fresh_upstream_id_per_attempt(mock_upstream):
    seen = []

    def responder(query, transport):
        seen.append(query.header.id)
        if len(seen) < 2:
            return None  # first attempt times out
        return upstream.build_answer(query)

    upstream = mock_upstream(responder=responder)
    fwd = Forwarder(single_config(upstream, cache_enabled=False,
                                  upstream_timeout_ms=150, retries=2))
    response = fwd.handle_query(query_bytes("retry.test", msg_id=9))
    assert wire.rcode_of(response) == wire.RCODE_NOERROR
    assert len(seen) == 2 and seen[0] != seen[1]


def test_mismatched_upstream_id_dropped(mock_upstream):
    # the upstream only ever answers with a wrong id; the forwarder must
    # never accept it and must SERVFAIL once its timeout expires
    def wrong_id_only(query, transport):
        bad = upstream.build_answer(query)
        bad.header.id ^= 0x5555
        return bad

    upstream = mock_upstream(responder=wrong_id_only)
    fwd = Forwarder(single_config(upstream, cache_enabled=False,
                                  upstream_timeout_ms=200, retries=0))
    response = fwd.handle_query(query_bytes("spoof.test", msg_id=31))
    assert wire.rcode_of(response) == wire.RCODE_SERVFAIL
    assert wire.message_id(response) == 31


def test_question_mismatch_dropped(mock_upstream):
    def wrong_question(query, transport):
        reply = upstream.build_answer(query)
        reply.questions[0] = wire.Question(normalize_name("other.test"), wire.TYPE_A)
        return reply

    upstream = mock_upstream(responder=wrong_question)
    fwd = Forwarder(single_config(upstream, cache_enabled=False,
                                  upstream_timeout_ms=200, retries=0))
    response = fwd.handle_query(query_bytes("real.test"))
    assert wire.rcode_of(response) == wire.RCODE_SERVFAIL


def test_timeout_arithmetic_with_retries(mock_upstream):
    upstream = mock_upstream(silent=True)
    fwd = Forwarder(single_config(upstream, cache_enabled=False,
                                  upstream_timeout_ms=100, retries=1))
    started = time.perf_counter()
    response = fwd.handle_query(query_bytes("quiet.test", msg_id=8))
    elapsed_ms = (time.perf_counter() - started) * 1000
    assert wire.rcode_of(response) == wire.RCODE_SERVFAIL
    assert wire.message_id(response) == 8
    assert 180 <= elapsed_ms <= 450  # ~2 x 100ms plus scheduling slack
    assert len(upstream.received()) == 2  # one send per attempt


def test_decode_error_yields_formerr(tmp_path, mock_upstream):
    upstream = mock_upstream()
    path = tmp_path / "m.ndjson"
    fwd = Forwarder(single_config(upstream, metrics_log_path=str(path)))
    response = fwd.handle_query(b"\xaa\xbb\x01\x02")
    assert wire.message_id(response) == 0xAABB
    assert wire.rcode_of(response) == wire.RCODE_FORMERR
    records = read_metrics(path)
    assert records[-1]["outcome"] == "decode_error"
    assert records[-1]["rtt_ms"] is None


def test_tcp_fallback_on_truncated_udp(mock_upstream):
    upstream = mock_upstream(answers={"big.test": ["7.7.7.7"]}, truncate_udp=True)
    fwd = Forwarder(single_config(upstream, cache_enabled=False))
    response = fwd.handle_query(query_bytes("big.test", msg_id=5))
    msg = wire.decode(response)
    assert not msg.header.tc
    assert msg.answers and str(msg.answers[0].rdata.address) == "7.7.7.7"
    transports = [r.transport for r in upstream.received()]
    assert transports == ["udp", "tcp"]


def test_cdn_affinity_routes_to_mapped_upstream_only(mock_upstream):
    mapped = mock_upstream(answers={"cdn.test": ["1.1.1.1"]})
    fallback = mock_upstream(answers={"other.test": ["2.2.2.2"]})
    resolvers = [
        UpstreamResolver(id="cdn", address="127.0.0.1", port=mapped.port),
        UpstreamResolver(id="local", address="127.0.0.1", port=fallback.port),
    ]
    strategy = CdnAffinity(
        map=DomainResolverMap(exact={normalize_name("cdn.test"): "cdn"}, suffix={}),
        default_resolver_id="local",
    )
    fwd = Forwarder(ForwarderConfig(resolvers=resolvers, strategy=strategy,
                                    listen_port=0, cache_enabled=False))
    fwd.handle_query(query_bytes("cdn.test"))
    fwd.handle_query(query_bytes("other.test"))
    assert mapped.received_names() == ["cdn.test"]
    assert fallback.received_names() == ["other.test"]


# -- cache ---------------------------------------------------------------

def test_cache_second_query_hits_without_upstream_send(mock_upstream):
    upstream = mock_upstream(answers={"c.test": ["3.3.3.3"]}, ttl=300)
    fwd = Forwarder(single_config(upstream, cache_enabled=True))
    first = fwd.handle_query(query_bytes("c.test", msg_id=1))
    second = fwd.handle_query(query_bytes("c.test", msg_id=2))
    assert len(upstream.received()) == 1
    assert wire.message_id(second) == 2
    assert wire.decode(second).answers == wire.decode(first).answers


def test_cache_hit_decrements_ttl(mock_upstream):
    upstream = mock_upstream(answers={"t.test": ["3.3.3.3"]}, ttl=300)
    fwd = Forwarder(single_config(upstream, cache_enabled=True))
    fwd.handle_query(query_bytes("t.test", msg_id=1))
    entry = next(iter(fwd.cache._entries.values()))
    entry.inserted_at -= 10  # pretend 10s elapsed
    response = fwd.handle_query(query_bytes("t.test", msg_id=2))
    assert wire.decode(response).answers[0].ttl == 290


def test_cache_expiry_causes_new_upstream_send(mock_upstream):
    upstream = mock_upstream(answers={"e.test": ["3.3.3.3"]}, ttl=300)
    fwd = Forwarder(single_config(upstream, cache_enabled=True))
    fwd.handle_query(query_bytes("e.test"))
    entry = next(iter(fwd.cache._entries.values()))
    entry.expires_at = 0  # force expiry
    fwd.handle_query(query_bytes("e.test"))
    assert len(upstream.received()) == 2


def test_cache_disabled_always_contacts_upstream(mock_upstream):
    upstream = mock_upstream(answers={"d.test": ["3.3.3.3"]}, ttl=300)
    fwd = Forwarder(single_config(upstream, cache_enabled=False))
    fwd.handle_query(query_bytes("d.test"))
    fwd.handle_query(query_bytes("d.test"))
    assert len(upstream.received()) == 2


def test_cache_key_includes_qtype(mock_upstream):
    upstream = mock_upstream(answers={"k.test": ["3.3.3.3"]})
    fwd = Forwarder(single_config(upstream, cache_enabled=True))
    fwd.handle_query(query_bytes("k.test", qtype=wire.TYPE_A))
    fwd.handle_query(query_bytes("k.test", qtype=wire.TYPE_AAAA))
    assert len(upstream.received()) == 2


def test_clear_cache_counts_and_forces_refetch(mock_upstream):
    upstream = mock_upstream(default_address="9.9.9.9", ttl=300)
    fwd = Forwarder(single_config(upstream, cache_enabled=True))
    assert fwd.clear_cache() == 0
    for name in ("one.test", "two.test", "three.test"):
        fwd.handle_query(query_bytes(name))
    assert fwd.clear_cache() == 3
    fwd.handle_query(query_bytes("one.test"))
    assert upstream.received_names().count("one.test") == 2


def test_negative_cache_uses_soa_minimum(mock_upstream):
    soa_rdata = (wire._encode_name(normalize_name("ns.test"))
                 + wire._encode_name(normalize_name("host.test"))
                 + bytes(16) + (7).to_bytes(4, "big"))

    def nx_with_soa(query, transport):
        reply = upstream.build_answer(query)
        reply.header.rcode = wire.RCODE_NXDOMAIN
        reply.answers = []
        reply.authority = [wire.ResourceRecord(normalize_name("test"), wire.TYPE_SOA, 1,
                                               600, wire.RdataOpaque(soa_rdata))]
        return reply

    upstream = mock_upstream(responder=nx_with_soa)
    fwd = Forwarder(single_config(upstream, cache_enabled=True))
    fwd.handle_query(query_bytes("gone.test"))
    entry = next(iter(fwd.cache._entries.values()))
    assert 6.5 <= entry.expires_at - entry.inserted_at <= 7.5


def test_cache_ttl_rules():
    answer = wire.DnsMessage(header=wire.DnsHeader(qr=True))
    answer.answers = [wire.ResourceRecord(normalize_name("a.test"), wire.TYPE_A, 1, 9000,
                                          wire.RdataA(__import__("ipaddress").IPv4Address("1.1.1.1")))]
    raw = wire.encode(answer)
    assert cache_ttl_seconds(answer, raw) == 3600  # cap
    answer.answers[0].ttl = 0
    assert cache_ttl_seconds(wire.decode(wire.encode(answer)), raw) == 1  # floor
    negative = wire.DnsMessage(header=wire.DnsHeader(qr=True, rcode=wire.RCODE_NXDOMAIN))
    assert cache_ttl_seconds(negative, wire.encode(negative)) == 60  # no SOA


# -- serving over real sockets --------------------------------------------

def test_serve_udp_and_tcp_round_trip(mock_upstream, run_forwarder):
    upstream = mock_upstream(answers={"s.test": ["4.4.4.4"]})
    fwd = run_forwarder({"up": upstream})
    port = fwd.bound_port
    response = udp_ask(port, query_bytes("s.test", msg_id=11))
    assert wire.message_id(response) == 11
    with socket.create_connection(("127.0.0.1", port), timeout=5) as sock:
        sock.sendall(wire.frame_tcp(query_bytes("s.test", msg_id=12)))
        tcp_response = wire.read_tcp_message(sock)
    assert wire.message_id(tcp_response) == 12
    assert wire.decode(tcp_response).answers[0].rdata.address.exploded == "4.4.4.4"


def test_serve_concurrent_queries_all_logged(tmp_path, mock_upstream, run_forwarder):
    upstream = mock_upstream(default_address="5.5.5.5")
    metrics = tmp_path / "load.ndjson"
    fwd = run_forwarder({"up": upstream}, cache_enabled=False,
                        metrics_log_path=str(metrics), workers=32)
    port = fwd.bound_port
    n = 1000
    errors = []

    def client(start: int):
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            sock.settimeout(10)
            for i in range(start, start + 50):
                payload = query_bytes("q%d.load.test" % i, msg_id=i & 0xFFFF)
                sock.sendto(payload, ("127.0.0.1", port))
                try:
                    reply = sock.recv(65535)
                except socket.timeout:
                    errors.append(i)
                    continue
                if wire.message_id(reply) != (i & 0xFFFF):
                    errors.append(i)

    threads = [threading.Thread(target=client, args=(k * 50,)) for k in range(n // 50)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    fwd.stop()
    records = read_metrics(metrics)
    assert len(records) == n
    assert all(r["outcome"] == "answered" for r in records)


def test_metrics_routing_fidelity_replay(tmp_path, mock_upstream, run_forwarder):
    a = mock_upstream(default_address="1.0.0.1")
    b = mock_upstream(default_address="1.0.0.2")
    strategy = CdnAffinity(
        map=DomainResolverMap(exact={}, suffix={normalize_name("mapped.test"): "a"}),
        default_resolver_id="b",
    )
    metrics = tmp_path / "fidelity.ndjson"
    fwd = run_forwarder({"a": a, "b": b}, strategy=strategy, cache_enabled=False,
                        metrics_log_path=str(metrics))
    port = fwd.bound_port
    for i in range(30):
        name = ("x%d.mapped.test" if i % 3 else "x%d.other.test") % i
        udp_ask(port, query_bytes(name, msg_id=i))
    fwd.stop()
    from ddns.policy import select_resolver
    for record in read_metrics(metrics):
        assert record["resolver_id"] == select_resolver(strategy,
                                                        normalize_name(record["qname"]))


def test_control_socket_clear_cache(tmp_path, mock_upstream, run_forwarder):
    upstream = mock_upstream(default_address="8.8.4.4", ttl=300)
    control = tmp_path / "ctl.sock"
    fwd = run_forwarder({"up": upstream}, cache_enabled=True,
                        control_socket_path=str(control))
    udp_ask(fwd.bound_port, query_bytes("ctl.test"))
    assert control_request(str(control), "ping") == {"ok": True}
    reply = control_request(str(control), "clear-cache")
    assert reply == {"ok": True, "evicted": 1}
    assert control_request(str(control), "bogus")["ok"] is False


def test_bind_error_when_port_taken(mock_upstream):
    upstream = mock_upstream()
    blocker = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    blocker.bind(("127.0.0.1", 0))
    taken = blocker.getsockname()[1]
    try:
        fwd = Forwarder(single_config(upstream, listen_port=taken))
        with pytest.raises(BindError):
            fwd.start()
    finally:
        blocker.close()


def test_stop_lets_in_flight_queries_finish(mock_upstream, run_forwarder):
    upstream = mock_upstream(default_address="6.6.6.6", delay_s=0.3)
    fwd = run_forwarder({"up": upstream}, cache_enabled=False)
    port = fwd.bound_port
    result = {}

    def client():
        try:
            result["response"] = udp_ask(port, query_bytes("inflight.test", msg_id=77))
        except socket.timeout:
            result["response"] = None

    t = threading.Thread(target=client)
    t.start()
    time.sleep(0.1)  # query is now in flight at the (slow) upstream
    fwd.stop()
    t.join(timeout=5)
    assert result["response"] is not None
    assert wire.message_id(result["response"]) == 77
