"""The proxy runtime: accept queries over UDP/TCP, pick an upstream via the
configured strategy, forward, cache, and log per-query metrics.

Forwarded responses are returned to the client byte-identical to the
upstream message except for the transaction id; cache hits additionally get
their TTL fields decremented in place. Metrics are appended as one JSON
object per line; a local control socket lets a `clear-cache` subcommand
reach the running process.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from . import wire
from .names import DomainName
from .policy import Strategy, UpstreamResolver, select_resolver, validate_strategy

log = logging.getLogger("ddns.forwarder")

CACHE_TTL_FLOOR_S = 1
CACHE_TTL_CAP_S = 3600
NEGATIVE_TTL_CAP_S = 60


class BindError(OSError):
    """A listen or control socket could not be bound."""


@dataclass
class ForwarderConfig:
    resolvers: list[UpstreamResolver]
    strategy: Strategy
    listen_address: str = "127.0.0.1"
    listen_port: int = 5353
    cache_enabled: bool = True
    upstream_timeout_ms: float = 2000.0
    retries: int = 1
    metrics_log_path: str | None = None
    control_socket_path: str | None = None
    workers: int = 16  # UDP receiver threads

    def __post_init__(self):
        if self.upstream_timeout_ms <= 0:
            raise ValueError("upstream_timeout_ms must be > 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        ids = [r.id for r in self.resolvers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate resolver ids in configuration")
        validate_strategy(self.strategy, ids)


@dataclass
class QueryLogRecord:
    """One metrics line. rtt_ms is present exactly for answered,
    non-cache-hit queries and covers the upstream exchange including
    retries."""

    ts: float
    qname: str
    qtype: int
    resolver_id: str | None
    rtt_ms: float | None
    cache_hit: bool
    rcode: int | None
    outcome: str  # answered | upstream_timeout | decode_error


@dataclass
class CacheEntry:
    key: tuple[DomainName, int, int]
    response_template: wire.DnsMessage
    wire_bytes: bytes
    ttl_slots: list[tuple[int, int]]
    inserted_at: float  # monotonic
    expires_at: float  # monotonic
    resolver_id: str

    def render(self, client_id: int, now: float) -> bytes:
        """The cached response with the client's id and TTLs decremented by
        whole elapsed seconds (floor 0)."""
        elapsed = int(now - self.inserted_at)
        out = bytearray(self.wire_bytes)
        out[0:2] = struct.pack("!H", client_id & 0xFFFF)
        for offset, ttl in self.ttl_slots:
            out[offset:offset + 4] = struct.pack("!I", max(0, ttl - elapsed))
        return bytes(out)


class DnsCache:
    """(qname, qtype, qclass) → CacheEntry with lazy expiry."""

    def __init__(self):
        self._entries: dict[tuple[DomainName, int, int], CacheEntry] = {}
        self._lock = threading.Lock()

    def get(self, key, now: float) -> CacheEntry | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            if now >= entry.expires_at:
                del self._entries[key]
                return None
            return entry

    def put(self, entry: CacheEntry) -> None:
        with self._lock:
            self._entries[entry.key] = entry

    def clear(self) -> int:
        with self._lock:
            n = len(self._entries)
            self._entries.clear()
            return n

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def cache_ttl_seconds(msg: wire.DnsMessage, raw: bytes) -> int:
    """TTL for a cacheable response: min answer TTL (floor 1 s, cap 3600 s),
    or for negative/no-data responses min(SOA minimum, 60 s) else 60 s."""
    if msg.header.rcode == wire.RCODE_NOERROR and msg.answers:
        ttl = min(rr.ttl for rr in msg.answers)
        return min(CACHE_TTL_CAP_S, max(CACHE_TTL_FLOOR_S, ttl))
    minimum = wire.soa_minimum(raw)
    if minimum is not None:
        return max(CACHE_TTL_FLOOR_S, min(minimum, NEGATIVE_TTL_CAP_S))
    return NEGATIVE_TTL_CAP_S


class MetricsLog:
    """Append-only newline-delimited JSON sink, serialized across threads.

    Writes are buffered for throughput; flush() (and close(), which the
    forwarder's graceful stop calls) makes every record durable.
    """

    def __init__(self, path: str | None):
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, record: QueryLogRecord) -> None:
        if self._fh is None:
            return
        line = json.dumps({
            "ts": record.ts, "qname": record.qname, "qtype": record.qtype,
            "resolver_id": record.resolver_id, "rtt_ms": record.rtt_ms,
            "cache_hit": record.cache_hit, "rcode": record.rcode,
            "outcome": record.outcome,
        }, separators=(",", ":"))
        with self._lock:
            self._fh.write(line + "\n")

    def flush(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                self._fh.close()
                self._fh = None


class _QuestionMatch:
    """Off-path-spoofing defence: a response is accepted only when its id
    and question match the query. Most resolvers echo the question bytes
    verbatim, so a straight byte comparison is the fast path; anything else
    (re-cased or compressed questions) falls back to a parsed comparison."""

    __slots__ = ("question_bytes", "single_question", "qname", "qtype", "qclass")

    def __init__(self, raw: bytes, question_end: int, qname: DomainName,
                 qtype: int, qclass: int):
        self.question_bytes = raw[12:question_end]
        self.single_question = raw[4:6] == b"\x00\x01"
        self.qname = qname
        self.qtype = qtype
        self.qclass = qclass

    def acceptable(self, response: bytes, expected_id: int) -> bool:
        if len(response) < 12 or wire.message_id(response) != expected_id:
            return False
        end = 12 + len(self.question_bytes)
        if (self.single_question and response[4:6] == b"\x00\x01"
                and response[12:end] == self.question_bytes):
            return True
        try:
            rname, rtype, rclass, _ = wire.read_question(response)
        except wire.DECODE_ERRORS:
            return False
        return rname == self.qname and rtype == self.qtype and rclass == self.qclass


class Forwarder:
    """The proxy itself. start() binds sockets and spawns the serving
    threads; handle_query() is also callable directly for tests."""

    def __init__(self, config: ForwarderConfig):
        self.config = config
        self.cache = DnsCache()
        self._resolvers = {r.id: r for r in config.resolvers}
        self._metrics = MetricsLog(config.metrics_log_path)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conn_threads: set[threading.Thread] = set()
        self._conn_lock = threading.Lock()
        self._udp_sock: socket.socket | None = None
        self._tcp_sock: socket.socket | None = None
        self._control_sock: socket.socket | None = None
        # per-worker-thread connected upstream sockets, reused across queries
        self._upstream_local = threading.local()
        self._upstream_socks: list[socket.socket] = []
        self._upstream_socks_lock = threading.Lock()

    # -- query path ---------------------------------------------------------

    def handle_query(self, raw: bytes, client=("", 0)) -> bytes | None:
        """Process one client query and return the response bytes (None when
        the input is too short to even carry a transaction id)."""
        try:
            qname, qtype, qclass, question_end = wire.read_question(raw)
        except wire.DECODE_ERRORS:
            self._log(QueryLogRecord(
                ts=time.time(), qname="", qtype=0, resolver_id=None, rtt_ms=None,
                cache_hit=False, rcode=wire.RCODE_FORMERR, outcome="decode_error",
            ))
            if len(raw) < 2:
                return None
            return wire.error_response(raw, wire.RCODE_FORMERR)

        client_id = wire.message_id(raw)
        key = (qname, qtype, qclass)
        if self.config.cache_enabled:
            now = time.monotonic()
            entry = self.cache.get(key, now)
            if entry is not None:
                self._log(QueryLogRecord(
                    ts=time.time(), qname=str(qname), qtype=qtype,
                    resolver_id=entry.resolver_id, rtt_ms=None, cache_hit=True,
                    rcode=entry.response_template.header.rcode, outcome="answered",
                ))
                return entry.render(client_id, now)

        resolver_id = select_resolver(self.config.strategy, qname)
        upstream = self._resolvers[resolver_id]
        response, rtt_ms = self._exchange(upstream, raw, question_end, qname, qtype, qclass)
        if response is None:
            self._log(QueryLogRecord(
                ts=time.time(), qname=str(qname), qtype=qtype, resolver_id=resolver_id,
                rtt_ms=None, cache_hit=False, rcode=wire.RCODE_SERVFAIL,
                outcome="upstream_timeout",
            ))
            return wire.error_response(raw, wire.RCODE_SERVFAIL)

        rcode = wire.rcode_of(response)
        if self.config.cache_enabled and rcode in (wire.RCODE_NOERROR, wire.RCODE_NXDOMAIN):
            self._insert_cache(key, response, resolver_id)
        self._log(QueryLogRecord(
            ts=time.time(), qname=str(qname), qtype=qtype, resolver_id=resolver_id,
            rtt_ms=rtt_ms, cache_hit=False, rcode=rcode, outcome="answered",
        ))
        return wire.patch_id(response, client_id)

    def _insert_cache(self, key, response: bytes, resolver_id: str) -> None:
        try:
            msg = wire.decode(response)
            slots = wire.rr_ttl_slots(response)
        except wire.DECODE_ERRORS:
            return  # upstream sent something we can't walk; serve it, skip caching
        ttl = cache_ttl_seconds(msg, response)
        now = time.monotonic()
        self.cache.put(CacheEntry(
            key=key, response_template=msg, wire_bytes=response, ttl_slots=slots,
            inserted_at=now, expires_at=now + ttl, resolver_id=resolver_id,
        ))

    def _exchange(self, upstream: UpstreamResolver, raw: bytes, question_end: int,
                  qname: DomainName, qtype: int, qclass: int) -> tuple[bytes | None, float | None]:
        """Forward the client's bytes (fresh id per attempt) and return the
        accepted upstream response plus the exchange time in ms."""
        timeout_s = self.config.upstream_timeout_ms / 1000.0
        started = time.perf_counter()
        match = _QuestionMatch(raw, question_end, qname, qtype, qclass)
        for _ in range(self.config.retries + 1):
            fresh_id = int.from_bytes(os.urandom(2), "big")
            query = wire.patch_id(raw, fresh_id)
            response = self._udp_attempt(upstream, query, fresh_id, match, timeout_s)
            if response is None:
                continue
            if wire.tc_flag(response):
                full = self._tcp_attempt(upstream, raw, match, timeout_s)
                if full is not None:
                    response = full
            rtt_ms = round((time.perf_counter() - started) * 1000.0, 3)
            return response, rtt_ms
        return None, None

    def _upstream_socket(self, upstream: UpstreamResolver) -> socket.socket:
        """A connected UDP socket for this (thread, upstream) pair.

        Reused across queries to avoid per-query socket setup; stray late
        responses from earlier queries are rejected by the id/question check.
        """
        cache = getattr(self._upstream_local, "socks", None)
        if cache is None:
            cache = self._upstream_local.socks = {}
        key = (upstream.address, upstream.port)
        sock = cache.get(key)
        if sock is None:
            sock = socket.socket(
                socket.AF_INET6 if ":" in upstream.address else socket.AF_INET,
                socket.SOCK_DGRAM,
            )
            sock.connect(key)
            cache[key] = sock
            with self._upstream_socks_lock:
                self._upstream_socks.append(sock)
        return sock

    def _drop_upstream_socket(self, upstream: UpstreamResolver) -> None:
        cache = getattr(self._upstream_local, "socks", None)
        if cache is None:
            return
        sock = cache.pop((upstream.address, upstream.port), None)
        if sock is not None:
            with self._upstream_socks_lock:
                if sock in self._upstream_socks:
                    self._upstream_socks.remove(sock)
            sock.close()

    def _udp_attempt(self, upstream, query, fresh_id, match, timeout_s):
        deadline = time.monotonic() + timeout_s
        try:
            sock = self._upstream_socket(upstream)
            sock.send(query)
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                sock.settimeout(remaining)
                try:
                    response = sock.recv(wire.MAX_MESSAGE_SIZE)
                except socket.timeout:
                    return None
                if match.acceptable(response, fresh_id):
                    return response
                # id or question mismatch: drop and keep waiting
        except OSError:
            # unreachable/refused or a socket left unusable; rebuild next time
            self._drop_upstream_socket(upstream)
            return None

    def _tcp_attempt(self, upstream, raw, match, timeout_s):
        fresh_id = int.from_bytes(os.urandom(2), "big")
        query = wire.patch_id(raw, fresh_id)
        try:
            with socket.create_connection((upstream.address, upstream.port), timeout=timeout_s) as sock:
                sock.settimeout(timeout_s)
                sock.sendall(wire.frame_tcp(query))
                response = wire.read_tcp_message(sock)
        except (OSError, wire.WireError):
            return None
        if response is not None and match.acceptable(response, fresh_id):
            return response
        return None

    def clear_cache(self) -> int:
        return self.cache.clear()

    def _log(self, record: QueryLogRecord) -> None:
        self._metrics.write(record)

    # -- serving ------------------------------------------------------------

    def start(self) -> None:
        cfg = self.config
        try:
            self._udp_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            try:
                self._udp_sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
            except OSError:
                pass  # burst headroom only; the default still works
            self._udp_sock.bind((cfg.listen_address, cfg.listen_port))
            self._udp_sock.settimeout(0.2)  # receivers poll the stop flag
            self._tcp_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._tcp_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            # TCP binds whatever port UDP got, so port 0 configs stay aligned.
            self._tcp_sock.bind((cfg.listen_address, self._udp_sock.getsockname()[1]))
            self._tcp_sock.listen(64)
        except OSError as e:
            self._close_sockets()
            raise BindError("cannot bind %s:%d: %s" % (cfg.listen_address, cfg.listen_port, e)) from e
        if cfg.control_socket_path:
            try:
                if os.path.exists(cfg.control_socket_path):
                    os.unlink(cfg.control_socket_path)
                self._control_sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                self._control_sock.bind(cfg.control_socket_path)
                self._control_sock.listen(8)
            except OSError as e:
                self._close_sockets()
                raise BindError("cannot bind control socket %s: %s" % (cfg.control_socket_path, e)) from e

        self._stop.clear()
        # N receivers share the UDP socket and handle queries inline; the
        # kernel hands each datagram to exactly one of them
        self._threads = [
            threading.Thread(target=self._udp_receiver, daemon=True, name="ddns-udp-%d" % i)
            for i in range(max(1, cfg.workers))
        ]
        self._threads.append(threading.Thread(target=self._tcp_loop, daemon=True, name="ddns-tcp"))
        if self._control_sock is not None:
            self._threads.append(threading.Thread(target=self._control_loop, daemon=True, name="ddns-ctl"))
        for t in self._threads:
            t.start()
        log.info("listening on %s:%d (udp/tcp), cache %s",
                 cfg.listen_address, self.bound_port,
                 "enabled" if cfg.cache_enabled else "disabled")

    @property
    def bound_port(self) -> int:
        if self._udp_sock is None:
            return self.config.listen_port
        return self._udp_sock.getsockname()[1]

    def stop(self) -> None:
        """Stop accepting, let in-flight queries finish, flush the log."""
        self._stop.set()
        join_s = 1.0 + (self.config.retries + 1) * self.config.upstream_timeout_ms / 1000.0
        for t in self._threads:
            t.join(timeout=join_s)
        self._threads = []
        with self._conn_lock:
            conns = list(self._conn_threads)
        for t in conns:
            t.join(timeout=join_s)
        self._close_sockets()
        with self._upstream_socks_lock:
            for sock in self._upstream_socks:
                try:
                    sock.close()
                except OSError:
                    pass
            self._upstream_socks.clear()
        self._metrics.close()
        path = self.config.control_socket_path
        if path and os.path.exists(path):
            try:
                os.unlink(path)
            except OSError:
                pass

    def _close_sockets(self) -> None:
        for sock in (self._udp_sock, self._tcp_sock, self._control_sock):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        self._udp_sock = self._tcp_sock = self._control_sock = None

    def _udp_receiver(self) -> None:
        sock = self._udp_sock
        while not self._stop.is_set():
            try:
                data, addr = sock.recvfrom(wire.MAX_MESSAGE_SIZE)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                response = self.handle_query(data, addr)
                if response is not None:
                    sock.sendto(response, addr)
            except OSError:
                pass
            except Exception:
                log.exception("query handler failed")

    def _tcp_loop(self) -> None:
        sock = self._tcp_sock
        sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, addr = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_tcp, args=(conn, addr), daemon=True)
            with self._conn_lock:
                self._conn_threads.add(t)
            t.start()

    def _serve_tcp(self, conn: socket.socket, addr) -> None:
        try:
            conn.settimeout(10.0)
            with conn:
                while True:
                    try:
                        query = wire.read_tcp_message(conn)
                    except (socket.timeout, wire.Truncated, OSError):
                        return
                    if query is None:
                        return
                    response = self.handle_query(query, addr)
                    if response is None:
                        return
                    conn.sendall(wire.frame_tcp(response))
        except Exception:
            log.exception("tcp handler failed")
        finally:
            with self._conn_lock:
                self._conn_threads.discard(threading.current_thread())

    # -- control socket -----------------------------------------------------

    def _control_loop(self) -> None:
        sock = self._control_sock
        sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                with conn:
                    conn.settimeout(2.0)
                    command = conn.makefile("r", encoding="utf-8").readline().strip()
                    reply = self._control_command(command)
                    conn.sendall((json.dumps(reply) + "\n").encode("utf-8"))
            except OSError:
                pass

    def _control_command(self, command: str) -> dict:
        if command == "clear-cache":
            return {"ok": True, "evicted": self.clear_cache()}
        if command == "ping":
            return {"ok": True}
        return {"ok": False, "error": "unknown command %r" % command}


def control_request(socket_path: str, command: str, timeout_s: float = 5.0) -> dict:
    """Send one command to a running forwarder's control socket."""
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout_s)
        sock.connect(socket_path)
        sock.sendall((command + "\n").encode("utf-8"))
        reply = sock.makefile("r", encoding="utf-8").readline()
    return json.loads(reply)


def serve(config: ForwarderConfig, stop_event: threading.Event | None = None) -> None:
    """Run a forwarder until stop_event is set (signal handlers set it)."""
    fwd = Forwarder(config)
    fwd.start()
    event = stop_event if stop_event is not None else threading.Event()
    try:
        while not event.wait(0.2):
            pass
    finally:
        fwd.stop()
