"""In-process mock upstream resolvers for forwarder and bench tests.

A MockUpstream answers on loopback UDP (and TCP) from a name→addresses
table, with optional artificial delay, truncation-then-TCP, silence, or a
custom responder hook. Every received query is logged for receipt checks.
"""

from __future__ import annotations

import ipaddress
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from ddns import wire
from ddns.names import DomainName


@dataclass
class Receipt:
    qname: str
    qtype: int
    msg_id: int
    transport: str  # udp | tcp


@dataclass
class MockUpstream:
    answers: dict[str, list[str]] = field(default_factory=dict)
    default_address: str | None = "127.0.0.99"
    ttl: int = 300
    delay_s: float = 0.0
    silent: bool = False
    truncate_udp: bool = False  # respond tc=1 over UDP, full answer over TCP
    nxdomain: set[str] = field(default_factory=set)
    # optional hook (DnsMessage, transport) -> DnsMessage | bytes | None
    responder: Optional[Callable] = None

    def __post_init__(self):
        self.receipts: list[Receipt] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._template_cache: dict[tuple[str, int, bool], bytes] = {}
        self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._udp.bind(("127.0.0.1", 0))
        self._tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._tcp.bind(("127.0.0.1", self._udp.getsockname()[1]))
        self._tcp.listen(32)
        self._threads = [
            threading.Thread(target=self._udp_loop, daemon=True),
            threading.Thread(target=self._tcp_loop, daemon=True),
        ]
        for t in self._threads:
            t.start()

    @property
    def port(self) -> int:
        return self._udp.getsockname()[1]

    @property
    def address(self) -> tuple[str, int]:
        return ("127.0.0.1", self.port)

    def close(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        self._udp.close()
        self._tcp.close()

    def received(self) -> list[Receipt]:
        with self._lock:
            return list(self.receipts)

    def received_names(self) -> list[str]:
        return [r.qname for r in self.received()]

    def clear_receipts(self):
        with self._lock:
            self.receipts.clear()

    # -- serving ------------------------------------------------------------

    def _udp_loop(self):
        self._udp.settimeout(0.1)
        while not self._stop.is_set():
            try:
                data, addr = self._udp.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            arrived = time.monotonic()
            if self.delay_s:
                # delayed answers get their own thread so concurrent queries
                # are not serialized behind the sleep
                threading.Thread(target=self._answer_udp, args=(data, addr, arrived),
                                 daemon=True).start()
            else:
                self._answer_udp(data, addr, arrived)

    def _answer_udp(self, data: bytes, addr, arrived: float):
        response = self._respond(data, "udp", arrived)
        if response is not None:
            try:
                self._udp.sendto(response, addr)
            except OSError:
                pass

    def _tcp_loop(self):
        self._tcp.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, _ = self._tcp.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._answer_tcp, args=(conn,), daemon=True).start()

    def _answer_tcp(self, conn: socket.socket):
        with conn:
            conn.settimeout(2.0)
            try:
                length = struct.unpack("!H", conn.recv(2))[0]
                data = b""
                while len(data) < length:
                    chunk = conn.recv(length - len(data))
                    if not chunk:
                        return
                    data += chunk
            except (OSError, struct.error):
                return
            response = self._respond(data, "tcp")
            if response is not None:
                try:
                    conn.sendall(struct.pack("!H", len(response)) + response)
                except OSError:
                    pass

    def _respond(self, data: bytes, transport: str, arrived: float | None = None) -> bytes | None:
        if self.responder is None and not self.truncate_udp and not self.silent:
            return self._respond_fast(data, transport, arrived)
        try:
            query = wire.decode(data)
            question = query.questions[0]
        except (wire.DECODE_ERRORS, IndexError):
            return None
        with self._lock:
            self.receipts.append(Receipt(qname=str(question.qname), qtype=question.qtype,
                                         msg_id=query.header.id, transport=transport))
        if self.silent:
            return None
        if self.delay_s:
            # deadline-based so thread-spawn overhead is absorbed into the
            # configured artificial delay; short delays busy-wait because
            # time.sleep() can overshoot by milliseconds under load
            deadline = (arrived if arrived is not None else time.monotonic()) + self.delay_s
            if self.delay_s <= 0.02:
                while time.monotonic() < deadline:
                    pass
            else:
                remaining = deadline - time.monotonic()
                if remaining > 0:
                    time.sleep(remaining)
        if self.responder is not None:
            custom = self.responder(query, transport)
            if custom is None:
                return None
            return custom if isinstance(custom, bytes) else wire.encode(custom)
        if self.truncate_udp and transport == "udp":
            reply = wire.DnsMessage(
                header=wire.DnsHeader(id=query.header.id, qr=True, rd=query.header.rd,
                                      ra=True, tc=True),
                questions=[question],
            )
            return wire.encode(reply)
        return wire.encode(self.build_answer(query))

    def _respond_fast(self, data: bytes, transport: str, arrived: float | None) -> bytes | None:
        """Table-driven path: parse only the question, serve from a cached
        encoded template with the id patched in."""
        try:
            qname, qtype, _, _ = wire.read_question(data)
            msg_id = wire.message_id(data)
        except wire.DECODE_ERRORS:
            return None
        name = str(qname)
        with self._lock:
            self.receipts.append(Receipt(qname=name, qtype=qtype, msg_id=msg_id,
                                         transport=transport))
        rd = bool(data[2] & 0x01)
        key = (name, qtype, rd)
        template = self._template_cache.get(key)
        if template is None:
            query = wire.DnsMessage(header=wire.DnsHeader(rd=rd),
                                    questions=[wire.Question(qname, qtype)])
            template = wire.encode(self.build_answer(query))
            with self._lock:
                self._template_cache[key] = template
        if self.delay_s:
            deadline = (arrived if arrived is not None else time.monotonic()) + self.delay_s
            if self.delay_s <= 0.02:
                while time.monotonic() < deadline:
                    pass
            else:
                remaining = deadline - time.monotonic()
                if remaining > 0:
                    time.sleep(remaining)
        return wire.patch_id(template, msg_id)

    def build_answer(self, query: wire.DnsMessage) -> wire.DnsMessage:
        question = query.questions[0]
        name = str(question.qname)
        reply = wire.DnsMessage(
            header=wire.DnsHeader(id=query.header.id, qr=True, rd=query.header.rd, ra=True),
            questions=[question],
        )
        if name in self.nxdomain:
            reply.header.rcode = wire.RCODE_NXDOMAIN
            return reply
        addresses = self.answers.get(name)
        if addresses is None:
            addresses = [self.default_address] if self.default_address else []
        if question.qtype == wire.TYPE_A:
            for text in addresses:
                ip = ipaddress.ip_address(text)
                if ip.version == 4:
                    reply.answers.append(wire.ResourceRecord(
                        question.qname, wire.TYPE_A, wire.CLASS_IN, self.ttl, wire.RdataA(ip)))
        return reply


def domain(name: str) -> DomainName:
    from ddns.names import normalize_name
    return normalize_name(name)
