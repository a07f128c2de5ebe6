"""Minimal Do53 stub client shared by the bench and the classifier.

One query, one response, over UDP with TCP retry on truncation. Responses
are accepted only when the transaction id and question match the query.
"""

from __future__ import annotations

import os
import socket
import time

from . import wire
from .names import DomainName


class QueryTimeout(Exception):
    """No matching response arrived before the deadline."""


class TargetRefused(Exception):
    """The OS reported the target unreachable (ICMP port unreachable)."""


def _matches(resp: bytes, msg_id: int, qname: DomainName, qtype: int, qclass: int) -> bool:
    if len(resp) < 12 or wire.message_id(resp) != msg_id:
        return False
    try:
        rname, rtype, rclass, _ = wire.read_question(resp)
    except wire.DECODE_ERRORS:
        return False
    return rname == qname and rtype == qtype and rclass == qclass


def exchange(
    server: tuple[str, int],
    qname: DomainName,
    qtype: int = wire.TYPE_A,
    timeout_s: float = 2.0,
    tcp_fallback: bool = True,
) -> bytes:
    """Send one query and return the raw matching response bytes.

    Raises QueryTimeout when nothing valid arrives in time and TargetRefused
    when the OS signals the target is unreachable.
    """
    msg_id = int.from_bytes(os.urandom(2), "big")
    query = wire.encode(wire.build_query(qname, qtype=qtype, msg_id=msg_id))
    deadline = time.monotonic() + timeout_s
    family = socket.AF_INET6 if ":" in server[0] else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_DGRAM)
    try:
        sock.connect(server)
        sock.send(query)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise QueryTimeout(str(qname))
            sock.settimeout(remaining)
            try:
                resp = sock.recv(wire.MAX_MESSAGE_SIZE)
            except socket.timeout:
                raise QueryTimeout(str(qname)) from None
            except ConnectionRefusedError as e:
                raise TargetRefused(str(e)) from None
            if not _matches(resp, msg_id, qname, qtype, wire.CLASS_IN):
                continue
            if tcp_fallback and wire.tc_flag(resp):
                remaining = deadline - time.monotonic()
                if remaining > 0:
                    full = _exchange_tcp(server, qname, qtype, remaining)
                    if full is not None:
                        return full
            return resp
    finally:
        sock.close()


def _exchange_tcp(server: tuple[str, int], qname: DomainName, qtype: int, timeout_s: float) -> bytes | None:
    msg_id = int.from_bytes(os.urandom(2), "big")
    query = wire.encode(wire.build_query(qname, qtype=qtype, msg_id=msg_id))
    try:
        with socket.create_connection(server, timeout=timeout_s) as sock:
            sock.sendall(wire.frame_tcp(query))
            resp = wire.read_tcp_message(sock)
    except (OSError, wire.Truncated):
        return None
    if resp is not None and _matches(resp, msg_id, qname, qtype, wire.CLASS_IN):
        return resp
    return None


def resolve_addresses(
    server: tuple[str, int],
    qname: DomainName,
    timeout_s: float = 2.0,
    include_aaaa: bool = False,
) -> tuple[list[str], int]:
    """Resolved addresses (as strings) and the rcode of the A response."""
    resp = exchange(server, qname, qtype=wire.TYPE_A, timeout_s=timeout_s)
    msg = wire.decode(resp)
    addresses = [str(a) for a in wire.answer_addresses(msg, qname)]
    rcode = msg.header.rcode
    if include_aaaa:
        resp6 = exchange(server, qname, qtype=wire.TYPE_AAAA, timeout_s=timeout_s)
        msg6 = wire.decode(resp6)
        addresses += [str(a) for a in wire.answer_addresses(msg6, qname)]
    return addresses, rcode
