"""RFC 1035 message codec.

decode() resolves compression pointers and is total over arbitrary bytes:
it either returns a DnsMessage or raises a typed error in bounded time.
encode() never emits compression. Only A, AAAA, and CNAME rdata are typed;
everything else (including EDNS OPT) passes through as opaque bytes.

Decode rules that matter for interoperability:
  - compression pointers must target an offset strictly before the start of
    the current name (or of the previous jump region), at most 63 hops;
  - label bytes outside printable ASCII, or ".", raise InvalidName;
  - A/AAAA rdata of the wrong size is kept opaque rather than rejected;
  - bytes past the declared sections are counted as trailing garbage,
    reported on the message instead of failing the decode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv6Address
from typing import Union

from .names import MAX_NAME_LEN, DomainName, InvalidName, label_from_wire

MAX_MESSAGE_SIZE = 65535
MAX_POINTER_HOPS = 63

TYPE_A = 1
TYPE_CNAME = 5
TYPE_SOA = 6
TYPE_AAAA = 28
TYPE_OPT = 41
CLASS_IN = 1

RCODE_NOERROR = 0
RCODE_FORMERR = 1
RCODE_SERVFAIL = 2
RCODE_NXDOMAIN = 3


class WireError(ValueError):
    """Base class for wire-format decode/encode failures."""


class Truncated(WireError):
    pass


class BadPointer(WireError):
    pass


class LabelTooLong(WireError):
    pass


class NoQuestion(WireError):
    pass


class MessageTooLarge(WireError):
    pass


# Everything decode() may raise, for except clauses.
DECODE_ERRORS = (WireError, InvalidName)


@dataclass
class DnsHeader:
    """Header id and flag bits; section counts are derived from the
    sections themselves."""

    id: int = 0
    qr: bool = False
    opcode: int = 0
    aa: bool = False
    tc: bool = False
    rd: bool = False
    ra: bool = False
    z: bool = False
    ad: bool = False
    cd: bool = False
    rcode: int = 0


@dataclass
class Question:
    qname: DomainName
    qtype: int
    qclass: int = CLASS_IN


@dataclass(frozen=True)
class RdataA:
    address: IPv4Address


@dataclass(frozen=True)
class RdataAAAA:
    address: IPv6Address


@dataclass(frozen=True)
class RdataCname:
    target: DomainName


@dataclass(frozen=True)
class RdataOpaque:
    data: bytes


Rdata = Union[RdataA, RdataAAAA, RdataCname, RdataOpaque]


@dataclass
class ResourceRecord:
    name: DomainName
    rtype: int
    rclass: int
    ttl: int
    rdata: Rdata


@dataclass
class DnsMessage:
    header: DnsHeader = field(default_factory=DnsHeader)
    questions: list[Question] = field(default_factory=list)
    answers: list[ResourceRecord] = field(default_factory=list)
    authority: list[ResourceRecord] = field(default_factory=list)
    additional: list[ResourceRecord] = field(default_factory=list)
    # Bytes found past the declared sections; reported, not fatal, and
    # excluded from equality so round-trip laws stay clean.
    trailing_garbage: int = field(default=0, compare=False)


def _read_name(wire: bytes, pos: int) -> tuple[DomainName, int]:
    """Read a possibly-compressed name starting at pos.

    Returns (name, position after the name field). Pointer targets must be
    strictly below the start of the current name/jump region and hops are
    capped, so loops are impossible and work is bounded.
    """
    labels: list[str] = []
    length_so_far = 0
    after: int | None = None  # resume position in the top-level stream
    bound = pos  # next pointer must target an offset < bound
    hops = 0
    while True:
        if pos >= len(wire):
            raise Truncated("name runs past end of message")
        octet = wire[pos]
        if octet == 0:
            pos += 1
            break
        kind = octet & 0xC0
        if kind == 0xC0:
            if pos + 1 >= len(wire):
                raise Truncated("pointer runs past end of message")
            target = ((octet & 0x3F) << 8) | wire[pos + 1]
            if after is None:
                after = pos + 2
            if target >= bound:
                raise BadPointer("pointer to offset %d does not go strictly backward" % target)
            hops += 1
            if hops > MAX_POINTER_HOPS:
                raise BadPointer("pointer chain exceeds %d hops" % MAX_POINTER_HOPS)
            pos = target
            bound = target
            continue
        if kind != 0x00:
            raise BadPointer("reserved label type 0x%02x" % kind)
        if pos + 1 + octet > len(wire):
            raise Truncated("label runs past end of message")
        labels.append(label_from_wire(wire[pos + 1:pos + 1 + octet]))
        length_so_far += octet + (1 if length_so_far else 0)
        if length_so_far > MAX_NAME_LEN:
            raise LabelTooLong("name exceeds %d bytes" % MAX_NAME_LEN)
        pos += 1 + octet
    return DomainName(tuple(labels)), (after if after is not None else pos)


def skip_name(wire: bytes, pos: int) -> int:
    """Position just past a name field, without following pointers."""
    while True:
        if pos >= len(wire):
            raise Truncated("name runs past end of message")
        octet = wire[pos]
        if octet == 0:
            return pos + 1
        if octet & 0xC0 == 0xC0:
            if pos + 1 >= len(wire):
                raise Truncated("pointer runs past end of message")
            return pos + 2
        if octet & 0xC0 != 0x00:
            raise BadPointer("reserved label type 0x%02x" % (octet & 0xC0))
        pos += 1 + octet


def _decode_header(wire: bytes) -> tuple[DnsHeader, tuple[int, int, int, int]]:
    if len(wire) < 12:
        raise Truncated("message shorter than the 12-byte header")
    msg_id, flags, qd, an, ns, ar = struct.unpack("!HHHHHH", wire[:12])
    header = DnsHeader(
        id=msg_id,
        qr=bool(flags >> 15 & 1),
        opcode=flags >> 11 & 0xF,
        aa=bool(flags >> 10 & 1),
        tc=bool(flags >> 9 & 1),
        rd=bool(flags >> 8 & 1),
        ra=bool(flags >> 7 & 1),
        z=bool(flags >> 6 & 1),
        ad=bool(flags >> 5 & 1),
        cd=bool(flags >> 4 & 1),
        rcode=flags & 0xF,
    )
    return header, (qd, an, ns, ar)


def _decode_rr(wire: bytes, pos: int) -> tuple[ResourceRecord, int]:
    name, pos = _read_name(wire, pos)
    if pos + 10 > len(wire):
        raise Truncated("record header runs past end of message")
    rtype, rclass, ttl, rdlength = struct.unpack("!HHIH", wire[pos:pos + 10])
    pos += 10
    if pos + rdlength > len(wire):
        raise Truncated("rdata runs past end of message")
    raw = wire[pos:pos + rdlength]
    rdata: Rdata
    if rtype == TYPE_A and rdlength == 4:
        rdata = RdataA(IPv4Address(raw))
    elif rtype == TYPE_AAAA and rdlength == 16:
        rdata = RdataAAAA(IPv6Address(raw))
    elif rtype == TYPE_CNAME:
        # Parsed at the absolute offset so pointers inside rdata resolve.
        target, _ = _read_name(wire, pos)
        rdata = RdataCname(target)
    else:
        rdata = RdataOpaque(raw)
    return ResourceRecord(name=name, rtype=rtype, rclass=rclass, ttl=ttl, rdata=rdata), pos + rdlength


def decode(wire: bytes) -> DnsMessage:
    """Decode a full message, resolving compression pointers."""
    header, (qd, an, ns, ar) = _decode_header(wire)
    msg = DnsMessage(header=header)
    pos = 12
    for _ in range(qd):
        qname, pos = _read_name(wire, pos)
        if pos + 4 > len(wire):
            raise Truncated("question runs past end of message")
        qtype, qclass = struct.unpack("!HH", wire[pos:pos + 4])
        pos += 4
        msg.questions.append(Question(qname=qname, qtype=qtype, qclass=qclass))
    for section, count in ((msg.answers, an), (msg.authority, ns), (msg.additional, ar)):
        for _ in range(count):
            rr, pos = _decode_rr(wire, pos)
            section.append(rr)
    msg.trailing_garbage = len(wire) - pos
    return msg


def _encode_name(name: DomainName) -> bytes:
    out = bytearray()
    for label in name.labels:
        raw = label.encode("ascii")
        if not 1 <= len(raw) <= 63:
            raise LabelTooLong("label %r not encodable" % label)
        out.append(len(raw))
        out += raw
    out.append(0)
    return bytes(out)


def _encode_rr(rr: ResourceRecord) -> bytes:
    rdata = rr.rdata
    if isinstance(rdata, RdataA):
        raw = rdata.address.packed
    elif isinstance(rdata, RdataAAAA):
        raw = rdata.address.packed
    elif isinstance(rdata, RdataCname):
        raw = _encode_name(rdata.target)
    else:
        raw = rdata.data
    if len(raw) > 0xFFFF:
        raise MessageTooLarge("rdata exceeds 65535 bytes")
    return (
        _encode_name(rr.name)
        + struct.pack("!HHIH", rr.rtype & 0xFFFF, rr.rclass & 0xFFFF, rr.ttl & 0xFFFFFFFF, len(raw))
        + raw
    )


def encode(msg: DnsMessage) -> bytes:
    """Encode with counts taken from the sections; names are always emitted
    fully expanded (no compression)."""
    h = msg.header
    flags = (
        (int(h.qr) << 15)
        | ((h.opcode & 0xF) << 11)
        | (int(h.aa) << 10)
        | (int(h.tc) << 9)
        | (int(h.rd) << 8)
        | (int(h.ra) << 7)
        | (int(h.z) << 6)
        | (int(h.ad) << 5)
        | (int(h.cd) << 4)
        | (h.rcode & 0xF)
    )
    out = bytearray(
        struct.pack(
            "!HHHHHH",
            h.id & 0xFFFF,
            flags,
            len(msg.questions),
            len(msg.answers),
            len(msg.authority),
            len(msg.additional),
        )
    )
    for q in msg.questions:
        out += _encode_name(q.qname)
        out += struct.pack("!HH", q.qtype & 0xFFFF, q.qclass & 0xFFFF)
    for section in (msg.answers, msg.authority, msg.additional):
        for rr in section:
            out += _encode_rr(rr)
    if len(out) > MAX_MESSAGE_SIZE:
        raise MessageTooLarge("message is %d bytes" % len(out))
    return bytes(out)


def read_question(wire: bytes) -> tuple[DomainName, int, int, int]:
    """Fast path: (qname, qtype, qclass, position after the first question)
    without touching later sections."""
    _, (qd, _, _, _) = _decode_header(wire)
    if qd == 0:
        raise NoQuestion("message has no question section")
    qname, pos = _read_name(wire, 12)
    if pos + 4 > len(wire):
        raise Truncated("question runs past end of message")
    qtype, qclass = struct.unpack("!HH", wire[pos:pos + 4])
    return qname, qtype, qclass, pos + 4


def extract_qname(wire: bytes) -> tuple[DomainName, int]:
    """First question's (qname, qtype); works on queries and responses."""
    qname, qtype, _, _ = read_question(wire)
    return qname, qtype


def answer_addresses(msg: DnsMessage, qname: DomainName) -> list[IPv4Address | IPv6Address]:
    """All A/AAAA addresses reachable from qname along the answer-section
    CNAME chain, in message order. Cycle-safe: each owner is visited once."""
    chain = {qname}
    owner = qname
    while True:
        target = None
        for rr in msg.answers:
            if rr.name == owner and isinstance(rr.rdata, RdataCname):
                target = rr.rdata.target
                break
        if target is None or target in chain:
            break
        chain.add(target)
        owner = target
    out = []
    for rr in msg.answers:
        if rr.name in chain and isinstance(rr.rdata, (RdataA, RdataAAAA)):
            out.append(rr.rdata.address)
    return out


def build_query(qname: DomainName, qtype: int = TYPE_A, msg_id: int = 0, rd: bool = True) -> DnsMessage:
    """A one-question query message."""
    return DnsMessage(
        header=DnsHeader(id=msg_id, rd=rd),
        questions=[Question(qname=qname, qtype=qtype, qclass=CLASS_IN)],
    )


def patch_id(wire: bytes, msg_id: int) -> bytes:
    """The same message bytes with the transaction id replaced."""
    return struct.pack("!H", msg_id & 0xFFFF) + wire[2:]


def message_id(wire: bytes) -> int:
    if len(wire) < 2:
        raise Truncated("no transaction id")
    return struct.unpack("!H", wire[:2])[0]


def rcode_of(wire: bytes) -> int:
    if len(wire) < 4:
        raise Truncated("no flags")
    return wire[3] & 0x0F


def tc_flag(wire: bytes) -> bool:
    if len(wire) < 4:
        raise Truncated("no flags")
    return bool(wire[2] & 0x02)


def error_response(query_wire: bytes, rcode: int) -> bytes:
    """A response for query_wire carrying the given rcode.

    If the query parses as far as its header, its bytes are echoed with
    qr=1 and the rcode patched in; otherwise a bare 12-byte header is
    synthesized with whatever id was readable.
    """
    if len(query_wire) >= 12:
        out = bytearray(query_wire)
        out[2] |= 0x80  # qr
        out[3] = (out[3] & 0xF0) | (rcode & 0x0F)
        return bytes(out)
    msg_id = message_id(query_wire) if len(query_wire) >= 2 else 0
    return struct.pack("!HHHHHH", msg_id, 0x8000 | (rcode & 0x0F), 0, 0, 0, 0)


def rr_ttl_slots(wire: bytes) -> list[tuple[int, int]]:
    """(byte offset, ttl) for every record in the three RR sections.

    Used to serve cached responses with decremented TTLs by patching the
    stored bytes in place.
    """
    _, (qd, an, ns, ar) = _decode_header(wire)
    pos = 12
    for _ in range(qd):
        pos = skip_name(wire, pos)
        if pos + 4 > len(wire):
            raise Truncated("question runs past end of message")
        pos += 4
    slots = []
    for _ in range(an + ns + ar):
        pos = skip_name(wire, pos)
        if pos + 10 > len(wire):
            raise Truncated("record header runs past end of message")
        ttl = struct.unpack("!I", wire[pos + 4:pos + 8])[0]
        rdlength = struct.unpack("!H", wire[pos + 8:pos + 10])[0]
        slots.append((pos + 4, ttl))
        pos += 10 + rdlength
        if pos > len(wire):
            raise Truncated("rdata runs past end of message")
    return slots


def soa_minimum(wire: bytes) -> int | None:
    """The MINIMUM field of the first authority-section SOA record, or None.

    Walks the raw bytes so compressed MNAME/RNAME fields are handled without
    typing SOA rdata in the message model.
    """
    try:
        _, (qd, an, ns, ar) = _decode_header(wire)
        pos = 12
        for _ in range(qd):
            pos = skip_name(wire, pos)
            pos += 4
        for index in range(an + ns + ar):
            pos = skip_name(wire, pos)
            if pos + 10 > len(wire):
                return None
            rtype, _, _, rdlength = struct.unpack("!HHIH", wire[pos:pos + 10])
            rdata_start = pos + 10
            pos = rdata_start + rdlength
            if pos > len(wire):
                return None
            in_authority = an <= index < an + ns
            if in_authority and rtype == TYPE_SOA:
                p = skip_name(wire, rdata_start)  # MNAME
                p = skip_name(wire, p)  # RNAME
                if p + 20 > len(wire):
                    return None
                return struct.unpack("!I", wire[p + 16:p + 20])[0]
    except DECODE_ERRORS:
        return None
    return None


def frame_tcp(wire: bytes) -> bytes:
    """Prefix with the 2-byte length used by DNS over TCP."""
    if len(wire) > 0xFFFF:
        raise MessageTooLarge("message is %d bytes" % len(wire))
    return struct.pack("!H", len(wire)) + wire


def read_tcp_message(sock) -> bytes | None:
    """Read one length-prefixed message from a stream socket; None on EOF
    at a message boundary, Truncated on EOF mid-message."""
    header = _read_exact(sock, 2)
    if header is None:
        return None
    (length,) = struct.unpack("!H", header)
    if length == 0:
        return b""
    body = _read_exact(sock, length)
    if body is None:
        raise Truncated("stream closed mid-message")
    return body


def _read_exact(sock, n: int) -> bytes | None:
    """Exactly n bytes, or None on clean EOF; Truncated on partial EOF."""
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if not buf:
                return None
            raise Truncated("stream closed mid-message")
        buf += chunk
    return buf
