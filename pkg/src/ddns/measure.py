"""Evaluation pipeline: HAR domain extraction, Do53 timing runs, latency
probes to resolved addresses, and paired comparisons with CDF output.

Timing runs are sequential by default so the measurement never queues behind
itself; probes across distinct addresses may run with bounded parallelism.
All timing uses the monotonic performance clock.
"""

from __future__ import annotations

import ipaddress
import json
import os
import select
import socket
import statistics
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import urlsplit

from . import stub, wire
from ._util import atomic_write_text
from .names import DomainName, InvalidName, normalize_name

PROBE_SAMPLES = 5
DEFAULT_BAND_HALFWIDTH_MS = {"dns": 0.3, "plt": 30.0}


class MalformedHar(ValueError):
    pass


class MalformedLog(ValueError):
    """A timing log line is not valid NDJSON of the expected shape."""


class TargetUnreachable(RuntimeError):
    """The bench target refused every one of the first 10 queries."""


class NoOverlap(ValueError):
    """Two runs share no keys, so pairing is impossible."""


class ProbeFailed(RuntimeError):
    """Fewer than 3 of the 5 probes to an address succeeded."""


# -- HAR extraction ----------------------------------------------------------

@dataclass
class HarResource:
    url: str
    host: str
    server_ip: str | None


@dataclass
class HarExtract:
    unique_domains: set[DomainName]
    resources: list[HarResource]


def _is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
        return True
    except ValueError:
        return False


def har_extract(har_json: bytes | str) -> HarExtract:
    """Unique request hosts and per-resource server addresses from a HAR 1.2
    document. IP-literal hosts stay in the resource list but are not domains."""
    try:
        doc = json.loads(har_json)
        entries = doc["log"]["entries"]
    except (ValueError, TypeError, KeyError) as e:
        raise MalformedHar("not a HAR 1.2 document: %s" % e) from None
    if not isinstance(entries, list):
        raise MalformedHar("log.entries is not a list")
    domains: set[DomainName] = set()
    resources: list[HarResource] = []
    for entry in entries:
        try:
            url = entry["request"]["url"]
        except (TypeError, KeyError):
            raise MalformedHar("entry without request.url") from None
        host = urlsplit(url).hostname or ""
        if not host:
            continue
        server_ip = entry.get("serverIPAddress") or None
        resources.append(HarResource(url=url, host=host, server_ip=server_ip))
        if not _is_ip_literal(host):
            try:
                domains.add(normalize_name(host))
            except InvalidName:
                pass
    return HarExtract(unique_domains=domains, resources=resources)


# -- query timing ------------------------------------------------------------

@dataclass
class QueryTiming:
    domain: str
    label: str  # resolver id or strategy label for the run
    rtt_ms: float | None
    rcode: int | None
    attempt: int
    cold: bool
    outcome: str  # answered | timeout


def measure_queries(
    domains: Sequence[DomainName],
    target: tuple[str, int],
    label: str,
    repeats: int = 1,
    inter_query_delay_ms: float = 0.0,
    timeout_ms: float = 2000.0,
    qtype: int = wire.TYPE_A,
    clock: Callable[[], float] = time.perf_counter,
) -> list[QueryTiming]:
    """Query every domain `repeats` times back to back against one target,
    recording the monotonic-clock response time per query.

    Timeouts are recorded (and excluded from rtt stats downstream); the run
    aborts only if the OS reports the target unreachable for all of the
    first 10 queries.
    """
    timings: list[QueryTiming] = []
    first_outcomes: list[str] = []
    for name in domains:
        for attempt in range(repeats):
            if inter_query_delay_ms > 0 and timings:
                time.sleep(inter_query_delay_ms / 1000.0)
            started = clock()
            try:
                response = stub.exchange(target, name, qtype=qtype, timeout_s=timeout_ms / 1000.0)
            except stub.QueryTimeout:
                timing = QueryTiming(domain=str(name), label=label, rtt_ms=None, rcode=None,
                                     attempt=attempt, cold=attempt == 0, outcome="timeout")
                first_outcomes.append("timeout")
            except (stub.TargetRefused, OSError):
                timing = QueryTiming(domain=str(name), label=label, rtt_ms=None, rcode=None,
                                     attempt=attempt, cold=attempt == 0, outcome="timeout")
                first_outcomes.append("refused")
            else:
                elapsed_ms = round((clock() - started) * 1000.0, 3)
                timing = QueryTiming(domain=str(name), label=label, rtt_ms=elapsed_ms,
                                     rcode=wire.rcode_of(response), attempt=attempt,
                                     cold=attempt == 0, outcome="answered")
                first_outcomes.append("answered")
            timings.append(timing)
            if len(first_outcomes) == 10 and all(o == "refused" for o in first_outcomes):
                raise TargetUnreachable("%s:%d refused the first 10 queries" % target)
    return timings


def write_timings(path: str, timings: Iterable[QueryTiming], meta: dict) -> None:
    """Newline-delimited JSON: one meta line, then one line per timing."""
    lines = [json.dumps({"type": "meta", **meta}, separators=(",", ":"), sort_keys=True)]
    for t in timings:
        lines.append(json.dumps({
            "type": "timing", "domain": t.domain, "label": t.label, "rtt_ms": t.rtt_ms,
            "rcode": t.rcode, "attempt": t.attempt, "cold": t.cold, "outcome": t.outcome,
        }, separators=(",", ":")))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_timings(path: str) -> tuple[list[QueryTiming], dict]:
    timings: list[QueryTiming] = []
    meta: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                if doc.get("type") == "meta":
                    meta = {k: v for k, v in doc.items() if k != "type"}
                    continue
                timings.append(QueryTiming(
                    domain=doc["domain"], label=doc.get("label", ""), rtt_ms=doc.get("rtt_ms"),
                    rcode=doc.get("rcode"), attempt=doc.get("attempt", 0),
                    cold=doc.get("cold", False), outcome=doc.get("outcome", "answered"),
                ))
            except (ValueError, KeyError, AttributeError) as e:
                raise MalformedLog("%s line %d: %s" % (path, lineno, e)) from None
    return timings, meta


# -- latency probes ----------------------------------------------------------

@dataclass
class ProbeResult:
    ip: str
    method: str  # tcp-connect-443 | icmp-echo
    samples: list[float]  # successful round-trip times, ms
    median_ms: float


def probe_latency(ip: str, method: str = "tcp", port: int = 443,
                  timeout_s: float = 2.0) -> ProbeResult:
    """Five round-trip probes to one address; the median is the result.

    tcp measures connection initiation to handshake completion (works
    unprivileged); icmp sends echo requests where the OS permits. Fewer than
    3 successful samples raises ProbeFailed.
    """
    if method not in ("tcp", "icmp"):
        raise ValueError("unknown probe method %r" % method)
    samples: list[float] = []
    for seq in range(PROBE_SAMPLES):
        ms = _tcp_probe(ip, port, timeout_s) if method == "tcp" else _icmp_probe(ip, seq, timeout_s)
        if ms is not None:
            samples.append(round(ms, 3))
    if len(samples) < 3:
        raise ProbeFailed("%s: %d/%d probes succeeded" % (ip, len(samples), PROBE_SAMPLES))
    label = "tcp-connect-%d" % port if method == "tcp" else "icmp-echo"
    return ProbeResult(ip=ip, method=label, samples=samples,
                       median_ms=statistics.median(samples))


def _tcp_probe(ip: str, port: int, timeout_s: float) -> float | None:
    started = time.perf_counter()
    try:
        sock = socket.create_connection((ip, port), timeout=timeout_s)
    except OSError:
        return None
    elapsed = (time.perf_counter() - started) * 1000.0
    sock.close()
    return elapsed


def _icmp_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack("!%dH" % (len(data) // 2), data))
    total = (total >> 16) + (total & 0xFFFF)
    total += total >> 16
    return ~total & 0xFFFF


def _icmp_probe(ip: str, seq: int, timeout_s: float) -> float | None:
    """One echo request/reply. Uses a raw socket when allowed, otherwise the
    unprivileged ICMP datagram socket (net.ipv4.ping_group_range)."""
    try:
        sock = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_ICMP)
    except PermissionError:
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_ICMP)
        except (PermissionError, OSError):
            return None
    ident = os.getpid() & 0xFFFF
    payload = struct.pack("!d", time.perf_counter())
    header = struct.pack("!BBHHH", 8, 0, 0, ident, seq)
    checksum = _icmp_checksum(header + payload)
    packet = struct.pack("!BBHHH", 8, 0, checksum, ident, seq) + payload
    try:
        with sock:
            sock.settimeout(timeout_s)
            started = time.perf_counter()
            sock.sendto(packet, (ip, 0))
            deadline = started + timeout_s
            while True:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    return None
                ready, _, _ = select.select([sock], [], [], remaining)
                if not ready:
                    return None
                data, _ = sock.recvfrom(2048)
                # strip the IP header when the kernel hands us one
                offset = (data[0] & 0x0F) * 4 if data and data[0] >> 4 == 4 else 0
                icmp = data[offset:]
                if len(icmp) >= 8 and icmp[0] == 0:  # echo reply
                    _, _, _, r_ident, r_seq = struct.unpack("!BBHHH", icmp[:8])
                    if r_seq == seq:
                        return (time.perf_counter() - started) * 1000.0
    except OSError:
        return None


# -- paired comparison -------------------------------------------------------

@dataclass
class PairedDiff:
    key: str
    value_a_ms: float
    value_b_ms: float
    diff_ms: float


@dataclass
class PairedComparison:
    metric: str
    pairs: list[PairedDiff]
    median_diff_ms: float
    band: str  # faster | similar | slower (run A relative to run B)
    band_halfwidth_ms: float


RunValues = Mapping[str, Sequence[float]]


def timings_by_key(timings: Iterable[QueryTiming]) -> dict[str, list[float]]:
    """Answered response times grouped by domain."""
    out: dict[str, list[float]] = {}
    for t in timings:
        if t.outcome == "answered" and t.rtt_ms is not None:
            out.setdefault(t.domain, []).append(t.rtt_ms)
    return out


def band_halfwidth_for(metric: str) -> float:
    """Default "similar" half-width for a report kind: 0.3 ms for DNS
    timings, 30 ms for page-load times."""
    try:
        return DEFAULT_BAND_HALFWIDTH_MS[metric]
    except KeyError:
        raise ValueError("no default band for metric %r; pass band_halfwidth_ms" % metric) from None


def paired_compare(run_a: RunValues, run_b: RunValues, metric: str = "dns",
                   band_halfwidth_ms: float | None = None) -> PairedComparison:
    """Inner-join two runs on key, aggregate repeats by median, difference
    as A − B, and classify the median difference against the band.

    Negative median means run A was faster.
    """
    halfwidth = band_halfwidth_ms if band_halfwidth_ms is not None else band_halfwidth_for(metric)
    shared = sorted(set(run_a) & set(run_b))
    if not shared:
        raise NoOverlap("runs share no keys")
    pairs = []
    for key in shared:
        a = statistics.median(run_a[key])
        b = statistics.median(run_b[key])
        pairs.append(PairedDiff(key=key, value_a_ms=a, value_b_ms=b, diff_ms=a - b))
    median_diff = statistics.median(p.diff_ms for p in pairs)
    if abs(median_diff) <= halfwidth:
        band = "similar"
    elif median_diff < -halfwidth:
        band = "faster"
    else:
        band = "slower"
    return PairedComparison(metric=metric, pairs=pairs, median_diff_ms=median_diff,
                            band=band, band_halfwidth_ms=halfwidth)


# -- summaries ---------------------------------------------------------------

@dataclass
class ResolverSummary:
    resolver_id: str
    n: int
    min_ms: float
    avg_ms: float
    max_ms: float
    stdev_ms: float


def summarize(timings: Iterable[QueryTiming]) -> list[ResolverSummary]:
    """Per-label min/avg/max/population-stdev over answered timings, sorted
    by increasing average."""
    groups: dict[str, list[float]] = {}
    for t in timings:
        if t.outcome == "answered" and t.rtt_ms is not None:
            groups.setdefault(t.label, []).append(t.rtt_ms)
    summaries = [
        ResolverSummary(
            resolver_id=label, n=len(values), min_ms=min(values),
            avg_ms=statistics.fmean(values), max_ms=max(values),
            stdev_ms=statistics.pstdev(values),
        )
        for label, values in groups.items()
    ]
    summaries.sort(key=lambda s: s.avg_ms)
    return summaries


def summaries_csv(summaries: Sequence[ResolverSummary]) -> str:
    lines = ["resolver,n,min,avg,max,stdev"]
    for s in summaries:
        lines.append("%s,%d,%.3f,%.3f,%.3f,%.3f" % (s.resolver_id, s.n, s.min_ms, s.avg_ms,
                                                    s.max_ms, s.stdev_ms))
    return "\n".join(lines) + "\n"


# -- CDF emission ------------------------------------------------------------

def ecdf_points(diffs: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF: the i-th ascending diff gets cumulative fraction i/n."""
    ordered = sorted(diffs)
    n = len(ordered)
    return [(d, (i + 1) / n) for i, d in enumerate(ordered)]


def emit_cdf(comparison: PairedComparison, out_path: str, fmt: str = "csv") -> None:
    """CSV of (diff_ms, cumulative_fraction) rows, or an SVG step curve with
    a vertical line at the median."""
    if not comparison.pairs:
        raise ValueError("comparison has no pairs")
    if fmt == "csv":
        lines = ["diff_ms,cumulative_fraction"]
        for x, frac in ecdf_points([p.diff_ms for p in comparison.pairs]):
            lines.append("%.6f,%.6f" % (x, frac))
        atomic_write_text(out_path, "\n".join(lines) + "\n")
    elif fmt == "svg":
        atomic_write_text(out_path, _cdf_svg(comparison))
    else:
        raise ValueError("unknown format %r" % fmt)


_SVG_W, _SVG_H = 640, 400
_SVG_ML, _SVG_MR, _SVG_MT, _SVG_MB = 60, 20, 30, 40


def _cdf_svg(comparison: PairedComparison) -> str:
    points = ecdf_points([p.diff_ms for p in comparison.pairs])
    xs = [x for x, _ in points]
    x_min, x_max = min(xs + [comparison.median_diff_ms]), max(xs + [comparison.median_diff_ms])
    if x_max == x_min:
        x_min, x_max = x_min - 1.0, x_max + 1.0
    span = x_max - x_min
    x_min, x_max = x_min - 0.05 * span, x_max + 0.05 * span
    plot_w = _SVG_W - _SVG_ML - _SVG_MR
    plot_h = _SVG_H - _SVG_MT - _SVG_MB

    def px(x: float) -> float:
        return _SVG_ML + (x - x_min) / (x_max - x_min) * plot_w

    def py(frac: float) -> float:
        return _SVG_MT + (1.0 - frac) * plot_h

    # right-continuous step curve starting at fraction 0
    path = ["%.2f,%.2f" % (px(points[0][0]), py(0.0))]
    prev = 0.0
    for x, frac in points:
        path.append("%.2f,%.2f" % (px(x), py(prev)))
        path.append("%.2f,%.2f" % (px(x), py(frac)))
        prev = frac
    path.append("%.2f,%.2f" % (px(x_max), py(1.0)))
    median_x = px(comparison.median_diff_ms)

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
        'viewBox="0 0 %d %d" data-x-min="%.6f" data-x-max="%.6f">'
        % (_SVG_W, _SVG_H, _SVG_W, _SVG_H, x_min, x_max),
        '<rect width="%d" height="%d" fill="white"/>' % (_SVG_W, _SVG_H),
        '<text x="%d" y="18" font-family="sans-serif" font-size="13">'
        "%s difference CDF (A − B), n=%d, band=%s"
        "</text>" % (_SVG_ML, comparison.metric, len(comparison.pairs), comparison.band),
        '<line x1="%d" y1="%.2f" x2="%d" y2="%.2f" stroke="black"/>'
        % (_SVG_ML, py(0.0), _SVG_W - _SVG_MR, py(0.0)),
        '<line x1="%d" y1="%.2f" x2="%d" y2="%.2f" stroke="black"/>'
        % (_SVG_ML, py(0.0), _SVG_ML, py(1.0)),
        '<text x="%d" y="%.2f" font-family="sans-serif" font-size="11" text-anchor="end">0</text>'
        % (_SVG_ML - 6, py(0.0) + 4),
        '<text x="%d" y="%.2f" font-family="sans-serif" font-size="11" text-anchor="end">1</text>'
        % (_SVG_ML - 6, py(1.0) + 4),
        '<text x="%.2f" y="%d" font-family="sans-serif" font-size="11" text-anchor="middle">%.3g</text>'
        % (px(x_min), _SVG_H - _SVG_MB + 16, x_min),
        '<text x="%.2f" y="%d" font-family="sans-serif" font-size="11" text-anchor="middle">%.3g</text>'
        % (px(x_max), _SVG_H - _SVG_MB + 16, x_max),
        '<text x="%d" y="%d" font-family="sans-serif" font-size="12" text-anchor="middle">diff (ms)</text>'
        % (_SVG_ML + plot_w // 2, _SVG_H - 8),
        '<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="%s"/>' % " ".join(path),
        '<line id="median-line" data-median-ms="%.6f" x1="%.2f" y1="%.2f" x2="%.2f" y2="%.2f" '
        'stroke="#d62728" stroke-dasharray="4,3"/>'
        % (comparison.median_diff_ms, median_x, py(0.0), median_x, py(1.0)),
        '<text x="%.2f" y="%d" font-family="sans-serif" font-size="11" fill="#d62728" '
        'text-anchor="middle">median %.3f ms</text>' % (median_x, _SVG_MT - 6 + 14, comparison.median_diff_ms),
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def write_probe_results(path: str, results: Iterable[ProbeResult], meta: dict) -> None:
    lines = [json.dumps({"type": "meta", **meta}, separators=(",", ":"), sort_keys=True)]
    for r in results:
        lines.append(json.dumps({
            "type": "probe", "ip": r.ip, "method": r.method,
            "samples_ms": r.samples, "median_ms": r.median_ms,
        }, separators=(",", ":")))
    atomic_write_text(path, "\n".join(lines) + "\n")
