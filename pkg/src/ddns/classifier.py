"""CDN-affinity map construction.

Resolve candidate domains, look up address ownership over RDAP, match
organization strings against per-CDN keyword rules, and emit a routing map
in the policy mapping-file format. RDAP responses are cached on disk (one
raw JSON file per ip) so a warm rerun touches the network zero times and
reproduces the map byte for byte.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import requests

from . import stub
from ._util import atomic_write_text
from .names import DomainName, normalize_name
from .policy import DomainResolverMap, UpstreamResolver, map_file_lines

DEFAULT_RDAP_ENDPOINT = "https://rdap.org/ip/"
RDAP_MIN_INTERVAL_S = 0.2
RDAP_MAX_REDIRECTS = 5


class RdapError(Exception):
    """Base class for per-ip RDAP lookup failures."""


class NetworkError(RdapError):
    pass


class HttpStatus(RdapError):
    def __init__(self, status: int, url: str):
        super().__init__("HTTP %d from %s" % (status, url))
        self.status = status


class MalformedJson(RdapError):
    pass


@dataclass
class RdapRecord:
    ip: str
    org_strings: list[str]  # may be empty: lookup succeeded, no names found
    source_url: str
    fetched_at: float


@dataclass(frozen=True)
class CdnRule:
    cdn_name: str
    keywords: tuple[str, ...]
    resolver_id: str

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("rule %r has no keywords" % self.cdn_name)


def default_rules(cloudflare_resolver_id: str = "cloudflare",
                  google_resolver_id: str = "google") -> list[CdnRule]:
    return [
        CdnRule("Cloudflare", ("cloudflare",), cloudflare_resolver_id),
        CdnRule("Google", ("google",), google_resolver_id),
    ]


def extract_org_strings(doc) -> list[str]:
    """The top-level "name" plus every entity vCard "fn" value, in document
    order (entities may nest)."""
    names: list[str] = []
    if isinstance(doc, dict):
        top = doc.get("name")
        if isinstance(top, str):
            names.append(top)
        _walk_entities(doc.get("entities"), names)
    return names


def _walk_entities(entities, out: list[str]) -> None:
    if not isinstance(entities, list):
        return
    for entity in entities:
        if not isinstance(entity, dict):
            continue
        vcard = entity.get("vcardArray")
        if isinstance(vcard, list) and len(vcard) >= 2 and isinstance(vcard[1], list):
            for prop in vcard[1]:
                if (isinstance(prop, list) and len(prop) >= 4
                        and prop[0] == "fn" and isinstance(prop[3], str)):
                    out.append(prop[3])
        _walk_entities(entity.get("entities"), out)


class RdapClient:
    """Disk-cached RDAP-over-HTTPS client with polite request spacing."""

    def __init__(self, cache_dir: str, endpoint: str = DEFAULT_RDAP_ENDPOINT,
                 min_interval_s: float = RDAP_MIN_INTERVAL_S, timeout_s: float = 15.0,
                 session: requests.Session | None = None):
        self.cache_dir = cache_dir
        self.endpoint = endpoint if endpoint.endswith("/") else endpoint + "/"
        self.min_interval_s = min_interval_s
        self.timeout_s = timeout_s
        self.network_calls = 0
        self._session = session or requests.Session()
        self._session.max_redirects = RDAP_MAX_REDIRECTS
        self._gate = threading.Lock()
        self._last_request = 0.0
        os.makedirs(cache_dir, exist_ok=True)

    def _cache_path(self, ip: str) -> str:
        return os.path.join(self.cache_dir, "%s.json" % ip)

    def lookup(self, ip: str) -> RdapRecord:
        """Fetch (or read from cache) the raw RDAP JSON for an address and
        extract its organization strings."""
        path = self._cache_path(ip)
        url = self.endpoint + ip
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                raw = fh.read()
            try:
                doc = json.loads(raw)
            except ValueError as e:
                raise MalformedJson("cached %s: %s" % (path, e)) from None
            return RdapRecord(ip=ip, org_strings=extract_org_strings(doc),
                              source_url=url, fetched_at=os.path.getmtime(path))

        self._pace()
        try:
            resp = self._session.get(url, timeout=self.timeout_s, allow_redirects=True,
                                     headers={"Accept": "application/rdap+json, application/json"})
        except requests.RequestException as e:
            raise NetworkError(str(e)) from None
        finally:
            self.network_calls += 1
        if not 200 <= resp.status_code < 300:
            raise HttpStatus(resp.status_code, url)
        try:
            doc = resp.json()
        except ValueError as e:
            raise MalformedJson(str(e)) from None
        self._store(path, resp.text)
        return RdapRecord(ip=ip, org_strings=extract_org_strings(doc),
                          source_url=url, fetched_at=time.time())

    def _pace(self) -> None:
        # Serializes live requests and keeps >= min_interval_s between them.
        with self._gate:
            wait = self._last_request + self.min_interval_s - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def _store(self, path: str, text: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except OSError:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def match_rule(org_strings: Sequence[str], rules: Sequence[CdnRule]) -> CdnRule | None:
    """First rule with any keyword appearing (case-insensitively) inside any
    organization string."""
    lowered = [s.lower() for s in org_strings]
    for rule in rules:
        for keyword in rule.keywords:
            kw = keyword.lower()
            if any(kw in org for org in lowered):
                return rule
    return None


def classify_domain(ips: Sequence[str], records: Mapping[str, RdapRecord],
                    rules: Sequence[CdnRule]) -> str | None:
    """The CDN owning a strict majority of the domain's addresses, else None.

    Addresses without an RDAP record count as non-matching, so ties and
    sub-majority matches fall back to the default resolver at runtime.
    """
    votes: dict[str, int] = {}
    for ip in ips:
        record = records.get(ip)
        if record is None:
            continue
        rule = match_rule(record.org_strings, rules)
        if rule is not None:
            votes[rule.cdn_name] = votes.get(rule.cdn_name, 0) + 1
    if not votes:
        return None
    best_cdn, best_votes = max(votes.items(), key=lambda kv: kv[1])
    if best_votes * 2 > len(ips):
        return best_cdn
    return None


@dataclass
class DomainClassification:
    domain: str
    ips: list[str]
    ip_matches: dict[str, str | None]
    assignment: str | None
    decision: str  # e.g. "majority:2/3", "no-majority", "no-ips", "error:timeout"
    error: str | None = None


@dataclass
class ClassificationReport:
    resolver_id: str
    resolved_at: str  # resolution snapshot timestamp (ISO 8601)
    rules: list[CdnRule]
    domains: list[DomainClassification] = field(default_factory=list)
    rdap_errors: dict[str, str] = field(default_factory=dict)

    def assignments(self) -> dict[str, str]:
        return {d.domain: d.assignment for d in self.domains if d.assignment is not None}

    def to_json_dict(self) -> dict:
        return {
            "resolver_id": self.resolver_id,
            "resolved_at": self.resolved_at,
            "rules": [
                {"cdn_name": r.cdn_name, "keywords": list(r.keywords), "resolver_id": r.resolver_id}
                for r in self.rules
            ],
            "domains": [
                {
                    "domain": d.domain,
                    "ips": d.ips,
                    "ip_matches": d.ip_matches,
                    "assignment": d.assignment,
                    "decision": d.decision,
                    "error": d.error,
                }
                for d in self.domains
            ],
            "rdap_errors": self.rdap_errors,
        }

    def save(self, path: str) -> None:
        atomic_write_text(path, json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")


def resolve_candidates(domains: Iterable[DomainName], resolver: UpstreamResolver,
                       timeout_s: float = 2.0, include_aaaa: bool = False,
                       ) -> dict[str, tuple[list[str], str | None]]:
    """domain → (addresses, error note). Per-domain failures are recorded,
    never fatal."""
    out: dict[str, tuple[list[str], str | None]] = {}
    server = (resolver.address, resolver.port)
    for name in domains:
        try:
            addresses, rcode = stub.resolve_addresses(server, name, timeout_s=timeout_s,
                                                      include_aaaa=include_aaaa)
        except stub.QueryTimeout:
            out[str(name)] = ([], "timeout")
            continue
        except (stub.TargetRefused, OSError) as e:
            out[str(name)] = ([], "unreachable: %s" % e)
            continue
        if rcode == 3:
            out[str(name)] = (addresses, "nxdomain")
        elif rcode != 0:
            out[str(name)] = (addresses, "rcode:%d" % rcode)
        else:
            out[str(name)] = (addresses, None)
    return out


def classify_all(resolved: Mapping[str, tuple[list[str], str | None]],
                 rdap: RdapClient, rules: Sequence[CdnRule],
                 resolver_id: str, parallelism: int = 4) -> ClassificationReport:
    """RDAP-classify every resolved domain into a report."""
    report = ClassificationReport(
        resolver_id=resolver_id,
        resolved_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        rules=list(rules),
    )
    all_ips = sorted({ip for ips, _ in resolved.values() for ip in ips})
    records: dict[str, RdapRecord] = {}
    lock = threading.Lock()

    def fetch(ip: str) -> None:
        try:
            record = rdap.lookup(ip)
        except RdapError as e:
            with lock:
                report.rdap_errors[ip] = "%s: %s" % (type(e).__name__, e)
            return
        with lock:
            records[ip] = record

    if parallelism > 1 and len(all_ips) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(fetch, all_ips))
    else:
        for ip in all_ips:
            fetch(ip)

    for domain in sorted(resolved):
        ips, error = resolved[domain]
        matches = {}
        for ip in ips:
            record = records.get(ip)
            rule = match_rule(record.org_strings, rules) if record else None
            matches[ip] = rule.cdn_name if rule else None
        assignment = classify_domain(ips, records, rules)
        if error and not ips:
            decision = "error:%s" % error
        elif not ips:
            decision = "no-ips"
        elif assignment is not None:
            # count over the ip list (duplicates included), like classify_domain
            decision = "majority:%d/%d" % (
                sum(1 for ip in ips if matches.get(ip) == assignment), len(ips))
        else:
            decision = "no-majority"
        report.domains.append(DomainClassification(
            domain=domain, ips=list(ips), ip_matches=matches,
            assignment=assignment, decision=decision, error=error,
        ))
    return report


def build_map(report: ClassificationReport, rules: Sequence[CdnRule],
              default_resolver_id: str, out_path: str | None = None) -> DomainResolverMap:
    """Exact rules for every classified domain, targeting its CDN's resolver;
    unmapped domains are omitted and fall through to the default at runtime."""
    by_cdn = {rule.cdn_name: rule.resolver_id for rule in rules}
    exact = {}
    for domain, cdn in sorted(report.assignments().items()):
        exact[normalize_name(domain)] = by_cdn[cdn]
    rules_map = DomainResolverMap(exact=exact, suffix={})
    if out_path is not None:
        header = "cdn-affinity map; unmapped names use default resolver %r" % default_resolver_id
        text = "\n".join(map_file_lines(rules_map, header=header)) + "\n"
        atomic_write_text(out_path, text)
    return rules_map
