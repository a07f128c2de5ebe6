"""Resolver definitions, selection strategies, and the domain→resolver decision.

Strategies are immutable after configuration load and select_resolver() is a
pure function of (strategy, name), so it is safe to call from any number of
request handlers concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

from .names import DomainName, normalize_name

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class PolicyError(ValueError):
    """Invalid strategy, resolver, or mapping configuration."""


@dataclass(frozen=True)
class UpstreamResolver:
    """One upstream recursive resolver reachable over Do53 (UDP/TCP)."""

    id: str
    address: str
    port: int = 53
    display_name: str = ""

    def __post_init__(self):
        if not self.id:
            raise PolicyError("resolver id must be nonempty")
        if not 1 <= self.port <= 65535:
            raise PolicyError("resolver %r: port %d out of range" % (self.id, self.port))


@dataclass(frozen=True)
class DomainResolverMap:
    """Per-domain routing rules: exact names and label-boundary suffixes."""

    exact: Mapping[DomainName, str] = field(default_factory=dict)
    suffix: Mapping[DomainName, str] = field(default_factory=dict)

    def resolver_ids(self) -> set[str]:
        return set(self.exact.values()) | set(self.suffix.values())


@dataclass(frozen=True)
class Single:
    """Send every query to one resolver."""

    resolver_id: str


@dataclass(frozen=True)
class RandomSticky:
    """Hash each name to one of K resolvers; the same name always lands on
    the same resolver for a given seed.

    group_by_2ld rewrites the hashed key to the name's last two labels so all
    subdomains of a 2LD share a resolver.
    """

    resolver_ids: tuple[str, ...]
    seed: int = 0
    group_by_2ld: bool = False

    def __post_init__(self):
        if len(self.resolver_ids) < 1:
            raise PolicyError("random_sticky needs at least one resolver id")


@dataclass(frozen=True)
class CdnAffinity:
    """Route mapped names to their CDN's resolver, everything else to the
    default resolver."""

    map: DomainResolverMap
    default_resolver_id: str


Strategy = Union[Single, RandomSticky, CdnAffinity]


def fnv1a_64(data: bytes) -> int:
    """FNV-1a, 64-bit."""
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & _U64
    return h


def assign_random(name: DomainName, seed: int, k: int) -> int:
    """Deterministically map a name to a slot in 0..k-1.

    The hashed key is presentation bytes ++ 0x00 ++ seed as 8 little-endian
    bytes, so independent implementations agree byte for byte.
    """
    if k < 1:
        raise PolicyError("k must be >= 1")
    key = name.presentation_bytes() + b"\x00" + (seed & _U64).to_bytes(8, "little")
    return fnv1a_64(key) % k


def match_map(rules: DomainResolverMap, name: DomainName) -> str | None:
    """Exact match first, else the longest (most labels) label-boundary
    suffix, else None."""
    hit = rules.exact.get(name)
    if hit is not None:
        return hit
    best_id = None
    best_len = -1
    for suffix, resolver_id in rules.suffix.items():
        if len(suffix.labels) > best_len and name.ends_with(suffix):
            best_id = resolver_id
            best_len = len(suffix.labels)
    return best_id


def select_resolver(strategy: Strategy, name: DomainName) -> str:
    """The resolver id that answers queries for this name."""
    if isinstance(strategy, Single):
        return strategy.resolver_id
    if isinstance(strategy, RandomSticky):
        key = name.last_two_labels() if strategy.group_by_2ld else name
        idx = assign_random(key, strategy.seed, len(strategy.resolver_ids))
        return strategy.resolver_ids[idx]
    if isinstance(strategy, CdnAffinity):
        hit = match_map(strategy.map, name)
        return hit if hit is not None else strategy.default_resolver_id
    raise PolicyError("unknown strategy type %r" % type(strategy).__name__)


def strategy_resolver_ids(strategy: Strategy) -> set[str]:
    """Every resolver id the strategy can ever select."""
    if isinstance(strategy, Single):
        return {strategy.resolver_id}
    if isinstance(strategy, RandomSticky):
        return set(strategy.resolver_ids)
    if isinstance(strategy, CdnAffinity):
        return strategy.map.resolver_ids() | {strategy.default_resolver_id}
    raise PolicyError("unknown strategy type %r" % type(strategy).__name__)


def validate_strategy(strategy: Strategy, known_ids: Iterable[str]) -> None:
    """Check that every id the strategy references is defined."""
    known = set(known_ids)
    for rid in sorted(strategy_resolver_ids(strategy)):
        if rid not in known:
            raise PolicyError("strategy references undefined resolver id %r" % rid)


def assignment_histogram(names: Iterable[DomainName], strategy: Strategy) -> dict[str, int]:
    """Per-resolver assignment counts over a list of names; counts sum to
    len(names) and every selectable resolver appears (possibly with 0)."""
    counts = {rid: 0 for rid in sorted(strategy_resolver_ids(strategy))}
    for name in names:
        counts[select_resolver(strategy, name)] += 1
    return counts


# Mapping file: one rule per line, `exact <name> <resolver_id>` or
# `suffix <name> <resolver_id>`; '#' comments and blank lines ignored.

def parse_map_lines(lines: Iterable[str]) -> DomainResolverMap:
    exact: dict[DomainName, str] = {}
    suffix: dict[DomainName, str] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 3:
            raise PolicyError("map line %d: expected 'exact|suffix <name> <id>'" % lineno)
        kind, raw_name, resolver_id = parts
        try:
            name = normalize_name(raw_name)
        except ValueError as e:
            raise PolicyError("map line %d: %s" % (lineno, e)) from None
        if kind == "exact":
            exact[name] = resolver_id
        elif kind == "suffix":
            suffix[name] = resolver_id
        else:
            raise PolicyError("map line %d: unknown rule kind %r" % (lineno, kind))
    return DomainResolverMap(exact=exact, suffix=suffix)


def load_map_file(path: str) -> DomainResolverMap:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_map_lines(fh)


def map_file_lines(rules: DomainResolverMap, header: str | None = None) -> list[str]:
    """Serialize a map deterministically (sorted by name) so identical maps
    produce byte-identical files."""
    lines = []
    if header:
        for h in header.splitlines():
            lines.append("# " + h if not h.startswith("#") else h)
    for name in sorted(rules.exact, key=str):
        lines.append("exact %s %s" % (name, rules.exact[name]))
    for name in sorted(rules.suffix, key=str):
        lines.append("suffix %s %s" % (name, rules.suffix[name]))
    return lines
