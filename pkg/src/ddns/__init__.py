"""ddns: a local DNS forwarding proxy that spreads queries over multiple
upstream resolvers (single, sticky-random, or CDN-affinity strategies), plus
the RDAP classification and Do53 measurement pipeline used to build and
evaluate CDN-affinity maps."""

__version__ = "0.1.0"

from .names import DomainName, InvalidName, normalize_name
from .policy import (CdnAffinity, DomainResolverMap, RandomSticky, Single, Strategy,
                     UpstreamResolver, assign_random, assignment_histogram, match_map,
                     select_resolver)

__all__ = [
    "__version__",
    "DomainName",
    "InvalidName",
    "normalize_name",
    "UpstreamResolver",
    "Single",
    "RandomSticky",
    "CdnAffinity",
    "Strategy",
    "DomainResolverMap",
    "assign_random",
    "match_map",
    "select_resolver",
    "assignment_histogram",
]
