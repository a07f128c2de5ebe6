"""Configuration: one JSON file wires resolvers, strategy, forwarder,
classifier, and measurement settings. Unknown keys are rejected and errors
name the offending key. docs/config.schema.json documents the format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .classifier import DEFAULT_RDAP_ENDPOINT, CdnRule
from .forwarder import ForwarderConfig
from .policy import (CdnAffinity, DomainResolverMap, RandomSticky, Single, Strategy,
                     UpstreamResolver, load_map_file, validate_strategy)

DEFAULT_CONFIG_ENV = "DDNS_CONFIG"


class ConfigError(ValueError):
    """Base class for configuration problems."""


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    def __init__(self, key: str, message: str):
        super().__init__("%s: %s" % (key, message))
        self.key = key


@dataclass(frozen=True)
class StrategySettings:
    kind: str  # single | random_sticky | cdn_affinity
    resolver_id: str | None = None
    resolver_ids: tuple[str, ...] = ()
    seed: int = 0
    group_by_2ld: bool = False
    map_file: str | None = None
    default_resolver_id: str | None = None


@dataclass(frozen=True)
class ForwarderSettings:
    listen_address: str = "127.0.0.1"
    listen_port: int = 5353
    cache_enabled: bool = True
    upstream_timeout_ms: float = 2000.0
    retries: int = 1
    metrics_log_path: str = "ddns-metrics.ndjson"
    control_socket_path: str = "ddns-control.sock"


@dataclass(frozen=True)
class ClassifierSettings:
    rdap_endpoint: str = DEFAULT_RDAP_ENDPOINT
    cache_dir: str = "rdap-cache"
    rules: tuple[CdnRule, ...] = ()


@dataclass(frozen=True)
class MeasureSettings:
    dns_band_ms: float = 0.3
    plt_band_ms: float = 30.0
    probe_method: str = "tcp"
    probe_parallelism: int = 8


@dataclass
class AppConfig:
    resolvers: list[UpstreamResolver]
    strategy: StrategySettings
    forwarder: ForwarderSettings = field(default_factory=ForwarderSettings)
    classifier: ClassifierSettings = field(default_factory=ClassifierSettings)
    measure: MeasureSettings = field(default_factory=MeasureSettings)

    def resolver(self, resolver_id: str) -> UpstreamResolver:
        for r in self.resolvers:
            if r.id == resolver_id:
                return r
        raise ValidationError("resolvers", "no resolver with id %r" % resolver_id)

    def build_strategy(self, rules_map: DomainResolverMap | None = None) -> Strategy:
        """The runtime Strategy; for cdn_affinity the map file is loaded here
        (or injected, for maps built in-process)."""
        s = self.strategy
        if s.kind == "single":
            return Single(resolver_id=s.resolver_id)
        if s.kind == "random_sticky":
            return RandomSticky(resolver_ids=s.resolver_ids, seed=s.seed,
                                group_by_2ld=s.group_by_2ld)
        rules = rules_map if rules_map is not None else load_map_file(s.map_file)
        return CdnAffinity(map=rules, default_resolver_id=s.default_resolver_id)

    def forwarder_config(self) -> ForwarderConfig:
        f = self.forwarder
        return ForwarderConfig(
            resolvers=list(self.resolvers),
            strategy=self.build_strategy(),
            listen_address=f.listen_address,
            listen_port=f.listen_port,
            cache_enabled=f.cache_enabled,
            upstream_timeout_ms=f.upstream_timeout_ms,
            retries=f.retries,
            metrics_log_path=f.metrics_log_path,
            control_socket_path=f.control_socket_path,
        )

    def to_json_dict(self) -> dict:
        strategy: dict = {"kind": self.strategy.kind}
        if self.strategy.kind == "single":
            strategy["resolver_id"] = self.strategy.resolver_id
        elif self.strategy.kind == "random_sticky":
            strategy["resolver_ids"] = list(self.strategy.resolver_ids)
            strategy["seed"] = self.strategy.seed
            strategy["group_by_2ld"] = self.strategy.group_by_2ld
        else:
            strategy["map_file"] = self.strategy.map_file
            strategy["default_resolver_id"] = self.strategy.default_resolver_id
        return {
            "resolvers": [
                {"id": r.id, "address": r.address, "port": r.port, "display_name": r.display_name}
                for r in self.resolvers
            ],
            "strategy": strategy,
            "forwarder": {
                "listen_address": self.forwarder.listen_address,
                "listen_port": self.forwarder.listen_port,
                "cache_enabled": self.forwarder.cache_enabled,
                "upstream_timeout_ms": self.forwarder.upstream_timeout_ms,
                "retries": self.forwarder.retries,
                "metrics_log_path": self.forwarder.metrics_log_path,
                "control_socket_path": self.forwarder.control_socket_path,
            },
            "classifier": {
                "rdap_endpoint": self.classifier.rdap_endpoint,
                "cache_dir": self.classifier.cache_dir,
                "rules": [
                    {"cdn_name": r.cdn_name, "keywords": list(r.keywords), "resolver_id": r.resolver_id}
                    for r in self.classifier.rules
                ],
            },
            "measure": {
                "dns_band_ms": self.measure.dns_band_ms,
                "plt_band_ms": self.measure.plt_band_ms,
                "probe_method": self.measure.probe_method,
                "probe_parallelism": self.measure.probe_parallelism,
            },
        }


def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise ValidationError("%s.%s" % (where, key) if where else key, "missing required key")
    value = doc[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ValidationError(_join(where, key), "expected a number")
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ValidationError(_join(where, key), "expected an integer")
    if not isinstance(value, kind):
        raise ValidationError(_join(where, key), "expected %s" % kind.__name__)
    return value


def _optional(doc: dict, key: str, kind, where: str, default):
    if key not in doc:
        return default
    return _require(doc, key, kind, where)


def _join(where: str, key: str) -> str:
    return "%s.%s" % (where, key) if where else key


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ValidationError(_join(where, key), "unknown key")


def config_from_dict(doc: dict) -> AppConfig:
    if not isinstance(doc, dict):
        raise ValidationError("", "top level must be a JSON object")
    _reject_unknown(doc, {"resolvers", "strategy", "forwarder", "classifier", "measure"}, "")

    raw_resolvers = _require(doc, "resolvers", list, "")
    resolvers = []
    seen_ids = set()
    for i, entry in enumerate(raw_resolvers):
        where = "resolvers[%d]" % i
        if not isinstance(entry, dict):
            raise ValidationError(where, "expected an object")
        _reject_unknown(entry, {"id", "address", "port", "display_name"}, where)
        rid = _require(entry, "id", str, where)
        if rid in seen_ids:
            raise ValidationError(_join(where, "id"), "duplicate resolver id %r" % rid)
        seen_ids.add(rid)
        port = _optional(entry, "port", int, where, 53)
        if not 1 <= port <= 65535:
            raise ValidationError(_join(where, "port"), "port %d out of range" % port)
        resolvers.append(UpstreamResolver(
            id=rid,
            address=_require(entry, "address", str, where),
            port=port,
            display_name=_optional(entry, "display_name", str, where, ""),
        ))
    if not resolvers:
        raise ValidationError("resolvers", "at least one resolver is required")

    raw_strategy = _require(doc, "strategy", dict, "")
    kind = _require(raw_strategy, "kind", str, "strategy")
    if kind == "single":
        _reject_unknown(raw_strategy, {"kind", "resolver_id"}, "strategy")
        strategy = StrategySettings(kind=kind,
                                    resolver_id=_require(raw_strategy, "resolver_id", str, "strategy"))
        referenced = {strategy.resolver_id}
    elif kind == "random_sticky":
        _reject_unknown(raw_strategy, {"kind", "resolver_ids", "seed", "group_by_2ld"}, "strategy")
        ids = _require(raw_strategy, "resolver_ids", list, "strategy")
        if not ids or not all(isinstance(x, str) for x in ids):
            raise ValidationError("strategy.resolver_ids", "expected a nonempty list of resolver ids")
        seed = _optional(raw_strategy, "seed", int, "strategy", 0)
        if not 0 <= seed < 2 ** 64:
            raise ValidationError("strategy.seed", "seed must fit in 64 unsigned bits")
        strategy = StrategySettings(
            kind=kind, resolver_ids=tuple(ids), seed=seed,
            group_by_2ld=_optional(raw_strategy, "group_by_2ld", bool, "strategy", False),
        )
        referenced = set(ids)
    elif kind == "cdn_affinity":
        _reject_unknown(raw_strategy, {"kind", "map_file", "default_resolver_id"}, "strategy")
        strategy = StrategySettings(
            kind=kind,
            map_file=_require(raw_strategy, "map_file", str, "strategy"),
            default_resolver_id=_require(raw_strategy, "default_resolver_id", str, "strategy"),
        )
        referenced = {strategy.default_resolver_id}
    else:
        raise ValidationError("strategy.kind", "unknown strategy kind %r" % kind)
    for rid in sorted(referenced):
        if rid not in seen_ids:
            raise ValidationError("strategy", "references undefined resolver id %r" % rid)

    raw_fwd = _optional(doc, "forwarder", dict, "", {})
    _reject_unknown(raw_fwd, {"listen_address", "listen_port", "cache_enabled",
                              "upstream_timeout_ms", "retries", "metrics_log_path",
                              "control_socket_path"}, "forwarder")
    defaults = ForwarderSettings()
    timeout_ms = _optional(raw_fwd, "upstream_timeout_ms", float, "forwarder",
                           defaults.upstream_timeout_ms)
    if timeout_ms <= 0:
        raise ValidationError("forwarder.upstream_timeout_ms", "must be > 0")
    retries = _optional(raw_fwd, "retries", int, "forwarder", defaults.retries)
    if retries < 0:
        raise ValidationError("forwarder.retries", "must be >= 0")
    listen_port = _optional(raw_fwd, "listen_port", int, "forwarder", defaults.listen_port)
    if not 0 <= listen_port <= 65535:
        raise ValidationError("forwarder.listen_port", "port %d out of range" % listen_port)
    fwd = ForwarderSettings(
        listen_address=_optional(raw_fwd, "listen_address", str, "forwarder", defaults.listen_address),
        listen_port=listen_port,
        cache_enabled=_optional(raw_fwd, "cache_enabled", bool, "forwarder", defaults.cache_enabled),
        upstream_timeout_ms=timeout_ms,
        retries=retries,
        metrics_log_path=_optional(raw_fwd, "metrics_log_path", str, "forwarder",
                                   defaults.metrics_log_path),
        control_socket_path=_optional(raw_fwd, "control_socket_path", str, "forwarder",
                                      defaults.control_socket_path),
    )

    raw_cls = _optional(doc, "classifier", dict, "", {})
    _reject_unknown(raw_cls, {"rdap_endpoint", "cache_dir", "rules"}, "classifier")
    cls_defaults = ClassifierSettings()
    rules = []
    for i, entry in enumerate(_optional(raw_cls, "rules", list, "classifier", [])):
        where = "classifier.rules[%d]" % i
        if not isinstance(entry, dict):
            raise ValidationError(where, "expected an object")
        _reject_unknown(entry, {"cdn_name", "keywords", "resolver_id"}, where)
        keywords = _require(entry, "keywords", list, where)
        if not keywords or not all(isinstance(k, str) for k in keywords):
            raise ValidationError(_join(where, "keywords"), "expected a nonempty list of strings")
        rule_rid = _require(entry, "resolver_id", str, where)
        if rule_rid not in seen_ids:
            raise ValidationError(_join(where, "resolver_id"),
                                  "references undefined resolver id %r" % rule_rid)
        rules.append(CdnRule(cdn_name=_require(entry, "cdn_name", str, where),
                             keywords=tuple(keywords), resolver_id=rule_rid))
    cls = ClassifierSettings(
        rdap_endpoint=_optional(raw_cls, "rdap_endpoint", str, "classifier", cls_defaults.rdap_endpoint),
        cache_dir=_optional(raw_cls, "cache_dir", str, "classifier", cls_defaults.cache_dir),
        rules=tuple(rules),
    )

    raw_measure = _optional(doc, "measure", dict, "", {})
    _reject_unknown(raw_measure, {"dns_band_ms", "plt_band_ms", "probe_method",
                                  "probe_parallelism"}, "measure")
    m_defaults = MeasureSettings()
    dns_band = _optional(raw_measure, "dns_band_ms", float, "measure", m_defaults.dns_band_ms)
    plt_band = _optional(raw_measure, "plt_band_ms", float, "measure", m_defaults.plt_band_ms)
    if dns_band <= 0 or plt_band <= 0:
        raise ValidationError("measure", "band half-widths must be > 0")
    method = _optional(raw_measure, "probe_method", str, "measure", m_defaults.probe_method)
    if method not in ("tcp", "icmp"):
        raise ValidationError("measure.probe_method", "expected 'tcp' or 'icmp'")
    parallelism = _optional(raw_measure, "probe_parallelism", int, "measure",
                            m_defaults.probe_parallelism)
    if parallelism < 1:
        raise ValidationError("measure.probe_parallelism", "must be >= 1")
    measure_settings = MeasureSettings(dns_band_ms=dns_band, plt_band_ms=plt_band,
                                       probe_method=method, probe_parallelism=parallelism)

    config = AppConfig(resolvers=resolvers, strategy=strategy, forwarder=fwd,
                       classifier=cls, measure=measure_settings)
    validate_strategy_ids(config)
    return config


def validate_strategy_ids(config: AppConfig) -> None:
    """Cross-check the built strategy (map targets included) when the map
    file is already available; deferred to serve time otherwise."""
    if config.strategy.kind == "cdn_affinity":
        return  # map file targets are validated when the map is loaded
    strategy = config.build_strategy()
    try:
        validate_strategy(strategy, [r.id for r in config.resolvers])
    except ValueError as e:
        raise ValidationError("strategy", str(e)) from None


def load_config(path: str) -> AppConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ParseError("cannot read %s: %s" % (path, e)) from None
    except ValueError as e:
        raise ParseError("%s: invalid JSON: %s" % (path, e)) from None
    return config_from_dict(doc)


def default_config_path(explicit: str | None) -> str:
    path = explicit or os.environ.get(DEFAULT_CONFIG_ENV)
    if not path:
        raise ConfigError("no config file: pass --config or set %s" % DEFAULT_CONFIG_ENV)
    return path
