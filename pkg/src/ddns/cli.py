"""Command-line entry point.

Subcommands: serve, clear-cache, classify, har-domains, bench, probe,
report. Exit codes: 0 success, 1 operational error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading

from . import classifier as classifier_mod
from . import forwarder as forwarder_mod
from . import measure, stub
from ._util import atomic_write_text
from .config import ConfigError, default_config_path, load_config
from .names import InvalidName, normalize_name
from .policy import PolicyError

EXIT_OK = 0
EXIT_OPERATIONAL = 1
EXIT_USAGE = 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddns",
        description="DNS forwarding proxy that distributes queries across "
                    "multiple upstream resolvers, with classification and "
                    "measurement tooling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the forwarding proxy until terminated")
    p.add_argument("--config", help="config file (default: $DDNS_CONFIG)")

    p = sub.add_parser("clear-cache", help="clear the cache of a running forwarder")
    p.add_argument("--config", help="config file (default: $DDNS_CONFIG)")
    p.add_argument("--socket", help="control socket path (overrides config)")

    p = sub.add_parser("classify", help="build a CDN-affinity map via RDAP")
    p.add_argument("--config", help="config file (default: $DDNS_CONFIG)")
    p.add_argument("--domains", required=True, help="text file, one domain per line")
    p.add_argument("--resolver", required=True, help="resolver id used to resolve candidates")
    p.add_argument("--rules", help="JSON rules file (default: config rules, else built-ins)")
    p.add_argument("--cache", help="RDAP cache directory (overrides config)")
    p.add_argument("--out", required=True, help="mapping file to write")
    p.add_argument("--report", help="also write the classification report JSON here")
    p.add_argument("--aaaa", action="store_true", help="resolve AAAA as well as A")

    p = sub.add_parser("har-domains", help="print unique domains from HAR files")
    p.add_argument("har", nargs="+", help="HAR 1.2 JSON file(s)")

    p = sub.add_parser("bench", help="measure Do53 query response times")
    p.add_argument("--domains", required=True, help="text file, one domain per line")
    p.add_argument("--target", required=True, help="HOST:PORT of resolver or forwarder")
    p.add_argument("--label", required=True, help="run label (resolver id or strategy name)")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--delay-ms", type=float, default=0.0, help="delay between queries")
    p.add_argument("--timeout-ms", type=float, default=2000.0)
    p.add_argument("--out", required=True, help="NDJSON timing log to write")
    p.add_argument("--summary-csv", help="also write a per-label summary CSV")

    p = sub.add_parser("probe", help="latency probes (5 samples, median) to addresses")
    p.add_argument("--ip", action="append", default=[], help="address to probe (repeatable)")
    p.add_argument("--ips", help="text file, one address per line")
    p.add_argument("--method", choices=["tcp", "icmp"], default="tcp")
    p.add_argument("--port", type=int, default=443, help="port for the tcp method")
    p.add_argument("--timeout-s", type=float, default=2.0)
    p.add_argument("--out", help="NDJSON output (default: stdout)")

    p = sub.add_parser("report", help="paired comparison of two timing runs")
    p.add_argument("--a", dest="run_a", required=True, help="NDJSON timing log (run A)")
    p.add_argument("--b", dest="run_b", required=True, help="NDJSON timing log (run B)")
    p.add_argument("--kind", choices=["dns", "plt"], default="dns",
                   help="metric kind; sets the default 'similar' band")
    p.add_argument("--band-ms", type=float, help="override the band half-width")
    p.add_argument("--out-csv", help="write the difference CDF as CSV")
    p.add_argument("--out-svg", help="write the difference CDF as SVG")
    return parser


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    handler = {
        "serve": _cmd_serve,
        "clear-cache": _cmd_clear_cache,
        "classify": _cmd_classify,
        "har-domains": _cmd_har_domains,
        "bench": _cmd_bench,
        "probe": _cmd_probe,
        "report": _cmd_report,
    }[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except (PolicyError, InvalidName) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except forwarder_mod.BindError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_OPERATIONAL
    except (measure.MalformedHar, measure.MalformedLog, measure.NoOverlap,
            measure.TargetUnreachable, measure.ProbeFailed, classifier_mod.RdapError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_OPERATIONAL
    except OSError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_OPERATIONAL


def _cmd_serve(args) -> int:
    config = load_config(default_config_path(args.config))
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    forwarder_mod.serve(config.forwarder_config(), stop_event=stop)
    return EXIT_OK


def _cmd_clear_cache(args) -> int:
    if args.socket:
        socket_path = args.socket
    else:
        config = load_config(default_config_path(args.config))
        socket_path = config.forwarder.control_socket_path
    try:
        reply = forwarder_mod.control_request(socket_path, "clear-cache")
    except OSError as e:
        print("error: cannot reach forwarder at %s: %s" % (socket_path, e), file=sys.stderr)
        return EXIT_OPERATIONAL
    print("evicted %d cache entries" % reply.get("evicted", 0))
    return EXIT_OK


def _read_domains_file(path: str):
    domains = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                domains.append(normalize_name(line))
    return domains


def _cmd_classify(args) -> int:
    config = load_config(default_config_path(args.config))
    domains = _read_domains_file(args.domains)
    resolver = config.resolver(args.resolver)
    if args.rules:
        with open(args.rules, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        rules = [classifier_mod.CdnRule(cdn_name=r["cdn_name"], keywords=tuple(r["keywords"]),
                                        resolver_id=r["resolver_id"]) for r in raw]
    elif config.classifier.rules:
        rules = list(config.classifier.rules)
    else:
        rules = classifier_mod.default_rules()
    cache_dir = args.cache or config.classifier.cache_dir
    rdap = classifier_mod.RdapClient(cache_dir=cache_dir, endpoint=config.classifier.rdap_endpoint)

    resolved = classifier_mod.resolve_candidates(domains, resolver, include_aaaa=args.aaaa)
    report = classifier_mod.classify_all(resolved, rdap, rules, resolver_id=resolver.id)
    default_id = (config.strategy.default_resolver_id
                  if config.strategy.kind == "cdn_affinity" else resolver.id)
    rules_map = classifier_mod.build_map(report, rules, default_id, out_path=args.out)
    if args.report:
        report.save(args.report)
    mapped = len(rules_map.exact)
    print("classified %d/%d domains (%d rdap errors); wrote %s"
          % (mapped, len(domains), len(report.rdap_errors), args.out))
    return EXIT_OK


def _cmd_har_domains(args) -> int:
    domains = set()
    for path in args.har:
        with open(path, "rb") as fh:
            domains |= measure.har_extract(fh.read()).unique_domains
    for name in sorted(str(d) for d in domains):
        print(name)
    return EXIT_OK


def _parse_target(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError("target must be HOST:PORT, got %r" % text)
    return host, int(port)


def _cmd_bench(args) -> int:
    domains = _read_domains_file(args.domains)
    target = _parse_target(args.target)
    timings = measure.measure_queries(
        domains, target, label=args.label, repeats=args.repeats,
        inter_query_delay_ms=args.delay_ms, timeout_ms=args.timeout_ms,
    )
    meta = {
        "label": args.label, "target": args.target, "repeats": args.repeats,
        "delay_ms": args.delay_ms, "timeout_ms": args.timeout_ms,
        "domains_file": args.domains, "n_domains": len(domains),
    }
    measure.write_timings(args.out, timings, meta)
    answered = sum(1 for t in timings if t.outcome == "answered")
    print("%d queries, %d answered, %d timeouts -> %s"
          % (len(timings), answered, len(timings) - answered, args.out))
    if args.summary_csv:
        atomic_write_text(args.summary_csv, measure.summaries_csv(measure.summarize(timings)))
    return EXIT_OK


def _cmd_probe(args) -> int:
    ips = list(args.ip)
    if args.ips:
        with open(args.ips, "r", encoding="utf-8") as fh:
            ips += [line.strip() for line in fh if line.strip() and not line.startswith("#")]
    if not ips:
        print("error: no addresses given (use --ip or --ips)", file=sys.stderr)
        return EXIT_USAGE
    results = []
    failures = 0
    for ip in ips:
        try:
            results.append(measure.probe_latency(ip, method=args.method, port=args.port,
                                                 timeout_s=args.timeout_s))
        except measure.ProbeFailed as e:
            failures += 1
            print("probe failed: %s" % e, file=sys.stderr)
    meta = {"method": args.method, "port": args.port, "timeout_s": args.timeout_s}
    if args.out:
        measure.write_probe_results(args.out, results, meta)
    else:
        for r in results:
            print(json.dumps({"ip": r.ip, "method": r.method, "samples_ms": r.samples,
                              "median_ms": r.median_ms}, separators=(",", ":")))
    return EXIT_OK if results or not failures else EXIT_OPERATIONAL


def _cmd_report(args) -> int:
    timings_a, meta_a = measure.read_timings(args.run_a)
    timings_b, meta_b = measure.read_timings(args.run_b)
    comparison = measure.paired_compare(
        measure.timings_by_key(timings_a), measure.timings_by_key(timings_b),
        metric=args.kind, band_halfwidth_ms=args.band_ms,
    )
    label_a = meta_a.get("label", "A")
    label_b = meta_b.get("label", "B")
    print("%s - %s (%s): n=%d median_diff_ms=%.3f band=%s (halfwidth %.3g ms)"
          % (label_a, label_b, comparison.metric, len(comparison.pairs),
             comparison.median_diff_ms, comparison.band, comparison.band_halfwidth_ms))
    if args.out_csv:
        measure.emit_cdf(comparison, args.out_csv, fmt="csv")
    if args.out_svg:
        measure.emit_cdf(comparison, args.out_svg, fmt="svg")
    return EXIT_OK


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
