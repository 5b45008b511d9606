"""Command-line scenario runner and trace tooling.

Subcommands: bringup, enumerate, bulk-in, bulk-out, ber-sweep, codec,
decode-trace.  Exit codes: 0 success, 1 scenario failure, 2 usage error.
Option precedence is flags > config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import sys

from . import line_coding as lc
from .harness import (
    BringupReport, Scenario, ScenarioConfig, TraceError, format_trace_record,
    read_trace, stats_json,
)
from .protocol_layer import ideal_bulk_rate_mbps
from .sim_core import MS, NS, fmt_time

EXIT_OK = 0
EXIT_SCENARIO = 1
EXIT_USAGE = 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="scenario seed (default 1)")
    p.add_argument("--ber", type=float, help="per-bit error probability")
    p.add_argument("--latency-ns", type=float, help="one-way flight latency")
    p.add_argument("--scale-divisor", type=int,
                   help="divisor for millisecond-range LFPS rows (default 1000)")
    p.add_argument("--config", help="scenario config file (key = value lines)")
    p.add_argument("--trace-out", help="write a JSON-lines trace here")
    p.add_argument("--stats-out", help="write machine-readable stats here")


def _add_transfer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bytes", type=int, dest="nbytes",
                   help="transfer size (default 64 MiB)")
    p.add_argument("--burst", type=int, help="burst window depth 1..16")
    p.add_argument("--pattern", choices=("counter", "random"),
                   help="payload pattern")
    p.add_argument("--retry-budget", type=int,
                   help="consecutive payload retries before abort")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="usb3sim",
        description="Deterministic desk-scale USB 3.0 SuperSpeed link simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bringup", help="train the link and report time to U0")
    _add_common(p)
    p.add_argument("--no-partner", action="store_true",
                   help="leave the far end unplugged")
    p.add_argument("--horizon-ms", type=float,
                   help="simulated bring-up deadline (default 20 ms)")

    p = sub.add_parser("enumerate", help="bring up the link and enumerate")
    _add_common(p)

    for name in ("bulk-in", "bulk-out"):
        p = sub.add_parser(name, help=f"run a {name} throughput scenario")
        _add_common(p)
        _add_transfer(p)

    p = sub.add_parser("ber-sweep", help="integrity sweep over bit error rates")
    _add_common(p)
    _add_transfer(p)
    p.add_argument("--rates", required=True,
                   help="comma-separated BER list, e.g. 0,1e-7,1e-5")

    p = sub.add_parser("codec", help="hex-stream scramble/8b10b debugging")
    p.add_argument("mode", choices=("encode", "decode"))
    p.add_argument("hexdata", help="hex bytes (encode) or 3-hex-digit symbols (decode)")
    p.add_argument("--raw", action="store_true", help="skip the scrambler")

    p = sub.add_parser("decode-trace", help="pretty-print a trace file")
    p.add_argument("path")

    return ap


def _build_config(args: argparse.Namespace) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if getattr(args, "config", None) \
        else ScenarioConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "ber", None) is not None:
        cfg.ber = args.ber
    if getattr(args, "latency_ns", None) is not None:
        cfg.latency_ps = round(args.latency_ns * NS)
    if getattr(args, "scale_divisor", None) is not None:
        cfg.scale_divisor = args.scale_divisor
    if getattr(args, "no_partner", False):
        cfg.partner_present = False
    if getattr(args, "horizon_ms", None) is not None:
        cfg.bringup_horizon_ps = round(args.horizon_ms * MS)
    if getattr(args, "nbytes", None) is not None:
        cfg.transfer_bytes = args.nbytes
    if getattr(args, "burst", None) is not None:
        cfg.burst = args.burst
    if getattr(args, "pattern", None) is not None:
        cfg.pattern = args.pattern
    if getattr(args, "retry_budget", None) is not None:
        cfg.retry_budget = args.retry_budget
    cfg.validate()
    return cfg


def _write_stats(args, payload: dict) -> None:
    if getattr(args, "stats_out", None):
        with open(args.stats_out, "w") as fh:
            fh.write(stats_json(payload))


def _print_bringup(report: BringupReport) -> None:
    if report.success:
        print(f"U0 reached in {fmt_time(report.time_to_u0_ps)} "
              f"({report.host_bursts_sent} host / {report.device_bursts_sent} "
              f"device LFPS bursts, {report.events} events)")
    else:
        print(f"bring-up FAILED: host={report.host_state} "
              f"device={report.device_state} after {report.events} events")


def cmd_bringup(args) -> int:
    cfg = _build_config(args)
    scenario = Scenario(cfg, trace_path=args.trace_out)
    try:
        report = scenario.run_bringup()
    finally:
        scenario.close()
    _print_bringup(report)
    _write_stats(args, report.as_dict())
    return EXIT_OK if report.success else EXIT_SCENARIO


def cmd_enumerate(args) -> int:
    cfg = _build_config(args)
    scenario = Scenario(cfg, trace_path=args.trace_out)
    try:
        report = scenario.run_bringup()
        if not report.success:
            _print_bringup(report)
            return EXIT_SCENARIO
        info, error = scenario.run_enumerate()
    finally:
        scenario.close()
    if error:
        print(f"enumeration FAILED: {error}", file=sys.stderr)
        return EXIT_SCENARIO
    print(f"device {info.vendor_id:04x}:{info.product_id:04x} at address "
          f"{info.address}, configuration {info.configuration_value}")
    for ep in info.endpoints:
        print(f"  ep{ep.number} {ep.kind.value}: max packet {ep.max_packet}, "
              f"burst {ep.burst_depth}")
    _write_stats(args, {
        "vendor_id": info.vendor_id, "product_id": info.product_id,
        "address": info.address,
        "configuration_value": info.configuration_value,
        "endpoints": [{"number": e.number, "kind": e.kind.value,
                       "max_packet": e.max_packet, "burst": e.burst_depth}
                      for e in info.endpoints]})
    return EXIT_OK


def _run_transfer(cfg: ScenarioConfig, trace_path: str | None):
    scenario = Scenario(cfg, trace_path=trace_path)
    try:
        report = scenario.run_bringup()
        if not report.success:
            return report, None, "bring-up failed"
        _info, error = scenario.run_enumerate()
        if error:
            return report, None, f"enumeration failed: {error}"
        stats = scenario.run_bulk()
        return report, stats, None
    finally:
        scenario.close()


def _print_stats(direction: str, stats) -> None:
    rate = (f"{stats.effective_rate_mbps:.2f} MB/s"
            if stats.effective_rate_mbps is not None else "n/a")
    print(f"bulk-{direction}: {stats.bytes_moved} bytes in "
          f"{fmt_time(stats.elapsed_ps)} -> {rate}")
    print(f"  intact={'yes' if stats.intact else 'NO'} "
          f"link_retries={stats.link_retries} "
          f"protocol_retries={stats.protocol_retries} "
          f"crc_errors={stats.crc_errors} recoveries={stats.recoveries}")
    if stats.aborted:
        print(f"  aborted: {stats.aborted}")


def cmd_bulk(args, direction: str) -> int:
    cfg = _build_config(args)
    cfg.direction = direction
    report, stats, error = _run_transfer(cfg, args.trace_out)
    if error:
        _print_bringup(report)
        print(f"bulk-{direction} FAILED: {error}", file=sys.stderr)
        return EXIT_SCENARIO
    _print_stats(direction, stats)
    payload = stats.as_dict()
    payload["direction"] = direction
    payload["ideal_rate_mbps"] = ideal_bulk_rate_mbps(cfg.max_packet)
    _write_stats(args, payload)
    if cfg.transfer_bytes > 0 and not stats.intact:
        return EXIT_SCENARIO
    return EXIT_OK


def cmd_ber_sweep(args) -> int:
    try:
        rates = [float(r) for r in args.rates.split(",") if r.strip() != ""]
    except ValueError:
        print("ber-sweep: --rates must be a comma-separated list of numbers",
              file=sys.stderr)
        return EXIT_USAGE
    if not rates:
        print("ber-sweep: --rates is empty", file=sys.stderr)
        return EXIT_USAGE
    base = _build_config(args)
    rows = []
    print(f"{'ber':>10} {'intact':>7} {'link_rty':>9} {'proto_rty':>10} "
          f"{'crc_err':>8} {'rate':>12}")
    for ber in rates:
        cfg = ScenarioConfig(**{f: getattr(base, f) for f in
                                base.__dataclass_fields__})
        cfg.ber = ber
        try:
            cfg.validate()
        except ValueError as exc:
            print(f"ber-sweep: {exc}", file=sys.stderr)
            return EXIT_USAGE
        report, stats, error = _run_transfer(cfg, None)
        if error:
            rows.append({"ber": ber, "intact": False, "error": error})
            print(f"{ber:>10.3g} {'no':>7} {'-':>9} {'-':>10} {'-':>8} "
                  f"{'-':>12}  ({error})")
            continue
        rate = (f"{stats.effective_rate_mbps:.1f} MB/s"
                if stats.effective_rate_mbps is not None else "n/a")
        print(f"{ber:>10.3g} {'yes' if stats.intact else 'no':>7} "
              f"{stats.link_retries:>9} {stats.protocol_retries:>10} "
              f"{stats.crc_errors:>8} {rate:>12}")
        row = stats.as_dict()
        row["ber"] = ber
        rows.append(row)
    _write_stats(args, {"rows": rows})
    return EXIT_OK


def cmd_codec(args) -> int:
    try:
        if args.mode == "encode":
            data = bytes.fromhex(args.hexdata)
        else:
            parts = args.hexdata.replace(",", " ").split()
            if len(parts) == 1 and len(parts[0]) % 3 == 0:
                s = parts[0]
                parts = [s[i:i + 3] for i in range(0, len(s), 3)]
            symbols = [int(p, 16) for p in parts]
    except ValueError:
        print("codec: input is not valid hex", file=sys.stderr)
        return EXIT_USAGE

    if args.mode == "encode":
        if not data:
            print("codec: empty input", file=sys.stderr)
            return EXIT_USAGE
        if not args.raw:
            data, _ = lc.scramble(data, lc.ScramblerState())
        rd = lc.RD_MINUS
        out = []
        for b in data:
            sym, rd = lc.encode_8b10b(b, False, rd)
            out.append(f"{sym:03x}")
        print(" ".join(out))
        print(f"final rd: {rd:+d}")
        return EXIT_OK

    decoded, rd = lc.decode_stream(symbols, lc.RD_MINUS, resync_on_comma=True)
    raw = bytes(d.byte for d in decoded)
    if not args.raw:
        k_mask = [d.is_k for d in decoded]
        if not any(k_mask):
            raw, _ = lc.descramble(raw, lc.ScramblerState())
    for i, (sym, d) in enumerate(zip(symbols, decoded)):
        status = "ok" if d.ok else f"ERR({d.error})"
        kind = "K" if d.is_k else "D"
        print(f"{i:4d} {sym & 0x3FF:010b} -> {kind}{raw[i]:02x} {status}")
    print(f"bytes: {raw.hex()}")
    print(f"final rd: {rd:+d}")
    return EXIT_OK


def cmd_decode_trace(args) -> int:
    try:
        records = read_trace(args.path)
    except FileNotFoundError:
        print(f"decode-trace: no such file: {args.path}", file=sys.stderr)
        return EXIT_SCENARIO
    except TraceError as exc:
        print(f"decode-trace: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    for rec in records:
        print(format_trace_record(rec))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "bringup":
            return cmd_bringup(args)
        if args.command == "enumerate":
            return cmd_enumerate(args)
        if args.command == "bulk-in":
            return cmd_bulk(args, "in")
        if args.command == "bulk-out":
            return cmd_bulk(args, "out")
        if args.command == "ber-sweep":
            return cmd_ber_sweep(args)
        if args.command == "codec":
            return cmd_codec(args)
        if args.command == "decode-trace":
            return cmd_decode_trace(args)
    except (ValueError, OSError) as exc:
        print(f"usb3sim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
