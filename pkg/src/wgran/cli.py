"""``wgran`` command line: keygen, check, run.

Exit codes: 0 success, 1 failed check or unmet expectation, 2 usage or
topology error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .crypto_tunnel import keygen
from .kpi import IoFailure, emit_csv, measure_rtt, measure_throughput, report_table
from .n2gate import parse_whitelist, serialize_whitelist
from .ran import MODES
from .threatlab import ScenarioVerdict, parse_scenarios, run_scenario, summary_table
from .wire_codec import (
    ConfigError, TopologyError, encode_key, parse_topology, parse_wg_config,
    serialize_topology, serialize_wg_config,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
BENCHES = ("rtt", "throughput")

def _write_secret(path: Path, text: str, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force)")
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.chmod(path, 0o600)


class _OsRandom:
    @staticmethod
    def bytes(n: int) -> bytes:
        return os.urandom(n)


def cmd_keygen(args) -> int:
    rng = np.random.default_rng(args.seed) if args.seed is not None else _OsRandom()
    kp = keygen(rng)
    out = Path(args.out)
    priv, pub = out.with_suffix(".key"), out.with_suffix(".pub")
    try:
        if pub.exists() and not args.force:
            raise FileExistsError(f"{pub} exists (use --force)")
        _write_secret(priv, encode_key(kp.private) + "\n", args.force)
        pub.write_text(encode_key(kp.public) + "\n")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {priv} (0600) and {pub}")
    return EXIT_OK


def _sniff(text: str) -> str:
    for line in text.splitlines():
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s in ("[Interface]", "[Peer]"):
            return "wg"
        if s in ("[Node]", "[Link]"):
            return "topology"
        if not s.startswith("["):
            return "whitelist"
        return "wg"
    return "wg"


def cmd_check(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    kind = args.kind or _sniff(text)
    try:
        if kind == "wg":
            out = serialize_wg_config(parse_wg_config(text))
        elif kind == "topology":
            out = serialize_topology(parse_topology(text))
        else:
            out = serialize_whitelist(parse_whitelist(text))
    except ConfigError as exc:
        print(f"{args.config}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    sys.stdout.write(out)
    return EXIT_OK


def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _scenario_cell(cell) -> ScenarioVerdict:
    sid, mode, seed, topo_text, n2gate = cell
    topo = parse_topology(topo_text) if topo_text else None
    return run_scenario(sid, mode, seed, topo, n2gate=n2gate)


def _bench_cell(cell):
    kind, mode, seed, topo_text, rep, opts = cell
    topo = parse_topology(topo_text) if topo_text else None
    if kind == "rtt":
        return [measure_rtt(topo, mode, opts["pings"], seed, repeat=rep)]
    reports = []
    for direction in opts["directions"]:
        reports += measure_throughput(topo, mode, direction, opts["sweep"], opts["duration"],
                                      seed, repeat=rep)
    return reports


def _map(fn, cells, jobs: int):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def cmd_run(args) -> int:
    try:
        modes = _split(args.mode)
        for m in modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")
        tokens = _split(args.scenario)
        scenarios, benches = [], []
        for tok in tokens:
            if tok.lower() in BENCHES:
                benches.append(tok.lower())
            else:
                scenarios += parse_scenarios(tok)
        sweep = [int(x) for x in _split(args.mtu_sweep)]
        directions = _split(args.direction)
        if any(d not in ("dl", "ul") for d in directions):
            raise ValueError("direction must be dl and/or ul")
        if args.repeat < 1 or args.jobs < 1:
            raise ValueError("--repeat and --jobs must be >= 1")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    topo_text = None
    if args.topology:
        try:
            topo_text = Path(args.topology).read_text()
            parse_topology(topo_text)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        except ConfigError as exc:
            print(f"error: topology: {exc}", file=sys.stderr)
            return EXIT_USAGE

    n2gate = {"on": True, "off": False, "auto": None}[args.n2gate]
    cells = [(sid, mode, args.seed + rep, topo_text, n2gate)
             for sid in scenarios for mode in modes for rep in range(args.repeat)]
    opts = {"pings": args.pings, "sweep": sweep, "duration": args.duration,
            "directions": directions}
    bench_cells = [(kind, mode, args.seed + rep, topo_text, rep, opts)
                   for kind in benches for mode in modes for rep in range(args.repeat)]
    try:
        verdicts = _map(_scenario_cell, cells, args.jobs)
        reports = [r for group in _map(_bench_cell, bench_cells, args.jobs) for r in group]
    except TopologyError as exc:
        print(f"error: topology: {exc}", file=sys.stderr)
        return EXIT_USAGE

    ok = True
    for v in verdicts:
        want = v.expected if args.expect == "auto" else args.expect == "pass"
        ok &= v.passed == want
    tables = []
    if verdicts:
        tables.append(summary_table(verdicts))
    if reports:
        tables.append(report_table(reports))
    summary = "\n\n".join(tables) + "\n"
    sys.stdout.write(summary)

    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "verdicts.jsonl").write_text("".join(v.to_json() + "\n" for v in verdicts))
            emit_csv(reports, out / "kpi.csv")
            (out / "summary.txt").write_text(summary)
        except (OSError, IoFailure) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wgran", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="write a base64 keypair (<out>.key, <out>.pub)")
    k.add_argument("--out", required=True, help="path prefix for the key files")
    k.add_argument("--seed", type=int, help="deterministic key (tests only)")
    k.add_argument("--force", action="store_true", help="overwrite existing files")
    k.set_defaults(func=cmd_keygen)

    c = sub.add_parser("check", help="validate a tunnel config, topology or whitelist")
    c.add_argument("config", help="file to validate")
    c.add_argument("--kind", choices=("wg", "topology", "whitelist"),
                   help="file type (guessed from content by default)")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("run", help="run threat scenarios and KPI benches")
    r.add_argument("--topology", help="topology INI (built-in factory layout by default)")
    r.add_argument("--mode", default="wireguard",
                   help="comma list of baseline, wireguard, ipsec")
    r.add_argument("--scenario", default="T1..T6",
                   help="T1..T6 ids or ranges, plus 'rtt' and 'throughput' benches")
    r.add_argument("--seed", type=int, required=True, help="root seed (required)")
    r.add_argument("--duration", type=float, default=0.1,
                   help="seconds of saturated traffic per throughput point")
    r.add_argument("--mtu-sweep", default="500,1000,1400", help="payload sizes in bytes")
    r.add_argument("--direction", default="dl,ul", help="throughput directions")
    r.add_argument("--pings", type=int, default=1000, help="echo probes per RTT run")
    r.add_argument("--repeat", type=int, default=5, help="repetitions (seed, seed+1, ...)")
    r.add_argument("--out", help="directory for verdicts.jsonl, kpi.csv, summary.txt")
    r.add_argument("--jobs", type=int, default=1, help="worker processes")
    r.add_argument("--expect", choices=("auto", "pass", "fail"), default="auto",
                   help="required scenario outcome (auto: per-mode design table)")
    r.add_argument("--n2gate", choices=("auto", "on", "off"), default="auto",
                   help="N2 authentication gateway (auto: on unless baseline)")
    r.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
