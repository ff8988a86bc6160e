"""Command-line entry point: simulate | init | online | eval | bench."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

from . import __version__
from .core import PAPER_DEFAULTS, CamTopoError, PipelineConfig, ValidationError

log = logging.getLogger("camtopo")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class RunDirLocked(CamTopoError):
    pass


# --------------------------------------------------------------------------
# configuration


def _coerce(name: str, raw: str):
    fld = {f.name: f for f in dataclasses.fields(PipelineConfig)}.get(name)
    if fld is None:
        raise ValidationError(f"unknown configuration key '{name}'")
    default = fld.default
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ValidationError(f"configuration key '{name}': cannot parse {raw!r}") from exc


def load_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Built-in defaults, then the file's ``[paper_defaults]`` and
    ``[pipeline]`` sections, then ``overrides`` (command-line values)."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        for section in ("paper_defaults", "pipeline"):
            if parser.has_section(section):
                for key, raw in parser.items(section):
                    values[key] = _coerce(key, raw)
        unknown = set(parser.sections()) - {"paper_defaults", "pipeline"}
        if unknown:
            raise ValidationError(f"unknown config section [{sorted(unknown)[0]}]")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return PipelineConfig(**values)


def write_config(cfg: PipelineConfig, path) -> None:
    parser = configparser.ConfigParser()
    d = dataclasses.asdict(cfg)
    parser["paper_defaults"] = {k: _fmt(d[k]) for k in PAPER_DEFAULTS}
    parser["pipeline"] = {k: _fmt(v) for k, v in d.items() if k not in PAPER_DEFAULTS}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# camtopo run configuration\n")
        parser.write(fh)


def _fmt(v) -> str:
    return "none" if v is None else str(v)


def _parse_sets(items: List[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


# --------------------------------------------------------------------------
# run directories


@contextmanager
def run_directory(path):
    """Create ``path`` and hold its lock file for the duration."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunDirLocked(f"run directory {path} is in use (remove {lock} if stale)") from exc
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _snapshot(out: Path, args, cfg: PipelineConfig, **extra) -> None:
    write_config(cfg, out / "config.ini")
    doc = {"version": __version__, "command": args.command, "seed": cfg.seed,
           "argv": [a for a in sys.argv[1:]]}
    doc.update({k: str(v) for k, v in extra.items()})
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def _find_ground_truth(explicit, *dirs) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    for d in dirs:
        for cand in (Path(d) / "ground_truth.json", Path(d).parent / "ground_truth.json"):
            if cand.exists():
                return cand
    return None


def _config_for(args) -> PipelineConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    from .sim import default_scenario, drift_scenario, export_scenario, load_spec, separable_scenario

    seed = args.seed if args.seed is not None else 0
    if args.spec:
        spec = load_spec(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = {"default": default_scenario, "drift": drift_scenario,
                "separable": separable_scenario}[args.scenario](seed=seed)
    out = export_scenario(spec, args.out)
    print(f"wrote scenario to {out}")
    return EXIT_OK


def _write_trace(out: Path, trace, truth) -> List[dict]:
    from .evaluation import rank1

    rows = []
    true_pairs = truth.true_pairs("init") if truth is not None else None
    for name, corr in trace:
        row = {"stage": name, "matches": len(corr), "rank1": ""}
        if true_pairs:
            row["rank1"] = rank1(corr, true_pairs)
        rows.append(row)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["stage", "matches", "rank1"])
        w.writeheader()
        w.writerows(rows)
    return rows


def _write_correspondences(path, corr) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["exit_camera", "exit_id", "exit_time", "entry_camera", "entry_id", "entry_time",
                    "delta_t", "similarity"])
        for c in corr:
            w.writerow([c.exit[0], c.exit[1], repr(c.exit_time), c.entry[0], c.entry[1], repr(c.entry_time),
                        repr(c.delta_t), repr(c.similarity)])


def cmd_init(args) -> int:
    from .ingest import load_dataset
    from .sim import GroundTruth
    from .topology import export_topology, initialize_topology

    cfg = _config_for(args)
    data = load_dataset(args.dataset)
    gt_path = _find_ground_truth(args.ground_truth, args.dataset)
    truth = GroundTruth.load(gt_path) if gt_path else None
    with run_directory(args.out) as out:
        _snapshot(out, args, cfg, dataset=Path(args.dataset).resolve())
        res = initialize_topology(data, cfg)
        for name, snap in res.snapshots:
            tag = name.replace(" ", "_")
            if name.startswith("iteration"):
                tag = f"iteration_{int(name.split()[1]):02d}"
            export_topology(snap, out / f"topology_{tag}.json", res.camera_topology, res.zones)
        export_topology(res.zone_topology, out / "topology_final.json", res.camera_topology, res.zones)
        final = res.trace[-1][1] if res.trace else []
        _write_correspondences(out / "correspondences.csv", final)
        rows = _write_trace(out, res.trace, truth)
    for r in rows:
        r1 = f"  rank-1 {r['rank1']:.3f}" if r["rank1"] != "" else ""
        print(f"{r['stage']:<14} {r['matches']:>5} matches{r1}")
    print(f"{len(res.zone_topology.valid)} valid zone links; results in {args.out}")
    return EXIT_OK


def cmd_online(args) -> int:
    from .ingest import load_dataset
    from .online import run_online, write_match_log
    from .topology import export_topology, load_topology

    cfg = _config_for(args)
    run = Path(args.run)
    topo, zones, cam = load_topology(run / "topology_final.json")
    if zones is None:
        raise ValidationError(f"{run / 'topology_final.json'} carries no zones")
    stream = load_dataset(args.stream)
    with run_directory(args.out) as out:
        _snapshot(out, args, cfg, run=run.resolve(), stream=Path(args.stream).resolve(),
                  update=not args.no_update)
        res = run_online(topo, zones, stream, cfg, update=not args.no_update)
        write_match_log(res.log, out / "match_log.csv")
        export_topology(res.topology, out / "topology_final.json", cam, zones)
        refits = sum(r.refit for r in res.log)
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump({"matches": len(res.log), "refits": refits, "update": not args.no_update}, fh, indent=1)
    print(f"{len(res.log)} matches, {refits} refits; results in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_topology, rank1, write_report
    from .online import read_match_log
    from .sim import GroundTruth
    from .topology import load_topology

    run = Path(args.run)
    gt_path = _find_ground_truth(args.ground_truth)
    if gt_path is None:
        raise ValidationError("eval needs --ground-truth")
    truth = GroundTruth.load(gt_path)
    topo, zones, _ = load_topology(run / "topology_final.json")
    online = (run / "match_log.csv").exists()
    phase = "online" if online else "init"
    after = truth.split_time if online else None
    report = evaluate_topology(topo, zones, truth, phase=phase, after=after)
    true_pairs = truth.true_pairs(phase)
    if online:
        matches = read_match_log(run / "match_log.csv")
        if true_pairs:
            report.rank1 = rank1(matches, true_pairs)
    elif (run / "correspondences.csv").exists():
        with open(run / "correspondences.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        matches = [((r["exit_camera"], int(r["exit_id"])), (r["entry_camera"], int(r["entry_id"]))) for r in rows]
        if true_pairs:
            report.rank1 = rank1(matches, true_pairs)
    if (run / "trace.csv").exists():
        with open(run / "trace.csv", newline="", encoding="utf-8") as fh:
            report.stages = {r["stage"]: float(r["rank1"]) for r in csv.DictReader(fh) if r["rank1"]}
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "links.csv")
    det = report.detection
    print(f"links: {det['recovered']}/{det['true_links']} recovered, {len(det['spurious'])} spurious")
    if report.transition_time_error is not None:
        print(f"transition time error {report.transition_time_error:.3f} s, "
              f"topology distance {report.topology_distance:.4f}")
    if report.rank1 is not None:
        print(f"rank-1 {report.rank1:.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluation import benchmark_matching

    cfg = _config_for(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = benchmark_matching(sizes, K=args.k, cfg=cfg, repeats=args.repeats, seed=cfg.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    for r in rows:
        ratio = f"{r['ratio']:.2f}" if r["ratio"] is not None else "-"
        print(f"N={r['N']:<5} {r['path']:<10} median {r['median_s']:.4f} s  ratio {ratio}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [paper_defaults] and [pipeline] sections")
    common.add_argument("--seed", type=int, help="root seed for every random choice")
    common.add_argument("--threads", type=int, default=None, help="cap on numeric library threads")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="camtopo", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--spec", help="scenario JSON file")
    s.add_argument("--scenario", choices=["default", "drift", "separable"], default="default")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("init", parents=[common], help="initialize the topology from a dataset")
    s.add_argument("dataset", help="dataset directory or manifest")
    s.add_argument("--ground-truth", help="ground-truth JSON for the rank-1 trace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("online", parents=[common], help="run the online stage on a stream")
    s.add_argument("run", help="run directory of a previous init")
    s.add_argument("stream", help="dataset directory or manifest of the stream")
    s.add_argument("--no-update", action="store_true", help="never refit link distributions")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_online)

    s = sub.add_parser("eval", parents=[common], help="score a run against ground truth")
    s.add_argument("run", help="run directory (init or online)")
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--out", help="report directory (default: the run directory)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="time forest against exhaustive matching")
    s.add_argument("--sizes", default="100,200,400")
    s.add_argument("--k", type=int, default=30)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
