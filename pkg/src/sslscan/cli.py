"""``sslscan`` command line: gen-data, train, scan, mitigate, eval, bench, export-plot.

Exit codes: 0 success / benign, 2 usage, 3 trojaned verdict, 4 file format,
5 precondition (e.g. nothing to mitigate).
"""

from __future__ import annotations

import argparse
import base64
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump
from .detector import ScanConfig, scan_encoder
from .harness.bench import bench_sweep
from .harness.data import PIXEL_NOISE, gen_dataset, load_dataset, save_dataset, split_stratified
from .harness.metrics import eval_acc, eval_asr
from .harness.plant import plant_backdoor
from .harness.train import ssl_train
from .harness.triggers import TriggerSpec, load_trigger, poison_dataset, save_trigger
from .numkit import FormatError, encode_encoder, load_encoder, rng_stream, save_encoder
from .rotr import ReversedTrigger
from .scu import scu_mitigate
from .stod import FlaggedTrigger, scan_triggers

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TROJANED = 3
EXIT_FORMAT = 4
EXIT_PRECONDITION = 5

logger = logging.getLogger("sslscan")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Report helpers
# ---------------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def b64_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def array_b64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float32)


def report_digest(report: dict) -> str:
    """SHA-256 of the report with the volatile block (timestamp, timings) removed."""
    body = {k: v for k, v in report.items() if k not in ("volatile", "digest")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def write_report(report: dict, path: str | Path) -> None:
    report["digest"] = report_digest(report)
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def read_report(path: str | Path, kind: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_USAGE, f"report not found: {path}")
    try:
        report = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc}") from exc
    if not isinstance(report, dict) or report.get("kind") != kind:
        raise FormatError(f"{path} is not a {kind}")
    if report.get("digest") != report_digest(report):
        raise FormatError(f"{path}: digest mismatch (report was modified)")
    return report


def _volatile(timings: dict | None = None) -> dict:
    out = {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    if timings is not None:
        out["timings"] = {k: round(v, 6) for k, v in timings.items()}
    return out


def _trigger_record(t: ReversedTrigger) -> dict:
    return {
        "variant": t.variant,
        "size": t.size,
        "norm": t.norm,
        "final_loss": t.final_loss,
        "lam": t.lam,
        "mask": b64_array(t.mask),
        "delta": b64_array(t.delta),
    }


def _trigger_from_record(cluster_id: int, rec: dict) -> ReversedTrigger:
    try:
        return ReversedTrigger(
            cluster_id, rec["variant"], array_b64(rec["mask"]), array_b64(rec["delta"]),
            float(rec["final_loss"]), float(rec["lam"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad trigger record for cluster {cluster_id}: {exc}") from exc


def verdict_from_report(report: dict, cfg: RunConfig | None = None):
    """Recompute the outlier verdict from the stored triggers (no encoder needed)."""
    cfg = cfg or RunConfig.from_dict(report["config"])
    pairs = []
    for c in report["clusters"]:
        cid = int(c["cluster"])
        pairs.append((_trigger_from_record(cid, c["size_oriented"]), _trigger_from_record(cid, c["norm_oriented"])))
    return scan_triggers(pairs, cfg.anomaly)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def parse_k_list(text: str) -> list[int]:
    """``"2..30"`` (inclusive range) or a comma list ``"2,4,8"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}: use A..B or a comma list") from exc


def _ratio(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1], got {text}")
    return v


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.swk.seed = args.seed
        cfg.rotr.seed = args.seed
        cfg.scu.seed = args.seed
    if getattr(args, "k_list", None) is not None:
        cfg.swk.k_list = args.k_list
    if getattr(args, "window", None) is not None:
        cfg.swk.window = args.window
    if getattr(args, "data_ratio", None) is not None and not isinstance(args.data_ratio, list):
        cfg.data_ratio = args.data_ratio
    if getattr(args, "steps", None) is not None:
        cfg.rotr.steps = args.steps
    cfg.validate()
    return cfg


def _load_data(path: str):
    if not Path(path).exists():
        raise CliError(EXIT_USAGE, f"data file not found: {path}")
    return load_dataset(path)


def _load_enc(path: str):
    if not Path(path).exists():
        raise CliError(EXIT_USAGE, f"encoder file not found: {path}")
    return load_encoder(path)


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise CliError(EXIT_USAGE, f"--classes must be >= 2, got {args.classes}")
    if args.per_class < 1:
        raise CliError(EXIT_USAGE, f"--per-class must be >= 1, got {args.per_class}")
    if args.noise < 0:
        raise CliError(EXIT_USAGE, f"--noise must be >= 0, got {args.noise}")
    ds = gen_dataset(args.classes, args.per_class, rng_stream(args.seed, "gen-data"), noise=args.noise)
    save_dataset(ds, args.out)
    print(json.dumps({"n": ds.n, "classes": args.classes, "out": args.out}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    poisoning = args.poison is not None
    if not poisoning and (args.target_class is not None or args.poison_rate is not None):
        raise CliError(EXIT_USAGE, "--target-class/--poison-rate require --poison")
    ds = _load_data(args.data)
    train_cfg = cfg.fixture.train
    train_cfg.epochs = args.epochs
    spec = None
    if poisoning:
        spec = TriggerSpec(args.poison) if args.poison in ("patch", "global_dct") else load_trigger(args.poison)
        spec.validate(ds.geometry)
        target = cfg.fixture.target_class if args.target_class is None else args.target_class
        rate = cfg.fixture.poison_rate if args.poison_rate is None else args.poison_rate
        if not 0 < rate <= 1:
            raise CliError(EXIT_USAGE, f"--poison-rate must lie in (0, 1], got {rate}")
        if ds.labels is None:
            raise CliError(EXIT_PRECONDITION, "poisoning needs a labeled dataset to locate the target class")
        if not 0 <= target < ds.classes:
            raise CliError(EXIT_USAGE, f"--target-class {target} outside [0, {ds.classes})")
        if args.attack == "poison":
            ds, _ = poison_dataset(ds, spec, target, rate, rng_stream(cfg.seed, "train", "poison"))
    enc = ssl_train(ds, cfg.fixture.encoder, train_cfg, rng_stream(cfg.seed, "train"))
    if poisoning and args.attack == "plant":
        refs = ds.x[ds.labels == target][: cfg.fixture.target_refs]
        enc = plant_backdoor(enc, ds.x, refs, spec, rng_stream(cfg.seed, "train", "plant"), ds.geometry, cfg.fixture.plant)
    save_encoder(enc, args.out)
    out = {"out": args.out, "epochs": args.epochs, "seed": cfg.seed}
    if poisoning:
        trig_path = str(args.out) + ".trigger.json"
        save_trigger(spec, trig_path)
        out.update(trigger=trig_path, target_class=target, poison_rate=rate, attack=args.attack)
    print(json.dumps(out))
    return EXIT_OK


def _scan_sample_indices(n: int, ratio: float, seed: int) -> np.ndarray:
    if ratio >= 1:
        return np.arange(n)
    m = max(1, int(round(ratio * n)))
    return np.sort(rng_stream(seed, "scan-sample").choice(n, m, replace=False))


def cmd_scan(args) -> int:
    cfg = _load_config(args)
    enc = _load_enc(args.encoder)
    ds = _load_data(args.data)
    idx = _scan_sample_indices(ds.n, cfg.data_ratio, cfg.seed)
    if idx.size < max(cfg.swk.k_list):
        raise CliError(EXIT_PRECONDITION, f"{idx.size} scan samples cannot support K up to {max(cfg.swk.k_list)}")
    res = scan_encoder(enc, ds.x[idx], ScanConfig(cfg.swk, cfg.rotr, cfg.anomaly))
    v = res.verdict
    report = {
        "kind": "scan_report",
        "tool": "sslscan",
        "version": __version__,
        "inputs": {
            "encoder": str(args.encoder),
            "encoder_digest": sha256_file(args.encoder),
            "data": str(args.data),
            "data_digest": sha256_file(args.data),
            "sample_indices": idx.tolist(),
        },
        "config": cfg.to_dict(),
        "swk": res.trace.to_dict(),
        "assignments": res.model.assignments.tolist(),
        "clusters": [
            {
                "cluster": int(cid),
                "n": int(len(members)),
                "size_oriented": _trigger_record(size_t),
                "norm_oriented": _trigger_record(norm_t),
            }
            for cid, members, (size_t, norm_t) in zip(v.cluster_ids, res.model.members(), res.pairs)
        ],
        "sizes": v.sizes,
        "norms": v.norms,
        "size_anomaly": [_finite(a) for a in v.size_anomaly],
        "norm_anomaly": [_finite(a) for a in v.norm_anomaly],
        "verdict": v.verdict,
        "table": {str(k): [{"variant": e.trigger.variant, "anomaly": _finite(e.anomaly)} for e in es] for k, es in v.table.items()},
        "volatile": _volatile(res.timings),
    }
    write_report(report, args.out)
    print(json.dumps({"verdict": v.verdict, "k": res.trace.k_chosen, "flagged": v.flagged_clusters, "out": args.out}))
    return EXIT_TROJANED if v.trojaned else EXIT_OK


def _finite(a: float):
    # JSON has no infinity; a zero-MAD deviant is stored as the string "inf"
    return a if np.isfinite(a) else "inf"


def cmd_mitigate(args) -> int:
    report = read_report(args.report, "scan_report")
    if report["verdict"] != "trojaned" or not report["table"]:
        raise CliError(EXIT_PRECONDITION, "nothing to mitigate: the scan report is benign")
    cfg = RunConfig.from_dict(report["config"])
    if args.seed is not None:
        cfg.scu.seed = args.seed
    for key in ("passes", "lr", "batch_size"):
        if getattr(args, key, None) is not None:
            setattr(cfg.scu, key, getattr(args, key))
    cfg.validate()
    enc = _load_enc(args.encoder)
    ds = _load_data(args.data)
    if sha256_file(args.encoder) != report["inputs"]["encoder_digest"]:
        raise CliError(EXIT_PRECONDITION, "encoder does not match the one that was scanned")
    if sha256_file(args.data) != report["inputs"]["data_digest"]:
        raise CliError(EXIT_PRECONDITION, "data file does not match the one that was scanned")
    x = ds.x[np.asarray(report["inputs"]["sample_indices"], dtype=np.int64)]
    assign = np.asarray(report["assignments"], dtype=np.int64)
    clusters = [x[assign == k] for k in range(len(report["clusters"]))]
    verdict = verdict_from_report(report, cfg)
    table: dict[int, list[FlaggedTrigger]] = verdict.table
    student, mreport = scu_mitigate(enc, clusters, table, cfg.scu, ds.geometry)
    save_encoder(student, args.out)
    out = {
        "kind": "mitigation_report",
        "tool": "sslscan",
        "version": __version__,
        "inputs": {"encoder_digest": report["inputs"]["encoder_digest"], "scan_digest": report["digest"]},
        "config": dump(cfg.scu),
        "output_digest": hashlib.sha256(encode_encoder(student)).hexdigest(),
        **mreport.to_dict(),
        "volatile": _volatile(),
    }
    write_report(out, str(args.out) + ".report.json")
    print(json.dumps({"out": args.out, "steps": mreport.steps, "final_loss": mreport.losses[-1] if mreport.losses else None}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.trigger is None) != (args.target_class is None):
        raise CliError(EXIT_USAGE, "--trigger and --target-class must be given together")
    enc = _load_enc(args.encoder)
    ds = _load_data(args.data)
    if ds.labels is None:
        raise CliError(EXIT_PRECONDITION, "labels required for evaluation")
    if args.reference:
        ref, test = _load_data(args.reference), ds
        if ref.labels is None:
            raise CliError(EXIT_PRECONDITION, "labels required for evaluation")
    else:
        ref, test = split_stratified(ds, 0.5, rng_stream(args.seed, "eval-split"))
    out = {"ACC": eval_acc(enc, test, ref), "n": test.n}
    if args.trigger is not None:
        if not Path(args.trigger).exists():
            raise CliError(EXIT_USAGE, f"trigger file not found: {args.trigger}")
        spec = load_trigger(args.trigger)
        out["ASR"] = eval_asr(enc, test, spec, args.target_class, ref)
        out["target_class"] = args.target_class
    _emit(out, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    ratios = args.data_ratio or [0.10]
    cfg.fixture.attack = args.attack
    reports = bench_sweep(
        args.n_clean, args.n_trojan, ratios, ScanConfig(cfg.swk, cfg.rotr, cfg.anomaly), cfg.seed, fixture_cfg=cfg.fixture
    )
    out = {
        "kind": "metrics_report",
        "tool": "sslscan",
        "version": __version__,
        "config": cfg.to_dict(),
        "rows": [r.to_dict() for r in reports],
        "volatile": _volatile(),
    }
    write_report(out, args.out)
    for r in reports:
        print(json.dumps({"data_ratio": r.data_ratio, "TP": r.tp, "FP": r.fp, "DACC": r.dacc}))
    return EXIT_OK


def cmd_export_plot(args) -> int:
    report = read_report(args.report, "scan_report")
    try:
        swk = report["swk"]
        rows_swk = list(zip(swk["k_list"], swk["s_list"], swk["swk_s_list"], swk["d_list"]))
        rows_trig = list(
            zip(
                [c["cluster"] for c in report["clusters"]],
                report["sizes"],
                report["norms"],
                report["size_anomaly"],
                report["norm_anomaly"],
            )
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed scan report: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "swk_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "s", "swk_s", "d"])
        w.writerows([[k, repr(s), repr(a), repr(d)] for k, s, a, d in rows_swk])
    with open(out / "trigger_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "size", "norm", "size_anom", "norm_anom"])
        w.writerows([[c, repr(s), repr(n), _csv_num(sa), _csv_num(na)] for c, s, n, sa, na in rows_trig])
    print(json.dumps({"out": str(out), "swk_rows": len(rows_swk), "trigger_rows": len(rows_trig)}))
    return EXIT_OK


def _csv_num(v) -> str:
    return "inf" if v == "inf" else repr(float(v))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sslscan", description="Scan and cleanse self-supervised toy encoders.")
    p.add_argument("--version", action="version", version=f"sslscan {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic labeled dataset (DSET)")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=PIXEL_NOISE, help="per-pixel Gaussian noise std")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="contrastive training, optionally with a backdoor")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--poison", help="trigger kind (patch | global_dct) or trigger spec file")
    t.add_argument("--target-class", type=int)
    t.add_argument("--poison-rate", type=float)
    t.add_argument("--attack", choices=("poison", "plant"), default="plant",
                   help="poison: train on poisoned data; plant: fine-tune the trigger into a clean encoder")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("scan", help="detect a backdoor; exit 3 when trojaned")
    s.add_argument("--encoder", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k-list", type=parse_k_list)
    s.add_argument("--window", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--data-ratio", type=_ratio)
    s.add_argument("--steps", type=int, help="trigger-inversion optimizer steps per cluster")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scan)

    m = sub.add_parser("mitigate", help="unlearn the triggers listed in a scan report")
    m.add_argument("--encoder", required=True)
    m.add_argument("--report", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--passes", type=int)
    m.add_argument("--lr", type=float)
    m.add_argument("--batch-size", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mitigate)

    e = sub.add_parser("eval", help="nearest-centroid ACC and, with a trigger, ASR")
    e.add_argument("--encoder", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--reference", help="labeled set for class centroids (default: half of --data)")
    e.add_argument("--trigger")
    e.add_argument("--target-class", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="detection accuracy over a seeded ensemble")
    b.add_argument("--n-clean", type=int, default=10)
    b.add_argument("--n-trojan", type=int, default=10)
    b.add_argument("--data-ratio", type=_ratio, action="append")
    b.add_argument("--seed", type=int)
    b.add_argument("--attack", choices=("poison", "plant"), default="plant")
    b.add_argument("--k-list", type=parse_k_list)
    b.add_argument("--window", type=int)
    b.add_argument("--steps", type=int)
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export-plot", help="CSV data behind the K-curve and trigger-statistics plots")
    x.add_argument("--report", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"sslscan: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"sslscan: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigError as exc:
        print(f"sslscan: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"sslscan: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
