"""Command-line entry point: gen-data, train, metrics, simulate, export, pipeline.

Configuration is one JSON document with optional sections ``synthetic``,
``als``, ``tower``, ``train`` and ``sim`` plus a top-level ``seed``.
Precedence is flag > file > built-in default; ``GEOTOWER_SEED`` overrides
the file seed and ``--seed`` overrides both.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import (
    DataError,
    SyntheticConfig,
    build_vocab,
    generate_synthetic,
    load_impressions,
    load_interactions,
)
from .metrics import (
    covariance_spectrum,
    export_spectrum_csv,
    information_abundance,
    write_summary_json as write_metrics_json,
)
from .models import AlsConfig, ModelArtifact, TowerConfig, fit_mf
from .numeric import NumericError
from .rerank import SimConfig, export_curves, radial_filter_replay, replay
from .rerank import write_summary_json as write_sim_json
from .training import TrainConfig, train

logger = logging.getLogger("geotower")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CLI_MODELS = {"mf": "mf", "tower-r9": "tower_r9", "tower-multi": "tower_multi"}
SEED_ENV = "GEOTOWER_SEED"
RUN_LOG = "run_log.jsonl"


class ConfigError(ValueError):
    pass


SECTIONS = {
    "synthetic": SyntheticConfig,
    "als": AlsConfig,
    "tower": TowerConfig,
    "train": TrainConfig,
    "sim": SimConfig,
}
SEEDED = ("synthetic", "als", "tower", "train")


@dataclass
class RunConfig:
    seed: int = 42
    sections: dict = field(default_factory=dict)   # section name -> raw overrides

    def build(self, name: str, **extra):
        """Instantiate and validate one section; errors name the field path."""
        cls = SECTIONS[name]
        values = dict(self.sections.get(name, {}))
        if name in SEEDED:
            values["seed"] = self.seed
        values.update({k: v for k, v in extra.items() if v is not None})
        known = {f.name: f for f in fields(cls)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown field")
            _check_type(f"{name}.{key}", known[key].default, value)
        try:
            cfg = cls(**values)
            cfg.validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
        return cfg

    def validate_all(self) -> None:
        for name in SECTIONS:
            self.build(name)


def _check_type(path, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


def load_run_config(path, seed_flag=None) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    unknown = set(data) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name in SECTIONS:
        if not isinstance(data.get(name, {}), dict):
            raise ConfigError(f"{name}: section must be an object")
    seed = data.get("seed", 42)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    if seed_flag is not None:
        seed = seed_flag
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    return RunConfig(seed, {k: v for k, v in data.items() if k in SECTIONS})


# ---------------------------------------------------------------- commands


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def cmd_gen_data(rc: RunConfig, out) -> dict:
    cfg = rc.build("synthetic")
    out = Path(out)
    if not out.exists():
        print(f"creating output directory {out}")
    paths = generate_synthetic(cfg, out)
    counts = {}
    for name, p in asdict(paths).items():
        p = Path(p)
        rows = len(json.loads(p.read_text())) if p.suffix == ".json" else \
            sum(1 for _ in p.open(encoding="utf-8")) - 1
        counts[name] = rows
        print(f"{p}\t{rows} rows")
    return counts


def cmd_train(rc: RunConfig, kind: str, interactions, out, workers=1, **overrides) -> ModelArtifact:
    its, dropped = load_interactions(_require(interactions, "interactions file"))
    logger.info("loaded %d high-intent interactions (%d dropped)", len(its), dropped)
    vocab = build_vocab(its)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / RUN_LOG
    t0 = time.time()
    if kind == "mf":
        cfg = rc.build("als", **overrides.get("als", {}))
        art = fit_mf(its, vocab, cfg, workers=workers)
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": kind, "objective": art.extra["als_objective"],
                                 "wall_time": time.time(), "seconds": time.time() - t0}) + "\n")
    else:
        base = TowerConfig.for_kind(kind)
        tower_cfg = rc.build("tower", resolutions=list(base.resolutions), use_city=base.use_city,
                             **overrides.get("tower", {}))
        train_cfg = rc.build("train", **overrides.get("train", {}))
        art, report = train(kind, its, vocab, tower_cfg, train_cfg, log_path=log_path)
        logger.info("%s final loss %.6f", kind, report.final_loss)
    art.save(out)
    print(f"{kind}: {len(art.location_keys)} location embeddings -> {out}")
    return art


def _load_artifacts(paths) -> dict[str, ModelArtifact]:
    arts = {}
    for p in paths:
        art = ModelArtifact.load(_require(p, "artifact"))
        name = art.kind if art.kind not in arts else f"{art.kind}:{Path(p).name}"
        arts[name] = art
    return arts


def cmd_metrics(artifacts, out) -> dict[str, float]:
    arts = _load_artifacts(artifacts)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ia = {m: information_abundance(a.location_embeddings) for m, a in arts.items()}
    spectra = {m: covariance_spectrum(a.location_embeddings) for m, a in arts.items()}
    write_metrics_json(out / "metrics_summary.json", ia)
    export_spectrum_csv(out / "spectrum.csv", spectra)
    for m in arts:
        print(f"{m}\tIA {ia[m].ia:.4f}\tlog-spectrum decay {spectra[m].decay:.4f}")
    return {m: r.ia for m, r in ia.items()}


def cmd_simulate(rc: RunConfig, artifacts, impressions, out, ia=None):
    cfg = rc.build("sim")
    arts = _load_artifacts(artifacts)
    imps = load_impressions(_require(impressions, "impressions file"))
    if not imps:
        raise DataError(f"{impressions}: no impressions")
    reports = [replay(imps, a, cfg, name=m) for m, a in arts.items()]
    reports.append(radial_filter_replay(imps, cfg))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    export_curves(out / "curves.csv", reports)
    write_sim_json(out / "simulate_summary.json", reports, ia)
    for r in reports:
        avg = "n/a" if r.avg_uplift_pct is None else f"{r.avg_uplift_pct:.2f}%"
        print(f"{r.model}\tavg uplift {avg}\tbaseline rate {r.baseline_rentflow_rate:.4f}")
    return reports


def cmd_export(metrics_json, simulate_json, out) -> list[dict]:
    """Join IA and simulation summaries into the final per-model table."""
    try:
        metrics = json.loads(_require(metrics_json, "metrics summary").read_text())
        sim = json.loads(_require(simulate_json, "simulate summary").read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable summary: {exc}") from None
    ia = {row["model"]: row["ia"] for row in metrics}
    rows = []
    for row in sim:
        rows.append({
            "model": row["model"],
            "ia": ia.get(row["model"], row.get("ia")),
            "avg_rentflow_uplift_pct": row["avg_rentflow_uplift_pct"],
            "avg_rentflow_rate": row["avg_rentflow_rate"],
            "baseline_rentflow_rate": row["baseline_rentflow_rate"],
        })
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.json").write_text(json.dumps(rows, indent=2) + "\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["model"], lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v)
                    for k, v in row.items()})
    (out / "table.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"{'model':<14}{'IA':>10}{'avg uplift %':>16}")
    for row in rows:
        ia_s = "" if row["ia"] is None else f"{row['ia']:.2f}"
        up = "" if row["avg_rentflow_uplift_pct"] is None else f"{row['avg_rentflow_uplift_pct']:.2f}"
        print(f"{row['model']:<14}{ia_s:>10}{up:>16}")
    return rows


def cmd_pipeline(rc: RunConfig, out, workers=1) -> list[dict]:
    out = Path(out)
    cmd_gen_data(rc, out / "data")
    models = []
    for kind in ("mf", "tower_r9", "tower_multi"):
        cmd_train(rc, kind, out / "data" / "interactions.csv", out / "models" / kind, workers)
        models.append(out / "models" / kind)
    ia = cmd_metrics(models, out / "reports")
    cmd_simulate(rc, models, out / "data" / "impressions.csv", out / "reports", ia)
    return cmd_export(out / "reports" / "metrics_summary.json",
                      out / "reports" / "simulate_summary.json", out / "reports")


# ------------------------------------------------------------------ parser


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None,
                        help=f"global seed; overrides the config file and ${SEED_ENV}")
    common.add_argument("--workers", type=int, default=1, help="threads for ALS solves")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="geotower", description=__doc__.splitlines()[0],
                                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], formatter_class=fmt,
                       help="write a synthetic interaction and impression log")
    g.add_argument("--out", default="data", help="output directory")

    t = sub.add_parser("train", parents=[common], formatter_class=fmt, help="fit one model")
    t.add_argument("--model", required=True, choices=sorted(CLI_MODELS))
    t.add_argument("--interactions", default="data/interactions.csv")
    t.add_argument("--out", default=None, help="artifact directory (default models/<model>)")
    t.add_argument("--epochs", type=int, default=None, help="tower epochs (config default 15)")
    t.add_argument("--batch-size", type=int, default=None, help="tower batch size (config default 512)")
    t.add_argument("--lr", type=float, default=None, help="Adam learning rate (config default 0.001)")
    t.add_argument("--temperature", type=float, default=None, help="InfoNCE temperature (config default 0.1)")
    t.add_argument("--embed-dim", type=int, default=None, help="embedding size (config default 32)")
    t.add_argument("--factors", type=int, default=None, help="ALS factors (config default 32)")
    t.add_argument("--alpha", type=float, default=None, help="ALS confidence scale (config default 40)")
    t.add_argument("--reg", type=float, default=None, help="ALS regularization (config default 0.01)")
    t.add_argument("--iterations", type=int, default=None, help="ALS iterations (config default 15)")

    m = sub.add_parser("metrics", parents=[common], formatter_class=fmt,
                       help="IA and covariance spectrum per artifact")
    m.add_argument("artifacts", nargs="+")
    m.add_argument("--out", default="reports")

    s = sub.add_parser("simulate", parents=[common], formatter_class=fmt,
                       help="replay the impression log under similarity and radial pruning")
    s.add_argument("artifacts", nargs="+")
    s.add_argument("--impressions", default="data/impressions.csv")
    s.add_argument("--out", default="reports")
    s.add_argument("--tau-grid", type=_floats, default=None,
                   help="comma-separated cosine thresholds (config default -1,0,0.05..0.95)")
    s.add_argument("--radius-grid", type=_floats, default=None,
                   help="comma-separated radii in km (config default 0.5,1,2,5,10,20)")
    s.add_argument("--min-retained", type=float, default=None,
                   help="retention floor for averaging (config default 0.01)")

    e = sub.add_parser("export", parents=[common], formatter_class=fmt,
                       help="join metric and simulation summaries into one table")
    e.add_argument("--metrics", default="reports/metrics_summary.json")
    e.add_argument("--simulate", default="reports/simulate_summary.json")
    e.add_argument("--out", default="reports")

    a = sub.add_parser("pipeline", parents=[common], formatter_class=fmt,
                       help="gen-data, train all models, metrics, simulate and export")
    a.add_argument("--out", default="run", help="root output directory")
    return p


def _run(args) -> None:
    rc = load_run_config(args.config, args.seed)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    rc.validate_all()
    if args.command == "gen-data":
        cmd_gen_data(rc, args.out)
    elif args.command == "train":
        kind = CLI_MODELS[args.model]
        overrides = {
            "als": {"factors": args.factors, "alpha": args.alpha, "reg": args.reg,
                    "iterations": args.iterations},
            "tower": {"embed_dim": args.embed_dim},
            "train": {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
                      "temperature": args.temperature},
        }
        if kind == "mf" and args.embed_dim is not None and args.factors is None:
            overrides["als"]["factors"] = args.embed_dim
        out = args.out or os.path.join("models", kind)
        cmd_train(rc, kind, args.interactions, out, args.workers, **overrides)
    elif args.command == "metrics":
        cmd_metrics(args.artifacts, args.out)
    elif args.command == "simulate":
        if args.tau_grid is not None or args.radius_grid is not None or args.min_retained is not None:
            sim = dict(rc.sections.get("sim", {}))
            for key, value in (("tau_grid", args.tau_grid), ("radius_grid_km", args.radius_grid),
                               ("min_retained_fraction", args.min_retained)):
                if value is not None:
                    sim[key] = value
            rc.sections["sim"] = sim
        cmd_simulate(rc, args.artifacts, args.impressions, args.out)
    elif args.command == "export":
        cmd_export(args.metrics, args.simulate, args.out)
    elif args.command == "pipeline":
        cmd_pipeline(rc, args.out, args.workers)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
