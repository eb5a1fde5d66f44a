"""Experiment runner: generate data, train the loss-weight variants, run the
per-client causal analysis, and render the report tables.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Reports are deterministic for a fixed config and seed: no timestamps, floats
rendered with their shortest round-trip representation, files written
atomically (temp + rename).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, causal, fairness, federation, model, scmdata
from .config import SCHEMA_VERSION, ExperimentConfig, load_config
from .errors import (
    ConfigError,
    DegenerateGroupError,
    FFCLabError,
    InvalidArgumentError,
    NumericFailureError,
    PartitionInfeasibleError,
    SchemaError,
    UnsupportedStratumError,
)
from .numkit import Rng

# Streams reserved under the run seed (clients use 1000+, refutation 1000+ per
# its own seed; see federation and causal).
_STREAM_BANK = 11
_STREAM_INIT = 12


def _atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _client_dir(data_dir: Path, cid: int) -> Path:
    return data_dir / f"client{cid:02d}"


def resolve_seed(cli_seed: int | None, config: ExperimentConfig) -> int:
    """Seed precedence: --seed flag, then FFC_SEED, then the config file."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("FFC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"FFC_SEED is not an integer: {env!r}") from exc
    return config.seed


def _load_effective_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    seed = resolve_seed(getattr(args, "seed", None), config)
    if seed != config.seed:
        config = config.with_seed(seed)
    return config


def _source_dataset(config: ExperimentConfig) -> scmdata.Dataset:
    if config.scm is not None:
        return scmdata.sample_scm(config.scm, config.n, config.seed)
    if config.csv_source is None:
        raise ConfigError("config has neither an SCM nor a csv source")
    return scmdata.load_csv(config.csv_source)


def cmd_generate(config: ExperimentConfig, out: Path) -> Path:
    data = _source_dataset(config)
    partition = scmdata.partition_clients(data, config.partition)

    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    scmdata.save_csv(partition.test, data_dir / "test.csv")
    for cid, (train, val) in enumerate(partition.clients):
        cdir = _client_dir(data_dir, cid)
        cdir.mkdir(parents=True, exist_ok=True)
        scmdata.save_csv(train, cdir / "train.csv")
        scmdata.save_csv(val, cdir / "val.csv")

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "ffclab_version": __version__,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "n": data.n,
        "d_x": data.d_x,
        "attributes": list(data.attrs),
        "extra_columns": list(data.extra),
        "partition": partition.assignment,
    }
    _write_json(data_dir / "manifest.json", manifest)
    return data_dir


def _read_manifest(data_dir: Path, config: ExperimentConfig) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise SchemaError(f"missing manifest {path}; run `ffclab generate` first")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("seed") != config.seed:
        raise SchemaError(
            f"manifest seed {manifest.get('seed')} does not match configured seed "
            f"{config.seed}; refusing to mix runs (regenerate the data)"
        )
    if manifest.get("config_hash") != config.config_hash():
        raise SchemaError(
            "manifest was generated from a different config; refusing to mix runs "
            "(regenerate the data)"
        )
    return manifest


def _load_partition(data_dir: Path, n_clients: int):
    test = scmdata.load_csv(data_dir / "test.csv")
    shares = []
    for cid in range(n_clients):
        cdir = _client_dir(data_dir, cid)
        shares.append((scmdata.load_csv(cdir / "train.csv"), scmdata.load_csv(cdir / "val.csv")))
    return test, shares


def _build_bank_and_init(config: ExperimentConfig, d_x: int, attributes: list[str]):
    bank = model.EncoderBank.create(
        d_x=d_x,
        d_e=config.model.embed_dim,
        attributes=attributes,
        rng=Rng(config.seed, _STREAM_BANK),
        tau=config.model.tau,
    )
    init = model.ModelParams.init(config.model.embed_dim, config.model.hidden_dim, Rng(config.seed, _STREAM_INIT))
    return bank, init


def cmd_train(config: ExperimentConfig, data_dir: Path, out: Path) -> Path:
    manifest = _read_manifest(data_dir, config)
    test, shares = _load_partition(data_dir, config.partition.clients)
    bank, init = _build_bank_and_init(config, manifest["d_x"], manifest["attributes"])

    train_dir = out / "train"
    for variant in config.variants:
        fl = federation.FLConfig(
            clients=config.fl.clients,
            rounds=config.fl.rounds,
            local_epochs=config.fl.local_epochs,
            batch_size=config.fl.batch_size,
            seed=config.seed,
            learning_rate=config.fl.learning_rate,
            adapter_learning_rate=config.fl.adapter_learning_rate,
            beta1=config.fl.beta1,
            beta2=config.fl.beta2,
            eps=config.fl.eps,
            weight_decay=config.fl.weight_decay,
            weights=variant.weights,
        )
        clients = federation.make_clients(shares, init, fl)
        result = federation.run_federation(clients, bank, fl, test)

        vdir = train_dir / variant.tag
        vdir.mkdir(parents=True, exist_ok=True)
        _atomic_write(vdir / "params.bin", result.params.to_bytes(seed=config.seed))
        _write_json(vdir / "rounds.json", [r.to_dict() for r in result.rounds])
        _write_json(vdir / "fairness.json", result.final_report.to_dict())
    return train_dir


def _true_parent_adjustment(config: ExperimentConfig, treatment: str) -> list[str]:
    """Adjustment set for a treatment: explicit config override first, else the
    parents of the treatment in the generating SCM (always a valid backdoor
    set).  External CSV data must configure adjustment sets explicitly."""
    if treatment in config.analysis.adjustment:
        return list(config.analysis.adjustment[treatment])
    if config.scm is not None:
        return list(config.scm.parents.get(treatment, []))
    return []


def cmd_analyze(config: ExperimentConfig, data_dir: Path, out: Path) -> Path:
    manifest = _read_manifest(data_dir, config)
    _, shares = _load_partition(data_dir, config.partition.clients)
    attributes = manifest["attributes"]
    mediator = config.analysis.mediator

    client_rows = []
    for cid, (train, val) in enumerate(shares):
        local = train.concat(val)
        variables = local.discrete_names()
        graph = causal.pc_discover(
            local, variables, alpha=config.analysis.alpha_ci, max_cond_size=config.analysis.max_cond_size
        )
        effects = {}
        refutations = {}
        for k, attr in enumerate(attributes):
            adjustment = tuple(_true_parent_adjustment(config, attr))
            med = mediator if (mediator and mediator != attr and mediator in variables) else None
            try:
                est = causal.estimate_effect(local, attr, "y", mediator=med, adjustment=adjustment)
                ref = causal.refute_random_common_cause(
                    local,
                    attr,
                    "y",
                    adjustment=adjustment,
                    repetitions=config.analysis.refute_repetitions,
                    seed=config.seed,
                    stream_offset=(cid * len(attributes) + k) * 100000,
                )
            except UnsupportedStratumError as exc:
                # a fully skewed client can miss one arm of the treatment;
                # report the reason instead of fabricating an estimate
                effects[attr] = {"te": None, "error": str(exc)}
                refutations[attr] = {"old": None, "new": None, "p_value": None, "error": str(exc)}
                continue
            effects[attr] = est.to_dict()
            refutations[attr] = ref.to_dict()
        client_rows.append(
            {
                "client": cid,
                "n": local.n,
                "graph": graph.edge_summary(),
                "effects": effects,
                "refutations": refutations,
            }
        )

    # Unweighted average over the clients where the effect was estimable.
    average = {"effects": {}, "refutations": {}, "skipped_clients": {}}
    for attr in attributes:
        usable = [row for row in client_rows if row["effects"][attr].get("te") is not None]
        skipped = [row["client"] for row in client_rows if row not in usable]
        average["skipped_clients"][attr] = skipped
        if not usable:
            average["effects"][attr] = {"te": None}
            average["refutations"][attr] = {"old": None, "new": None, "p_value": None}
            continue
        average["effects"][attr] = {"te": float(np.mean([r["effects"][attr]["te"] for r in usable]))}
        for key in ("nde", "nie"):
            vals = [r["effects"][attr].get(key) for r in usable]
            if all(v is not None for v in vals):
                average["effects"][attr][key] = float(np.mean(vals))
        average["refutations"][attr] = {
            "old": float(np.mean([r["refutations"][attr]["old"] for r in usable])),
            "new": float(np.mean([r["refutations"][attr]["new"] for r in usable])),
            "p_value": float(np.mean([r["refutations"][attr]["p_value"] for r in usable])),
        }

    analysis_dir = out / "analysis"
    _write_json(analysis_dir / "causal.json", {"clients": client_rows, "average": average})
    return analysis_dir


def _collect_variant_reports(config: ExperimentConfig, out: Path) -> tuple[list[dict], list[str]]:
    warnings = []
    train_dir = out / "train"
    reports = []
    for variant in config.variants:
        path = train_dir / variant.tag / "fairness.json"
        if not path.exists():
            raise SchemaError(f"missing training output {path}; run `ffclab train` first")
        with open(path) as fh:
            entry = {"tag": variant.tag, "fairness": json.load(fh)}
        rounds_path = train_dir / variant.tag / "rounds.json"
        if rounds_path.exists():
            with open(rounds_path) as fh:
                entry["rounds"] = json.load(fh)
        reports.append(entry)

    baseline = next((r for r in reports if r["tag"] == "baseline"), None)
    if baseline is None:
        warnings.append("no 'baseline' variant: fairness-change columns left empty")
        return reports, warnings

    base_report = _report_from_dict(baseline["fairness"])
    for entry in reports:
        if entry["tag"] == "baseline":
            continue
        delta = fairness.fairness_delta(base_report, _report_from_dict(entry["fairness"]))
        entry["fairness"]["delta_dp"] = delta.delta_dp
        entry["fairness"]["delta_eo"] = delta.delta_eo
    return reports, warnings


def _report_from_dict(d: dict) -> fairness.FairnessReport:
    return fairness.FairnessReport(
        acc=d["acc"],
        ap=d["ap"],
        dp=dict(d["dp"]),
        eo=dict(d["eo"]),
        eo_by_label={k: {int(y): g for y, g in v.items()} for k, v in d.get("eo_by_label", {}).items()},
    )


def _trend_pairs(config: ExperimentConfig, reports: list[dict], analysis: dict) -> list[tuple[float, float]]:
    """(|average te|, fairness change) per attribute that has a dedicated
    single-attribute debias variant."""
    pairs = []
    for attr in analysis["average"]["effects"]:
        tag = f"debias-{attr}"
        entry = next((r for r in reports if r["tag"] == tag), None)
        te = analysis["average"]["effects"][attr].get("te")
        if entry is None or te is None or "delta_dp" not in entry["fairness"]:
            continue
        pairs.append((abs(te), entry["fairness"]["delta_dp"][attr]))
    return pairs


def cmd_report(config: ExperimentConfig, out: Path, fmt: str = "both") -> Path:
    reports, warnings = _collect_variant_reports(config, out)

    causal_path = out / "analysis" / "causal.json"
    analysis = None
    if causal_path.exists():
        with open(causal_path) as fh:
            analysis = json.load(fh)
    else:
        warnings.append("no analysis output: causal section left empty")

    trend = None
    if analysis is not None:
        pairs = _trend_pairs(config, reports, analysis)
        if len(pairs) >= 3:
            trend = causal.trend_analysis(pairs).to_dict()
        else:
            warnings.append(
                f"trend analysis needs >= 3 (attribute, debias variant) pairs, have {len(pairs)}"
            )

    report = {
        "schema_version": SCHEMA_VERSION,
        "ffclab_version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "variants": reports,
        "causal": analysis,
        "trend": trend,
        "warnings": warnings,
    }
    if fmt in ("json", "both"):
        _write_json(out / "report.json", report)
    if fmt in ("csv", "both"):
        _atomic_write(out / "table1.csv", _render_table1(config, reports))
        if analysis is not None:
            _atomic_write(out / "table2.csv", _render_table2(analysis))
    return out / "report.json"


def _render_table1(config: ExperimentConfig, reports: list[dict]) -> str:
    attrs = list(reports[0]["fairness"]["dp"].keys())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["variant", "acc", "phi_ap"]
    for a in attrs:
        header += [f"phi_dp_{a}", f"phi_eo_{a}"]
    for a in attrs:
        header += [f"delta_dp_{a}", f"delta_eo_{a}"]
    writer.writerow(header)
    for entry in reports:
        f = entry["fairness"]
        row = [entry["tag"], repr(f["acc"]), repr(f["ap"])]
        for a in attrs:
            row += [repr(f["dp"][a]), repr(f["eo"][a])]
        for a in attrs:
            if "delta_dp" in f:
                row += [repr(f["delta_dp"][a]), repr(f["delta_eo"][a])]
            else:
                row += ["", ""]
        writer.writerow(row)
    return buf.getvalue()


def _render_table2(analysis: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    clients = analysis["clients"]
    header = ["attribute", "quantity"] + [f"client_{row['client']}" for row in clients] + ["average"]
    writer.writerow(header)
    for attr in analysis["average"]["effects"]:
        rows = {
            "te_old": [row["refutations"][attr]["old"] for row in clients]
            + [analysis["average"]["refutations"][attr]["old"]],
            "te_new": [row["refutations"][attr]["new"] for row in clients]
            + [analysis["average"]["refutations"][attr]["new"]],
            "p_value": [row["refutations"][attr]["p_value"] for row in clients]
            + [analysis["average"]["refutations"][attr]["p_value"]],
        }
        for quantity, vals in rows.items():
            writer.writerow([attr, quantity] + ["" if v is None else repr(v) for v in vals])
    return buf.getvalue()


def _run_all(config: ExperimentConfig, out: Path, fmt: str, n_seeds: int = 1) -> None:
    data_dir = cmd_generate(config, out)
    cmd_train(config, data_dir, out)
    cmd_analyze(config, data_dir, out)
    cmd_report(config, out, fmt)
    if n_seeds > 1:
        _run_multiseed(config, out, n_seeds)


def _run_multiseed(config: ExperimentConfig, out: Path, n_seeds: int) -> None:
    """Repeat the pipeline at consecutive seeds and add mean/sd fairness columns.

    The base-seed artifacts at the top level stay untouched; per-seed runs land
    in OUT/seeds/<seed>/ and the aggregate table in OUT/table1_multiseed.csv.
    """
    rows: dict[str, list[dict]] = {v.tag: [] for v in config.variants}
    for offset in range(n_seeds):
        seed = config.seed + offset
        sub = out / "seeds" / str(seed)
        cfg = config.with_seed(seed) if seed != config.seed else config
        data_dir = cmd_generate(cfg, sub)
        cmd_train(cfg, data_dir, sub)
        cmd_report(cfg, sub, "json")
        with open(sub / "report.json") as fh:
            report = json.load(fh)
        for entry in report["variants"]:
            rows[entry["tag"]].append(entry["fairness"])

    attrs = list(next(iter(rows.values()))[0]["dp"].keys())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    metrics = ["acc", "ap"] + [f"dp_{a}" for a in attrs] + [f"eo_{a}" for a in attrs]
    header = ["variant", "seeds"]
    for m in metrics:
        header += [f"{m}_mean", f"{m}_sd"]
    writer.writerow(header)

    def metric_value(f: dict, name: str) -> float:
        if name in ("acc", "ap"):
            return f[name]
        kind, attr = name.split("_", 1)
        return f[kind][attr]

    for tag, reports in rows.items():
        row = [tag, str(n_seeds)]
        for m in metrics:
            vals = np.asarray([metric_value(f, m) for f in reports])
            row += [repr(float(vals.mean())), repr(float(vals.std(ddof=1) if len(vals) > 1 else 0.0))]
        writer.writerow(row)
    _atomic_write(out / "table1_multiseed.csv", buf.getvalue())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ffclab",
        description="Deterministic federated fairness laboratory with causal analysis.",
    )
    parser.add_argument("--version", action="version", version=f"ffclab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_arg=False, fmt=False):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if data_arg:
            p.add_argument("--data", default=None, help="data directory (default: OUT/data)")
        if fmt:
            p.add_argument("--format", choices=["json", "csv", "both"], default="both")

    common(sub.add_parser("generate", help="sample the SCM and write the client partition"))
    common(sub.add_parser("train", help="train every loss-weight variant"), data_arg=True)
    common(sub.add_parser("analyze", help="per-client causal analysis"), data_arg=True)
    common(sub.add_parser("report", help="assemble report tables"), fmt=True)
    run_p = sub.add_parser("run", help="generate + train + analyze + report")
    common(run_p, fmt=True)
    run_p.add_argument(
        "--seeds", type=int, default=1,
        help="repeat at N consecutive seeds and add a mean/sd fairness table",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_effective_config(args)
        out = Path(args.out)
        if args.command == "generate":
            cmd_generate(config, out)
        elif args.command == "train":
            data_dir = Path(args.data) if args.data else out / "data"
            cmd_train(config, data_dir, out)
        elif args.command == "analyze":
            data_dir = Path(args.data) if args.data else out / "data"
            cmd_analyze(config, data_dir, out)
        elif args.command == "report":
            cmd_report(config, out, args.format)
        elif args.command == "run":
            _run_all(config, out, args.format, n_seeds=args.seeds)
    except ConfigError as exc:
        print(f"ffclab: config error: {exc}", file=sys.stderr)
        return 2
    except (
        SchemaError,
        PartitionInfeasibleError,
        DegenerateGroupError,
        UnsupportedStratumError,
        InvalidArgumentError,
    ) as exc:
        print(f"ffclab: data error: {exc}", file=sys.stderr)
        return 3
    except NumericFailureError as exc:
        print(f"ffclab: numeric failure: {exc}", file=sys.stderr)
        return 4
    except FFCLabError as exc:
        print(f"ffclab: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
