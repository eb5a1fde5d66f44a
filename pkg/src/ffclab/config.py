"""Experiment configuration: TOML parsing, validation, canonical echo and hash.

The config file declares the data source (an SCM preset or inline spec, or a
CSV file), the client partition, the federated training schedule, one or more
loss-weight variants, and the causal-analysis options.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .federation import FLConfig
from .model import LossWeights
from .presets import get_preset
from .scmdata import PartitionPlan, SCMSpec

SCHEMA_VERSION = 1


@dataclass
class ModelDims:
    embed_dim: int = 16
    hidden_dim: int = 16
    tau: float = 0.07


@dataclass
class Variant:
    tag: str
    weights: LossWeights

    def to_dict(self) -> dict:
        w = self.weights
        return {
            "tag": self.tag,
            "alpha": [float(a) for a in w.alpha],
            "beta": [float(b) for b in w.beta],
            "lambda_con": w.lambda_con,
            "lambda_lf": w.lambda_lf,
            "lambda_gf": w.lambda_gf,
            "gf_notion": w.gf_notion,
        }


@dataclass
class AnalysisOptions:
    alpha_ci: float = 0.05
    max_cond_size: int = 3
    refute_repetitions: int = 100
    mediator: str | None = None
    adjustment: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alpha_ci": self.alpha_ci,
            "max_cond_size": self.max_cond_size,
            "refute_repetitions": self.refute_repetitions,
            "mediator": self.mediator,
            "adjustment": {k: list(v) for k, v in self.adjustment.items()},
        }


@dataclass
class ExperimentConfig:
    seed: int
    scm: SCMSpec | None
    csv_source: str | None
    n: int
    partition: PartitionPlan
    fl: FLConfig
    model: ModelDims
    variants: list[Variant]
    analysis: AnalysisOptions

    def __post_init__(self):
        if not self.variants:
            raise ConfigError("config: at least one [[variant]] is required")
        tags = [v.tag for v in self.variants]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"config: duplicate variant tags in {tags}")
        for v in self.variants:
            if v.tag == "baseline" and (v.weights.lambda_lf != 0 or v.weights.lambda_gf != 0):
                raise ConfigError("config: the 'baseline' variant must have lambda_lf = lambda_gf = 0")
        if self.scm is None and self.csv_source is None:
            raise ConfigError("config: need an [scm] section or a csv source")

    @property
    def attributes(self) -> list[str]:
        if self.scm is not None:
            return list(self.scm.attributes)
        return []

    def baseline(self) -> Variant | None:
        for v in self.variants:
            if v.tag == "baseline":
                return v
        return None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "scm": None if self.scm is None else self.scm.to_dict(),
            "csv_source": self.csv_source,
            "n": self.n,
            "partition": {
                "clients": self.partition.clients,
                "gamma": self.partition.gamma,
                "skew_variable": self.partition.skew_variable,
                "test_fraction": self.partition.test_fraction,
                "train_ratio": list(self.partition.train_ratio),
                "seed": self.partition.seed,
            },
            "federation": {
                "rounds": self.fl.rounds,
                "local_epochs": self.fl.local_epochs,
                "batch_size": self.fl.batch_size,
                "learning_rate": self.fl.learning_rate,
                "adapter_learning_rate": self.fl.adapter_learning_rate,
                "beta1": self.fl.beta1,
                "beta2": self.fl.beta2,
                "eps": self.fl.eps,
                "weight_decay": self.fl.weight_decay,
            },
            "model": {
                "embed_dim": self.model.embed_dim,
                "hidden_dim": self.model.hidden_dim,
                "tau": self.model.tau,
            },
            "variants": [v.to_dict() for v in self.variants],
            "analysis": self.analysis.to_dict(),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        part = PartitionPlan(
            clients=self.partition.clients,
            gamma=self.partition.gamma,
            skew_variable=self.partition.skew_variable,
            test_fraction=self.partition.test_fraction,
            train_ratio=self.partition.train_ratio,
            seed=seed,
        )
        fl = FLConfig(
            clients=self.fl.clients,
            rounds=self.fl.rounds,
            local_epochs=self.fl.local_epochs,
            batch_size=self.fl.batch_size,
            seed=seed,
            learning_rate=self.fl.learning_rate,
            adapter_learning_rate=self.fl.adapter_learning_rate,
            beta1=self.fl.beta1,
            beta2=self.fl.beta2,
            eps=self.fl.eps,
            weight_decay=self.fl.weight_decay,
        )
        return ExperimentConfig(
            seed=seed,
            scm=self.scm,
            csv_source=self.csv_source,
            n=self.n,
            partition=part,
            fl=fl,
            model=self.model,
            variants=self.variants,
            analysis=self.analysis,
        )


def config_from_echo(echo: dict) -> ExperimentConfig:
    """Rebuild a config from the `config` section a report embeds.

    The echo captures the fully resolved experiment (including the concrete
    SCM and mixing matrix), so rebuilding and re-running reproduces the
    report; `to_dict` of the result equals the echo.
    """
    seed = int(echo["seed"])
    part = echo["partition"]
    plan = PartitionPlan(
        clients=int(part["clients"]),
        gamma=float(part["gamma"]),
        skew_variable=part["skew_variable"],
        test_fraction=float(part["test_fraction"]),
        train_ratio=tuple(part["train_ratio"]),
        seed=int(part["seed"]),
    )
    fed = echo["federation"]
    fl = FLConfig(
        clients=plan.clients,
        rounds=int(fed["rounds"]),
        local_epochs=int(fed["local_epochs"]),
        batch_size=int(fed["batch_size"]),
        seed=seed,
        learning_rate=float(fed["learning_rate"]),
        adapter_learning_rate=fed.get("adapter_learning_rate"),
        beta1=float(fed["beta1"]),
        beta2=float(fed["beta2"]),
        eps=float(fed["eps"]),
        weight_decay=float(fed["weight_decay"]),
    )
    variants = [
        Variant(
            tag=v["tag"],
            weights=LossWeights(
                alpha=np.asarray(v["alpha"], dtype=np.float64),
                beta=np.asarray(v["beta"], dtype=np.float64),
                lambda_con=float(v["lambda_con"]),
                lambda_lf=float(v["lambda_lf"]),
                lambda_gf=float(v["lambda_gf"]),
                gf_notion=v["gf_notion"],
            ),
        )
        for v in echo["variants"]
    ]
    ana = echo["analysis"]
    return ExperimentConfig(
        seed=seed,
        scm=None if echo.get("scm") is None else SCMSpec.from_dict(echo["scm"]),
        csv_source=echo.get("csv_source"),
        n=int(echo["n"]),
        partition=plan,
        fl=fl,
        model=ModelDims(
            embed_dim=int(echo["model"]["embed_dim"]),
            hidden_dim=int(echo["model"]["hidden_dim"]),
            tau=float(echo["model"]["tau"]),
        ),
        variants=variants,
        analysis=AnalysisOptions(
            alpha_ci=float(ana["alpha_ci"]),
            max_cond_size=int(ana["max_cond_size"]),
            refute_repetitions=int(ana["refute_repetitions"]),
            mediator=ana.get("mediator"),
            adjustment={k: list(v) for k, v in ana.get("adjustment", {}).items()},
        ),
    )


def _loss_weights(entry: dict, n_attrs: int, where: str) -> LossWeights:
    alpha = entry.get("alpha")
    beta = entry.get("beta")
    uniform = [1.0 / n_attrs] * n_attrs
    try:
        return LossWeights(
            alpha=np.asarray(alpha if alpha is not None else uniform, dtype=np.float64),
            beta=np.asarray(beta if beta is not None else uniform, dtype=np.float64),
            lambda_con=float(entry.get("lambda_con", 0.5)),
            lambda_lf=float(entry.get("lambda_lf", 1.0)),
            lambda_gf=float(entry.get("lambda_gf", 1.0)),
            gf_notion=str(entry.get("gf_notion", "dp")),
        )
    except Exception as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_scm(section: dict) -> SCMSpec:
    if "preset" in section:
        kwargs = {k: v for k, v in section.items() if k != "preset"}
        try:
            return get_preset(section["preset"], **kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"[scm]: {exc}") from exc
    try:
        return SCMSpec.from_dict(section)
    except Exception as exc:
        raise ConfigError(f"[scm]: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from exc
    return config_from_dict(raw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_from_dict(raw: dict) -> ExperimentConfig:
    seed = int(raw.get("seed", 0))
    scm = None
    csv_source = None
    if "scm" in raw:
        scm = _parse_scm(raw["scm"])
    if "csv" in raw:
        csv_source = str(raw["csv"].get("path", "")) or None

    data = raw.get("data", {})
    n = int(data.get("n", 4000))

    part = raw.get("partition", {})
    try:
        plan = PartitionPlan(
            clients=int(part.get("clients", 5)),
            gamma=float(part.get("gamma", 0.5)),
            skew_variable=str(part.get("skew_variable", "a1")),
            test_fraction=float(part.get("test_fraction", 0.2)),
            train_ratio=tuple(part.get("train_ratio", (4, 1))),
            seed=seed,
        )
    except Exception as exc:
        raise ConfigError(f"[partition]: {exc}") from exc

    fed = raw.get("federation", {})
    try:
        fl = FLConfig(
            clients=plan.clients,
            rounds=int(fed.get("rounds", 4)),
            local_epochs=int(fed.get("local_epochs", 2)),
            batch_size=int(fed.get("batch_size", 64)),
            seed=seed,
            learning_rate=float(fed.get("learning_rate", 5e-4)),
            adapter_learning_rate=(
                float(fed["adapter_learning_rate"]) if "adapter_learning_rate" in fed else None
            ),
            beta1=float(fed.get("beta1", 0.9)),
            beta2=float(fed.get("beta2", 0.999)),
            eps=float(fed.get("eps", 1e-8)),
            weight_decay=float(fed.get("weight_decay", 0.01)),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"[federation]: {exc}") from exc

    mdl = raw.get("model", {})
    dims = ModelDims(
        embed_dim=int(mdl.get("embed_dim", 16)),
        hidden_dim=int(mdl.get("hidden_dim", 16)),
        tau=float(mdl.get("tau", 0.07)),
    )

    n_attrs = len(scm.attributes) if scm is not None else int(raw.get("n_attributes", 2))
    variants = []
    for i, entry in enumerate(raw.get("variant", [])):
        tag = str(entry.get("tag", f"variant-{i}"))
        variants.append(Variant(tag=tag, weights=_loss_weights(entry, n_attrs, f"[[variant]] {tag}")))

    ana = raw.get("analysis", {})
    analysis = AnalysisOptions(
        alpha_ci=float(ana.get("alpha_ci", 0.05)),
        max_cond_size=int(ana.get("max_cond_size", 3)),
        refute_repetitions=int(ana.get("refute_repetitions", 100)),
        mediator=ana.get("mediator"),
        adjustment={k: list(v) for k, v in ana.get("adjustment", {}).items()},
    )

    return ExperimentConfig(
        seed=seed,
        scm=scm,
        csv_source=csv_source,
        n=n,
        partition=plan,
        fl=fl,
        model=dims,
        variants=variants,
        analysis=analysis,
    )
