"""Federated orchestration: per-client local training, size-weighted parameter
averaging, and round-by-round evaluation on the server-held test split.

Clients keep their optimizer moments and RNG stream across rounds, so a
single-client federation follows exactly the same trajectory as centralized
training with the same total epoch count.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import fairness, model
from .errors import InvalidArgumentError
from .model import Batch, EncoderBank, LossBreakdown, LossWeights, ModelParams
from .numkit import OptimizerState, Rng, adamw_step
from .scmdata import Dataset, Partition

# Client RNG streams live at 1000 + client id under the run seed.
_STREAM_CLIENT_BASE = 1000


@dataclass
class FLConfig:
    clients: int = 5
    rounds: int = 4
    local_epochs: int = 2
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 5e-4
    adapter_learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    weights: LossWeights | None = None

    def __post_init__(self):
        if min(self.clients, self.rounds, self.local_epochs, self.batch_size) < 1:
            raise InvalidArgumentError("FLConfig: clients, rounds, epochs and batch size must be >= 1")

    def optimizer_state(self, params: ModelParams) -> OptimizerState:
        lr: float | np.ndarray = self.learning_rate
        if self.adapter_learning_rate is not None:
            # per-parameter rates: adapter block first in the flat layout
            lr = np.full(params.n_params, self.learning_rate)
            lr[: params.w_a.size + params.b_a.size] = self.adapter_learning_rate
        return OptimizerState.fresh(
            params.n_params,
            lr=lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )


@dataclass
class ClientState:
    client_id: int
    train: Dataset
    val: Dataset
    params: ModelParams
    opt_state: OptimizerState
    rng: Rng

    @property
    def n_train(self) -> int:
        return self.train.n


@dataclass
class RoundLog:
    round_index: int
    client_losses: list[dict]
    report: fairness.FairnessReport

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "clients": self.client_losses,
            "report": self.report.to_dict(),
        }


@dataclass
class FederationResult:
    params: ModelParams
    rounds: list[RoundLog]

    @property
    def final_report(self) -> fairness.FairnessReport:
        return self.rounds[-1].report


def make_clients(
    shares: list[tuple[Dataset, Dataset]] | Partition,
    init_params: ModelParams,
    config: FLConfig,
) -> list[ClientState]:
    """One ClientState per (train, val) share, all starting from copies of the
    same initial parameters, each with its own RNG stream."""
    if isinstance(shares, Partition):
        shares = shares.clients
    clients = []
    for cid, (train, val) in enumerate(shares):
        params = init_params.copy()
        clients.append(
            ClientState(
                client_id=cid,
                train=train,
                val=val,
                params=params,
                opt_state=config.optimizer_state(params),
                rng=Rng(config.seed, _STREAM_CLIENT_BASE + cid),
            )
        )
    return clients


def _dataset_batch(data: Dataset, idx: np.ndarray) -> Batch:
    return Batch(
        x=data.x[idx],
        y=data.y[idx],
        attributes={k: v[idx] for k, v in data.attrs.items()},
    )


def _mean_breakdown(parts: list[tuple[int, LossBreakdown]]) -> dict:
    total_n = sum(n for n, _ in parts)
    out: dict[str, float] = {}
    for key in ("total", "sup", "con", "lf", "gf"):
        out[key] = sum(n * getattr(b, key) for n, b in parts) / total_n
    return out


def local_train(
    client: ClientState, bank: EncoderBank, config: FLConfig, epochs: int | None = None
) -> tuple[ClientState, list[dict]]:
    """Mini-batch training on the client's own data only.

    Shuffles come from the client's persistent stream, so rerunning with the
    same state reproduces the trajectory bit for bit, and consecutive calls
    continue where the previous one stopped.
    """
    if client.train.n < 1:
        raise InvalidArgumentError("local_train: empty training set")
    if config.weights is None:
        raise InvalidArgumentError("local_train: config.weights not set")
    epochs = config.local_epochs if epochs is None else epochs
    params, opt = client.params, client.opt_state
    d_e, hidden = params.d_e, params.hidden
    trace = []
    for _ in range(epochs):
        perm = client.rng.permutation(client.train.n)
        batch_parts: list[tuple[int, LossBreakdown]] = []
        for start in range(0, client.train.n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = _dataset_batch(client.train, idx)
            breakdown, grad = model.total_loss_and_grads(params, bank, batch, config.weights)
            vec, opt = adamw_step(params.flatten(), grad, opt)
            params = ModelParams.unflatten(vec, d_e, hidden)
            batch_parts.append((len(idx), breakdown))
        epoch_log = {"train": _mean_breakdown(batch_parts)}
        if client.val.n > 0:
            val_breakdown, _ = model.total_loss_and_grads(
                params, bank, _dataset_batch(client.val, np.arange(client.val.n)), config.weights
            )
            epoch_log["val"] = val_breakdown.to_dict()
        trace.append(epoch_log)
    new_state = replace(client, params=params, opt_state=opt)
    return new_state, trace


def aggregate(params_list: list[ModelParams], sizes: list[int]) -> ModelParams:
    """Size-weighted average, accumulated in client-index order for bit-stable results."""
    if not params_list or len(params_list) != len(sizes):
        raise InvalidArgumentError("aggregate: params and sizes must be nonempty and aligned")
    if min(sizes) <= 0:
        raise InvalidArgumentError("aggregate: sizes must be positive")
    d_e, hidden = params_list[0].d_e, params_list[0].hidden
    vecs = [p.flatten() for p in params_list]
    if any(v.shape != vecs[0].shape for v in vecs):
        raise InvalidArgumentError("aggregate: parameter shape mismatch")
    total = float(sum(sizes))
    out = np.zeros_like(vecs[0])
    for v, n in zip(vecs, sizes):
        out += (n / total) * v
    return ModelParams.unflatten(out, d_e, hidden)


def evaluate_params(params: ModelParams, bank: EncoderBank, data: Dataset) -> fairness.FairnessReport:
    """Hard fairness metrics of the model's predictions on one dataset."""
    y_pred, y_score, _ = model.predict(params, bank, data.x)
    preds = fairness.PredictionSet(
        y_true=data.y, y_pred=y_pred, y_score=y_score, attributes=data.attrs
    )
    return fairness.evaluate(preds)


def run_federation(
    clients: list[ClientState],
    bank: EncoderBank,
    config: FLConfig,
    test_data: Dataset,
) -> FederationResult:
    """Rounds of broadcast, local training, weighted aggregation, evaluation.

    Privacy shape: each client's update sees only its own ClientState; the
    server touches parameters and sizes, never rows.
    """
    if not clients:
        raise InvalidArgumentError("run_federation: need at least one client")
    sizes = [c.n_train for c in clients]
    global_params = aggregate([c.params for c in clients], sizes)
    logs: list[RoundLog] = []
    for rnd in range(config.rounds):
        client_losses = []
        for i, client in enumerate(clients):
            client.params = global_params.copy()
            new_state, trace = local_train(client, bank, config)
            clients[i] = new_state
            client_losses.append({"client": client.client_id, "epochs": trace})
        global_params = aggregate([c.params for c in clients], sizes)
        report = evaluate_params(global_params, bank, test_data)
        logs.append(RoundLog(round_index=rnd, client_losses=client_losses, report=report))
    return FederationResult(params=global_params, rounds=logs)
