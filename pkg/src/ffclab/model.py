"""Desk-scale local model: a frozen random linear encoder with a trainable
affine adapter stands in for the prompted image encoder, frozen unit
embeddings stand in for demographic and class text representations, and a
trainable two-layer fused classifier scores each class embedding against the
adapted visual vector.

Four loss terms are produced per batch — supervised cross-entropy, an
embedding-alignment contrastive term, a per-sample group-relevance
equalization term, and a soft score-gap fairness term — with gradients
derived by hand (the encoder and all embeddings stay frozen).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from .numkit import Rng, cosine, kl_div, softmax

PARAMS_LAYOUT_VERSION = 1


@dataclass(frozen=True)
class EncoderBank:
    """Frozen pieces shared by every client: encoder, embeddings, temperature.

    ``group_embeds[attr]`` holds one unit row per group value (0, 1);
    ``class_embeds`` one unit row per label value.  Built once from the global
    seed so all clients see identical frozen modules.
    """

    encoder: np.ndarray  # (d_e, d_x)
    group_embeds: dict[str, np.ndarray]  # attr -> (2, d_e), unit rows
    class_embeds: np.ndarray  # (2, d_e), unit rows
    tau: float = 0.07

    @property
    def d_e(self) -> int:
        return int(self.encoder.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.encoder.shape[1])

    @property
    def attributes(self) -> list[str]:
        return list(self.group_embeds)

    @classmethod
    def create(
        cls, d_x: int, d_e: int, attributes: list[str], rng: Rng, tau: float = 0.07
    ) -> "EncoderBank":
        if tau <= 0:
            raise InvalidArgumentError("EncoderBank: tau must be positive")

        def unit_rows(k: int) -> np.ndarray:
            v = rng.normal(size=(k, d_e))
            return v / np.linalg.norm(v, axis=1, keepdims=True)

        encoder = rng.normal(size=(d_e, d_x), scale=1.0 / np.sqrt(d_x))
        group_embeds = {a: unit_rows(2) for a in attributes}
        return cls(encoder=encoder, group_embeds=group_embeds, class_embeds=unit_rows(2), tau=tau)


@dataclass
class ModelParams:
    """Trainable parameters: adapter (w_a, b_a) and classifier (w1, b1, w2, b2).

    Flat layout (version 1, row-major, float64): w_a, b_a, w1, b1, w2, b2.
    """

    w_a: np.ndarray  # (d_e, d_e)
    b_a: np.ndarray  # (d_e,)
    w1: np.ndarray  # (h, 2*d_e)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: float

    @property
    def d_e(self) -> int:
        return int(self.w_a.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[0])

    @property
    def n_params(self) -> int:
        return self.w_a.size + self.b_a.size + self.w1.size + self.b1.size + self.w2.size + 1

    @classmethod
    def init(cls, d_e: int, hidden: int, rng: Rng) -> "ModelParams":
        """Adapter starts near identity; classifier uses scaled uniform fan-in init."""
        w_a = np.eye(d_e) + rng.normal(size=(d_e, d_e), scale=0.01)
        b_a = np.zeros(d_e)
        lim1 = 1.0 / np.sqrt(2 * d_e)
        w1 = rng.uniform(size=(hidden, 2 * d_e), low=-lim1, high=lim1)
        b1 = rng.uniform(size=hidden, low=-lim1, high=lim1)
        lim2 = 1.0 / np.sqrt(hidden)
        w2 = rng.uniform(size=hidden, low=-lim2, high=lim2)
        b2 = float(rng.uniform(low=-lim2, high=lim2))
        return cls(w_a=w_a, b_a=b_a, w1=w1, b1=b1, w2=w2, b2=b2)

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.w_a.ravel(), self.b_a, self.w1.ravel(), self.b1, self.w2, [self.b2]]
        )

    @classmethod
    def unflatten(cls, vec: np.ndarray, d_e: int, hidden: int) -> "ModelParams":
        sizes = [d_e * d_e, d_e, hidden * 2 * d_e, hidden, hidden, 1]
        if vec.shape != (sum(sizes),):
            raise InvalidArgumentError(
                f"ModelParams.unflatten: expected {sum(sizes)} entries, got {vec.shape}"
            )
        parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(
            w_a=parts[0].reshape(d_e, d_e).copy(),
            b_a=parts[1].copy(),
            w1=parts[2].reshape(hidden, 2 * d_e).copy(),
            b1=parts[3].copy(),
            w2=parts[4].copy(),
            b2=float(parts[5][0]),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.unflatten(self.flatten(), self.d_e, self.hidden)

    def to_bytes(self, seed: int | None = None) -> bytes:
        """Newline-terminated JSON shape header followed by the flat vector,
        little-endian float64."""
        header = {
            "layout_version": PARAMS_LAYOUT_VERSION,
            "d_e": self.d_e,
            "hidden": self.hidden,
            "n_params": self.n_params,
            "seed": seed,
        }
        payload = self.flatten().astype("<f8").tobytes()
        return json.dumps(header, sort_keys=True).encode() + b"\n" + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        nl = blob.index(b"\n")
        header = json.loads(blob[:nl].decode())
        if header.get("layout_version") != PARAMS_LAYOUT_VERSION:
            raise InvalidArgumentError(f"unsupported params layout {header.get('layout_version')}")
        vec = np.frombuffer(blob[nl + 1 :], dtype="<f8").astype(np.float64)
        if vec.shape[0] != header["n_params"]:
            raise InvalidArgumentError("params payload length does not match header")
        return cls.unflatten(vec, header["d_e"], header["hidden"])

    def save(self, path, seed: int | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(seed=seed))

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class LossWeights:
    """Mixing weights for the four loss terms.

    ``alpha`` weights the per-attribute relevance-equalization terms and
    ``beta`` the per-attribute score-gap terms; each sums to one over the
    attribute list.  ``gf_notion`` picks the score-gap shape: "dp" compares
    group mean scores, "eo" the worst per-label group mean-score gap.
    """

    alpha: np.ndarray
    beta: np.ndarray
    lambda_con: float = 0.5
    lambda_lf: float = 1.0
    lambda_gf: float = 1.0
    gf_notion: str = "dp"

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        for name, w in (("alpha", self.alpha), ("beta", self.beta)):
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise InvalidArgumentError(f"LossWeights: {name} must be nonnegative and sum to 1")
        if min(self.lambda_con, self.lambda_lf, self.lambda_gf) < 0:
            raise InvalidArgumentError("LossWeights: lambdas must be nonnegative")
        if self.gf_notion not in ("dp", "eo"):
            raise InvalidArgumentError(f"LossWeights: unknown gf_notion {self.gf_notion!r}")

    @classmethod
    def uniform(cls, n_attrs: int, **kw) -> "LossWeights":
        w = np.full(n_attrs, 1.0 / n_attrs)
        return cls(alpha=w.copy(), beta=w.copy(), **kw)


@dataclass
class LossBreakdown:
    total: float
    sup: float
    con: float
    lf: float
    gf: float
    lf_per_attr: dict[str, float] = field(default_factory=dict)
    gf_per_attr: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "sup": self.sup,
            "con": self.con,
            "lf": self.lf,
            "gf": self.gf,
            "lf_per_attr": dict(self.lf_per_attr),
            "gf_per_attr": dict(self.gf_per_attr),
        }


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def encode_visual(params: ModelParams, bank: EncoderBank, x: np.ndarray) -> np.ndarray:
    """Adapted visual vector for one input: w_a (E x) + b_a."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (bank.d_x,):
        raise InvalidArgumentError(f"encode_visual: expected ({bank.d_x},), got {x.shape}")
    return params.w_a @ (bank.encoder @ x) + params.b_a


def _encode_batch(params: ModelParams, bank: EncoderBank, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = x @ bank.encoder.T
    return e, e @ params.w_a.T + params.b_a


def group_relevance(z: np.ndarray, bank: EncoderBank, attribute: str) -> np.ndarray:
    """Softmax over group embeddings of cos(z, t_g) / tau."""
    if attribute not in bank.group_embeds:
        raise InvalidArgumentError(f"group_relevance: unknown attribute {attribute!r}")
    embeds = bank.group_embeds[attribute]
    sims = np.array([cosine(z, t) for t in embeds])
    return softmax(sims, temperature=bank.tau)


def classify(params: ModelParams, bank: EncoderBank, z: np.ndarray) -> tuple[np.ndarray, float]:
    """Logits over classes and the positive-class probability for one vector.

    Each class embedding is concatenated with z and scored by the same
    two-layer head; ties predict class 0 (argmax picks the first maximum).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.d_e,):
        raise InvalidArgumentError(f"classify: expected ({params.d_e},), got {z.shape}")
    logits = np.empty(2)
    for y in (0, 1):
        u = np.concatenate([z, bank.class_embeds[y]])
        hidden = np.maximum(params.w1 @ u + params.b1, 0.0)
        logits[y] = params.w2 @ hidden + params.b2
    return logits, float(softmax(logits)[1])


def contrastive_loss(z_batch: np.ndarray, bank: EncoderBank, y_true: np.ndarray) -> float:
    """Batch mean of 1 - cos(z_i, class embedding of the true label)."""
    vals = [1.0 - cosine(z, bank.class_embeds[int(y)]) for z, y in zip(np.atleast_2d(z_batch), y_true)]
    return float(np.mean(vals))


def local_fairness_reg(
    z_batch: np.ndarray, bank: EncoderBank, weights: LossWeights
) -> tuple[float, dict[str, float]]:
    """Mean KL from each sample's group-relevance vector to uniform, combined
    across attributes by the alpha weights."""
    z_batch = np.atleast_2d(z_batch)
    per_attr: dict[str, float] = {}
    uniform = np.array([0.5, 0.5])
    for attr in bank.attributes:
        kls = [kl_div(group_relevance(z, bank, attr), uniform) for z in z_batch]
        per_attr[attr] = float(np.mean(kls))
    total = float(sum(a * per_attr[attr] for a, attr in zip(weights.alpha, bank.attributes)))
    return total, per_attr


def soft_global_fairness_reg(
    scores: np.ndarray,
    y_true: np.ndarray,
    attributes: dict[str, np.ndarray],
    weights: LossWeights,
) -> tuple[float, dict[str, float]]:
    """Differentiable score-gap penalty; empty groups or cells contribute a
    zero gap inside a mini-batch (evaluation metrics stay strict)."""
    scores = np.asarray(scores, dtype=np.float64)
    per_attr: dict[str, float] = {}
    for attr, col in attributes.items():
        per_attr[attr] = _soft_gap(scores, y_true, np.asarray(col), weights.gf_notion)[0]
    total = float(sum(b * per_attr[a] for b, a in zip(weights.beta, attributes)))
    return total, per_attr


def _soft_gap(scores, y_true, col, notion: str) -> tuple[float, np.ndarray]:
    """Gap value and its gradient with respect to the scores."""
    n = scores.shape[0]
    grad = np.zeros(n)
    if notion == "dp":
        g0, g1 = col == 0, col == 1
        if not g0.any() or not g1.any():
            return 0.0, grad
        diff = float(scores[g0].mean() - scores[g1].mean())
        sign = np.sign(diff)
        grad[g0] += sign / g0.sum()
        grad[g1] -= sign / g1.sum()
        return abs(diff), grad

    gaps, grads = [], []
    for y in (0, 1):
        c0 = (col == 0) & (y_true == y)
        c1 = (col == 1) & (y_true == y)
        if not c0.any() or not c1.any():
            gaps.append(0.0)
            grads.append(np.zeros(n))
            continue
        diff = float(scores[c0].mean() - scores[c1].mean())
        g = np.zeros(n)
        sign = np.sign(diff)
        g[c0] += sign / c0.sum()
        g[c1] -= sign / c1.sum()
        gaps.append(abs(diff))
        grads.append(g)
    if gaps[0] == gaps[1]:
        # exact tie at the max node: loss is still the gap, subgradient is zero
        return gaps[0], grad
    best = int(np.argmax(gaps))
    return gaps[best], grads[best]


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    attributes: dict[str, np.ndarray]

    @property
    def n(self) -> int:
        return int(self.x.shape[0])


def total_loss_and_grads(
    params: ModelParams, bank: EncoderBank, batch: Batch, weights: LossWeights
) -> tuple[LossBreakdown, np.ndarray]:
    """All four loss terms and the gradient over the flattened parameters.

    Backpropagation is hand-derived through the adapter and classifier; the
    encoder and embeddings are frozen.  Absolute-value and max nodes use
    subgradient zero at their kinks, relu uses zero at the origin.
    """
    if batch.n < 1:
        raise InvalidArgumentError("total_loss_and_grads: empty batch")
    if len(weights.alpha) != len(bank.attributes):
        raise InvalidArgumentError("total_loss_and_grads: weights do not match attribute count")
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y, dtype=np.int64)
    n = batch.n
    d_e, h = params.d_e, params.hidden

    # ---- forward -----------------------------------------------------------
    e, z = _encode_batch(params, bank, x)  # (n, d_e) each
    zn = np.linalg.norm(z, axis=1)
    if np.any(zn == 0):
        raise InvalidArgumentError("total_loss_and_grads: zero visual vector")

    pre = np.empty((2, n, h))
    hid = np.empty((2, n, h))
    u_frozen = bank.class_embeds  # (2, d_e)
    logits = np.empty((n, 2))
    for cls in (0, 1):
        pre[cls] = z @ params.w1[:, :d_e].T + u_frozen[cls] @ params.w1[:, d_e:].T + params.b1
        hid[cls] = np.maximum(pre[cls], 0.0)
        logits[:, cls] = hid[cls] @ params.w2 + params.b2

    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    prob = np.exp(logits - lse[:, None])
    l_sup = float(np.mean(lse - logits[np.arange(n), y]))
    s = prob[:, 1]

    t_cls = bank.class_embeds[y]  # (n, d_e)
    cos_cls = np.sum(z * t_cls, axis=1) / zn
    l_con = float(np.mean(1.0 - cos_cls))

    lf_per_attr: dict[str, float] = {}
    lf_cache = {}
    for attr in bank.attributes:
        t_grp = bank.group_embeds[attr]  # (2, d_e)
        cos_grp = (z @ t_grp.T) / zn[:, None]  # (n, 2)
        q = softmax(cos_grp, temperature=bank.tau)
        logq = np.log(q)
        kl = np.sum(q * (logq + np.log(2.0)), axis=1)
        lf_per_attr[attr] = float(np.mean(kl))
        lf_cache[attr] = (t_grp, cos_grp, q, logq)
    l_lf = float(sum(a * lf_per_attr[k] for a, k in zip(weights.alpha, bank.attributes)))

    gf_per_attr: dict[str, float] = {}
    gf_grads = {}
    for attr in bank.attributes:
        gap, ds = _soft_gap(s, y, np.asarray(batch.attributes[attr]), weights.gf_notion)
        gf_per_attr[attr] = gap
        gf_grads[attr] = ds
    l_gf = float(sum(b * gf_per_attr[k] for b, k in zip(weights.beta, bank.attributes)))

    total = l_sup + weights.lambda_con * l_con + weights.lambda_lf * l_lf + weights.lambda_gf * l_gf
    for name, val in (("sup", l_sup), ("con", l_con), ("lf", l_lf), ("gf", l_gf)):
        if not np.isfinite(val):
            raise NumericFailureError(name)

    # ---- backward ----------------------------------------------------------
    dlogits = prob.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    ds_total = np.zeros(n)
    for b_k, attr in zip(weights.beta, bank.attributes):
        if weights.lambda_gf > 0 and b_k > 0:
            ds_total += weights.lambda_gf * b_k * gf_grads[attr]
    sens = s * (1.0 - s)  # d score / d logit_1 = -d score / d logit_0
    dlogits[:, 0] -= ds_total * sens
    dlogits[:, 1] += ds_total * sens

    dw1 = np.zeros_like(params.w1)
    db1 = np.zeros_like(params.b1)
    dw2 = np.zeros_like(params.w2)
    db2 = 0.0
    dz = np.zeros_like(z)
    for cls in (0, 1):
        dlog = dlogits[:, cls]
        dw2 += hid[cls].T @ dlog
        db2 += float(dlog.sum())
        dpre = (dlog[:, None] * params.w2[None, :]) * (pre[cls] > 0)
        dw1[:, :d_e] += dpre.T @ z
        dw1[:, d_e:] += dpre.sum(axis=0)[:, None] * u_frozen[cls][None, :]
        db1 += dpre.sum(axis=0)
        dz += dpre @ params.w1[:, :d_e]

    if weights.lambda_con > 0:
        coef = weights.lambda_con / n
        dz += coef * (cos_cls[:, None] * z / (zn**2)[:, None] - t_cls / zn[:, None])

    if weights.lambda_lf > 0:
        for a_k, attr in zip(weights.alpha, bank.attributes):
            if a_k == 0:
                continue
            t_grp, cos_grp, q, logq = lf_cache[attr]
            dkl_center = logq - np.sum(q * logq, axis=1, keepdims=True)
            dcos = q * dkl_center / bank.tau  # (n, 2)
            coef = weights.lambda_lf * a_k / n
            dz += coef * (dcos @ t_grp) / zn[:, None]
            dz -= coef * np.sum(dcos * cos_grp, axis=1)[:, None] * z / (zn**2)[:, None]

    dw_a = dz.T @ e
    db_a = dz.sum(axis=0)

    grad = np.concatenate([dw_a.ravel(), db_a, dw1.ravel(), db1, dw2, [db2]])
    if not np.all(np.isfinite(grad)):
        raise NumericFailureError("grad")
    breakdown = LossBreakdown(
        total=total,
        sup=l_sup,
        con=l_con,
        lf=l_lf,
        gf=l_gf,
        lf_per_attr=lf_per_attr,
        gf_per_attr=gf_per_attr,
    )
    return breakdown, grad


def predict(
    params: ModelParams, bank: EncoderBank, x: np.ndarray, cosine_only: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard predictions, positive-class scores and logits for a feature matrix.

    ``cosine_only`` is a diagnostic path that scores classes by cosine
    similarity between the adapted vector and the class embeddings instead of
    the fused classifier head.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, z = _encode_batch(params, bank, x)
    if cosine_only:
        zn = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(zn == 0):
            raise InvalidArgumentError("predict: zero visual vector")
        logits = (z / zn) @ bank.class_embeds.T / bank.tau
    else:
        d_e = params.d_e
        logits = np.empty((x.shape[0], 2))
        for cls in (0, 1):
            pre = z @ params.w1[:, :d_e].T + bank.class_embeds[cls] @ params.w1[:, d_e:].T + params.b1
            logits[:, cls] = np.maximum(pre, 0.0) @ params.w2 + params.b2
    m = logits.max(axis=1, keepdims=True)
    prob = np.exp(logits - m)
    prob /= prob.sum(axis=1, keepdims=True)
    y_pred = np.argmax(logits, axis=1).astype(np.int8)
    return y_pred, prob[:, 1], logits
