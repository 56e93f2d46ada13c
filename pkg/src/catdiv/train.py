"""Losses, analytic gradients, Adam and the training loop.

Per sample the loss is sampled-softmax cross entropy over the target and its
negatives plus ``lam`` times a margin triplet loss against interacted
neighbor categories, ordered by interaction count. The batch loss is the
mean over samples.

Batches are padded: histories to ``max_history`` with padded keys masked out
of attention and padded rows left out of the sum-pool, candidate slots to a
fixed width with padded slots carrying zero loss. Padding therefore changes
neither the loss nor any gradient.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import TrainingDiverged
from .model import EMBEDDINGS, ModelParams
from .samples import TrainingSample, crossing_tokens

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 0.001
    n_neg: int = 500
    n_nei: int = 5
    margin: float = 0.4
    lam: float = 1.0
    max_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # "penalize" follows sign(0) = -1; "skip" drops tied neighbors
    triplet_ties: str = "penalize"
    # add log(pool / n_neg) to negative logits, the correction for uniform sampling
    logq_correction: bool = False

    def __post_init__(self):
        if self.margin < 0 or self.lam < 0:
            raise ValueError("margin and lam must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.triplet_ties not in ("penalize", "skip"):
            raise ValueError("triplet_ties must be 'penalize' or 'skip'")


# -- scalar losses -------------------------------------------------------------

def sampled_ce_loss(target_score: float, negative_scores, negative_offset: float = 0.0) -> float:
    """-log softmax of the target among itself and its negatives.

    ``negative_offset`` is added to every negative logit (0 for the plain form).
    """
    neg = np.asarray(negative_scores, dtype=np.float64) + negative_offset
    if neg.size < 1:
        raise ValueError("need at least one negative score")
    logits = np.concatenate([[target_score], neg])
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged("non-finite score in cross entropy")
    mx = logits.max()
    # (mx - target) first: exact when the target holds the largest logit
    return float(np.log(np.exp(logits - mx).sum()) + (mx - target_score))


def logq_offsets(n_neg, n_categories: int) -> np.ndarray:
    """log(pool / n) per row, with the pool taken as every category but the target."""
    n = np.maximum(np.asarray(n_neg, dtype=np.float64), 1.0)
    return np.log(max(n_categories - 1, 1) / n)


def triplet_sign(diff) -> np.ndarray:
    """1 where diff > 0, otherwise -1 (ties included)."""
    return np.where(np.asarray(diff) > 0, 1.0, -1.0)


def triplet_loss(target_score: float, neighbor_scores, target_count: int,
                 neighbor_counts, margin: float) -> float:
    f = np.asarray(neighbor_scores, dtype=np.float64)
    if f.size == 0:
        return 0.0
    sign = triplet_sign(target_count - np.asarray(neighbor_counts))
    return float(np.maximum(sign * (f - target_score) + margin, 0.0).mean())


def combined_loss(ce: float, triplet: float, lam: float) -> float:
    return ce + lam * triplet


# -- batches -------------------------------------------------------------------

@dataclass
class EncodedSamples:
    """Index arrays for a set of training samples.

    Candidate slot 0 is the target, the next ``n_neg_slots`` are negatives,
    the rest neighbors.
    """

    hist: np.ndarray        # (N, T) item rows
    hmask: np.ndarray       # (N, T)
    prof: np.ndarray        # (N,)
    cand: np.ndarray        # (N, J) category rows
    cmask: np.ndarray       # (N, J)
    ctok: np.ndarray        # (N, J, 2) crossing token rows
    count_diff: np.ndarray  # (N, n_nei_slots) s_uc_t - s_uc_j
    n_neg_slots: int

    def __len__(self) -> int:
        return len(self.hist)

    def take(self, idx) -> "EncodedSamples":
        return EncodedSamples(
            self.hist[idx], self.hmask[idx], self.prof[idx], self.cand[idx],
            self.cmask[idx], self.ctok[idx], self.count_diff[idx], self.n_neg_slots,
        )


def encode_samples(samples: list[TrainingSample], params: ModelParams) -> EncodedSamples:
    T = params.hparams.max_history
    n = len(samples)
    n_neg = max((len(s.negatives) for s in samples), default=0)
    n_nei = max((len(s.neighbors) for s in samples), default=0)
    J = 1 + n_neg + n_nei
    hist = np.zeros((n, T), dtype=np.int64)
    hmask = np.zeros((n, T), dtype=bool)
    prof = np.zeros(n, dtype=np.int64)
    cand = np.zeros((n, J), dtype=np.int64)
    cmask = np.zeros((n, J), dtype=bool)
    ctok = np.zeros((n, J, 2), dtype=np.int64)
    count_diff = np.zeros((n, n_nei), dtype=np.int64)
    for i, s in enumerate(samples):
        h = np.asarray(s.history)[-T:]
        hist[i, :len(h)] = params.item_rows(h)
        hmask[i, :len(h)] = True
        prof[i] = s.profile
        nei = np.array([c for c, _ in s.neighbors], dtype=np.int64)
        cats = np.concatenate([[s.target_category], s.negatives])
        slots = np.concatenate([np.arange(1 + len(s.negatives)), 1 + n_neg + np.arange(len(nei))])
        all_cats = np.concatenate([cats, nei])
        rows = params.category_rows(all_cats)
        # padded slots point at the target so they touch no new rows
        cand[i] = rows[0]
        cand[i, slots] = rows
        cmask[i, slots] = True
        ctok[i, slots] = crossing_tokens(s.context, all_cats)
        ctok[i, ~cmask[i]] = ctok[i, 0]
        count_diff[i, :len(nei)] = s.target_count - np.array([k for _, k in s.neighbors], dtype=np.int64)
    return EncodedSamples(hist, hmask, prof, cand, cmask, ctok, count_diff, n_neg)


@dataclass
class GradientSet:
    """Dense gradients per tensor; embedding tables as (rows, values)."""

    dense: dict[str, np.ndarray] = field(default_factory=dict)
    sparse: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def full(self, name: str, shape) -> np.ndarray:
        if name in self.dense:
            return self.dense[name]
        out = np.zeros(shape)
        rows, vals = self.sparse[name]
        out[rows] = vals
        return out

    def items(self):
        yield from self.dense.items()
        for name, (rows, vals) in self.sparse.items():
            yield name, vals


def _sparse_rows(rows: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inv = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq),) + grads.shape[1:])
    np.add.at(out, inv.ravel(), grads)
    return uniq, out


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class BatchLoss:
    loss: float
    ce: np.ndarray       # per sample
    triplet: np.ndarray  # per sample
    grads: GradientSet | None = None


def batch_loss(params: ModelParams, batch: EncodedSamples, config: TrainConfig,
               with_grads: bool = True) -> BatchLoss:
    """Mean loss over the batch and, optionally, its exact gradients.

    Subgradients at ReLU and hinge kinks are taken as 0.
    """
    P = params.tensors
    hp = params.hparams
    B, T = batch.hist.shape
    H, dh, dc = hp.n_heads, hp.d_head, hp.d_cross
    hm = batch.hmask

    # user tower
    E = P["item_emb"][batch.hist]
    Q = E[:, None] @ P["mhsa.wq"][None]
    K = E[:, None] @ P["mhsa.wk"][None]
    V = E[:, None] @ P["mhsa.wv"][None]
    S = (Q @ K.swapaxes(-1, -2)) / math.sqrt(dh)
    S = np.where(hm[:, None, None, :], S, -np.inf)
    A = np.exp(S - S.max(axis=-1, keepdims=True))
    A /= A.sum(axis=-1, keepdims=True)
    O = A @ V
    Oc = O.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
    Es = Oc @ P["mhsa.wo"]
    pooled = (Es * hm[..., None]).sum(axis=1)
    x = np.concatenate([P["prof_emb"][batch.prof], pooled], axis=1)
    z1 = x @ P["user.w1"] + P["user.b1"]
    h1 = _relu(z1)
    z2 = h1 @ P["user.w2"] + P["user.b2"]
    eu = _relu(z2)

    # category tower over the distinct categories in the batch
    uniq, inv = np.unique(batch.cand, return_inverse=True)
    inv = inv.reshape(batch.cand.shape)
    ec = P["cat_emb"][uniq]
    z3 = ec @ P["cat.w3"] + P["cat.b3"]
    h3 = _relu(z3)
    z4 = h3 @ P["cat.w4"] + P["cat.b4"]
    ecp = _relu(z4)
    G = ecp[inv]

    dot = (G * eu[:, None, :]).sum(axis=-1)
    eF = P["cross_emb"][batch.ctok[..., 0]] + P["cross_emb"][batch.ctok[..., 1]]
    w = P["wide.w"]
    f = (eF * w[:dc]).sum(axis=-1) + w[dc] * dot + P["wide.b"][0]

    # sampled softmax over target + negatives
    neg = slice(1, 1 + batch.n_neg_slots)
    nei = slice(1 + batch.n_neg_slots, f.shape[1])
    ft = f[:, 0]
    neg_logits = f[:, neg]
    if config.logq_correction:
        neg_logits = neg_logits + logq_offsets(batch.cmask[:, neg].sum(axis=1), len(params.category_vocab))[:, None]
    logits = np.concatenate([ft[:, None], np.where(batch.cmask[:, neg], neg_logits, -np.inf)], axis=1)
    mx = logits.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(logits - mx).sum(axis=1))
    lse = mx[:, 0] + log_sum
    ce = log_sum + (mx[:, 0] - ft)

    # triplet over neighbors
    nei_mask = batch.cmask[:, nei]
    if config.triplet_ties == "skip":
        nei_mask = nei_mask & (batch.count_diff != 0)
    sign = triplet_sign(batch.count_diff)
    z = sign * (f[:, nei] - ft[:, None]) + config.margin
    active = (z > 0) & nei_mask
    n_nei = nei_mask.sum(axis=1)
    denom = np.maximum(n_nei, 1)
    trip = np.where(active, z, 0.0).sum(axis=1) / denom

    loss = float(np.mean(ce + config.lam * trip))
    if not with_grads:
        return BatchLoss(loss, ce, trip)
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite loss")

    # dL/df
    prob = np.exp(logits - lse[:, None])
    df = np.zeros_like(f)
    df[:, 0] = prob[:, 0] - 1.0
    df[:, neg] = prob[:, 1:]
    coef = config.lam * np.where(active, sign, 0.0) / denom[:, None]
    df[:, nei] += coef
    df[:, 0] -= coef.sum(axis=1)
    df *= batch.cmask
    df /= B

    g = GradientSet()
    g.dense["wide.b"] = np.array([df.sum()])
    gw = np.empty_like(w)
    gw[:dc] = np.einsum("bj,bjk->k", df, eF)
    gw[dc] = (df * dot).sum()
    g.dense["wide.w"] = gw
    deF = df[..., None] * w[:dc]
    tok = batch.ctok[batch.cmask]
    g.sparse["cross_emb"] = _sparse_rows(
        np.concatenate([tok[:, 0], tok[:, 1]]),
        np.concatenate([deF[batch.cmask], deF[batch.cmask]]),
    )
    ddot = df * w[dc]
    deu = (ddot[..., None] * G).sum(axis=1)
    dG = ddot[..., None] * eu[:, None, :]

    # category tower
    decp = np.zeros_like(ecp)
    np.add.at(decp, inv.ravel(), dG.reshape(-1, dG.shape[-1]))
    dz4 = decp * (z4 > 0)
    g.dense["cat.w4"] = h3.T @ dz4
    g.dense["cat.b4"] = dz4.sum(axis=0)
    dz3 = (dz4 @ P["cat.w4"].T) * (z3 > 0)
    g.dense["cat.w3"] = ec.T @ dz3
    g.dense["cat.b3"] = dz3.sum(axis=0)
    g.sparse["cat_emb"] = (uniq, dz3 @ P["cat.w3"].T)

    # user tower
    dz2 = deu * (z2 > 0)
    g.dense["user.w2"] = h1.T @ dz2
    g.dense["user.b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ P["user.w2"].T) * (z1 > 0)
    g.dense["user.w1"] = x.T @ dz1
    g.dense["user.b1"] = dz1.sum(axis=0)
    dx = dz1 @ P["user.w1"].T
    dp = hp.d_prof
    g.sparse["prof_emb"] = _sparse_rows(batch.prof, dx[:, :dp])
    dEs = dx[:, None, dp:] * hm[..., None]
    g.dense["mhsa.wo"] = Oc.reshape(-1, H * dh).T @ dEs.reshape(-1, dEs.shape[-1])
    dO = (dEs @ P["mhsa.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    dA = dO @ V.swapaxes(-1, -2)
    dV = A.swapaxes(-1, -2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dQ = dS @ K
    dK = dS.swapaxes(-1, -2) @ Q
    dE = np.zeros_like(E)
    for name, d in (("mhsa.wq", dQ), ("mhsa.wk", dK), ("mhsa.wv", dV)):
        g.dense[name] = np.einsum("btd,bhte->hde", E, d)
        dE += np.einsum("bhte,hde->btd", d, P[name])
    g.sparse["item_emb"] = _sparse_rows(batch.hist[hm], dE[hm])

    for name, val in g.items():
        if not np.all(np.isfinite(val)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
    return BatchLoss(loss, ce, trip, g)


def backward(batch: EncodedSamples, params: ModelParams, config: TrainConfig) -> tuple[float, GradientSet]:
    out = batch_loss(params, batch, config)
    return out.loss, out.grads


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Embedding tables are updated lazily: only rows with a gradient in this
    batch get their moments and values touched.
    """
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    step = config.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, grad in grads.dense.items():
        p = params.tensors[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        p -= step * (m / c1) / (np.sqrt(v / c2) + config.eps)
    for name, (rows, grad) in grads.sparse.items():
        p = params.tensors[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m[rows] = b1 * m[rows] + (1 - b1) * grad
        v[rows] = b2 * v[rows] + (1 - b2) * grad * grad
        p[rows] -= step * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + config.eps)


# -- loop ----------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    mean_ce: float
    mean_triplet: float
    valid_hr5_u: float | None
    valid_hr5_n: float | None
    valid_hr5: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochMetrics]
    best_epoch: int
    first_batch_loss: float | None = None
    first_batch_ce: float | None = None


def fit(samples: list[TrainingSample], params: ModelParams, config: TrainConfig,
        valid_samples=None, report_path=None, progress=None) -> TrainResult:
    """Train ``params`` (a copy is made) and return the best-validation model.

    Samples are shuffled each epoch from one generator seeded with
    ``config.seed``. Model selection uses pooled validation HR@5; without
    validation samples the last epoch wins.
    """
    from .evaluate import hr_from_ranks, target_ranks

    if not samples:
        raise ValueError("no training samples")
    params = params.copy()
    enc = encode_samples(samples, params)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    best, best_hr, best_epoch = params.copy(), -1.0, 0
    history: list[EpochMetrics] = []
    first_loss = first_ce = None
    if report_path is not None:
        open(report_path, "w").close()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(enc))
        ce_sum = trip_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = enc.take(order[start:start + config.batch_size])
            try:
                out = batch_loss(params, batch, config)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good=best) from exc
            if first_loss is None:
                first_loss, first_ce = out.loss, float(out.ce.mean())
            ce_sum += float(out.ce.sum())
            trip_sum += float(out.triplet.sum())
            adam_step(params, out.grads, state, config)
        hr_u = hr_n = hr_all = None
        if valid_samples:
            ranks = target_ranks(valid_samples, params)
            tasks = np.array([s.task for s in valid_samples])
            hr_u = hr_from_ranks(ranks[tasks == "U"], 5)
            hr_n = hr_from_ranks(ranks[tasks == "N"], 5)
            hr_all = hr_from_ranks(ranks, 5)
        m = EpochMetrics(epoch, ce_sum / len(enc), trip_sum / len(enc), hr_u, hr_n, hr_all)
        history.append(m)
        logger.info("epoch %d: ce=%.5f triplet=%.5f hr5=%s", epoch, m.mean_ce, m.mean_triplet, hr_all)
        if progress is not None:
            progress(m)
        if report_path is not None:
            with open(report_path, "a", encoding="utf-8") as fh:
                fh.write(m.to_json() + "\n")
        score = hr_all if hr_all is not None else float(epoch)
        if score > best_hr:
            best, best_hr, best_epoch = params.copy(), score, epoch
    if config.max_epochs == 0:
        best = params
    return TrainResult(best, history, best_epoch, first_loss, first_ce)
