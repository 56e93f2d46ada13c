"""User-to-category scorer: forward pass, initialization and checkpoints.

Score of a (user, category) pair::

    f(u, c) = w . (e_cross  ++  <e_u, e'_c>) + b

where ``e_u`` comes from multi-head self-attention over the item history,
sum-pooled and fed with the profile embedding through a two-layer ReLU net,
and ``e'_c`` from a two-layer ReLU net over the category embedding.

Inference below works one user at a time. The category tower uses
``np.einsum``, whose rows do not depend on how many categories are evaluated
together, so scoring one category or a thousand gives bitwise equal values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ModelError
from .samples import N_CROSS_TOKENS, N_PROFILE_TOKENS, UserContext, crossing_tokens

OOV_ROW = 0
CHECKPOINT_MAGIC = b"DU2C\x00\x00\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    max_history: int = 20
    d_model: int = 64
    d_cat_in: int = 32
    d_cross: int = 8
    d_prof: int = 8
    n_heads: int = 8
    d_head: int = 8
    d_match: int = 32
    ffn_hidden: int = 64

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError("n_heads * d_head must equal d_model")


def tensor_shapes(hp: HyperParams, n_item_rows: int, n_categories: int) -> dict[str, tuple]:
    """Canonical tensor order and shapes."""
    return {
        "item_emb": (n_item_rows, hp.d_model),
        "cat_emb": (n_categories, hp.d_cat_in),
        "cross_emb": (N_CROSS_TOKENS, hp.d_cross),
        "prof_emb": (N_PROFILE_TOKENS, hp.d_prof),
        "mhsa.wq": (hp.n_heads, hp.d_model, hp.d_head),
        "mhsa.wk": (hp.n_heads, hp.d_model, hp.d_head),
        "mhsa.wv": (hp.n_heads, hp.d_model, hp.d_head),
        "mhsa.wo": (hp.n_heads * hp.d_head, hp.d_model),
        "user.w1": (hp.d_prof + hp.d_model, hp.ffn_hidden),
        "user.b1": (hp.ffn_hidden,),
        "user.w2": (hp.ffn_hidden, hp.d_match),
        "user.b2": (hp.d_match,),
        "cat.w3": (hp.d_cat_in, hp.ffn_hidden),
        "cat.b3": (hp.ffn_hidden,),
        "cat.w4": (hp.ffn_hidden, hp.d_match),
        "cat.b4": (hp.d_match,),
        "wide.w": (hp.d_cross + 1,),
        "wide.b": (1,),
    }


EMBEDDINGS = ("item_emb", "cat_emb", "cross_emb", "prof_emb")
BIASES = ("user.b1", "user.b2", "cat.b3", "cat.b4", "wide.b")


class ModelParams:
    """All learnable tensors plus the id vocabularies they are indexed by.

    Row 0 of ``item_emb`` is shared by items outside ``item_vocab``.
    Categories map one-to-one onto ``cat_emb`` rows in ascending id order.
    """

    def __init__(self, hparams: HyperParams, tensors: dict[str, np.ndarray],
                 item_vocab: np.ndarray, category_vocab: np.ndarray):
        self.hparams = hparams
        self.tensors = tensors
        self.item_vocab = np.asarray(item_vocab, dtype=np.int64)
        self.category_vocab = np.asarray(category_vocab, dtype=np.int64)
        expected = tensor_shapes(hparams, len(self.item_vocab) + 1, len(self.category_vocab))
        for name, shape in expected.items():
            if name not in tensors or tensors[name].shape != shape:
                got = None if name not in tensors else tensors[name].shape
                raise ModelError(f"tensor {name}: expected {shape}, got {got}", code="shape-mismatch")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.hparams,
            {k: v.copy() for k, v in self.tensors.items()},
            self.item_vocab,
            self.category_vocab,
        )

    def item_rows(self, item_ids) -> np.ndarray:
        ids = np.asarray(item_ids, dtype=np.int64)
        if len(self.item_vocab) == 0:
            return np.zeros(ids.shape, dtype=np.int64)
        pos = np.searchsorted(self.item_vocab, ids)
        pos_c = np.minimum(pos, len(self.item_vocab) - 1)
        return np.where(self.item_vocab[pos_c] == ids, pos_c + 1, OOV_ROW)

    def category_rows(self, category_ids) -> np.ndarray:
        ids = np.asarray(category_ids, dtype=np.int64)
        pos = np.searchsorted(self.category_vocab, ids)
        pos_c = np.minimum(pos, max(len(self.category_vocab) - 1, 0))
        if len(self.category_vocab) == 0 or np.any(self.category_vocab[pos_c] != ids):
            raise ModelError("category outside the model vocabulary", code="out-of-range-token")
        return pos_c


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(hparams: HyperParams, item_vocab, category_vocab, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and embeddings, zero biases.

    Per-head projections use (d_model, d_head) as fan-in/fan-out; embedding
    tables use (rows, width); the wide weight vector uses (d_cross + 1, 1).
    """
    rng = np.random.default_rng(seed)
    item_vocab = np.unique(np.asarray(item_vocab, dtype=np.int64))
    category_vocab = np.unique(np.asarray(category_vocab, dtype=np.int64))
    shapes = tensor_shapes(hparams, len(item_vocab) + 1, len(category_vocab))
    tensors = {}
    for name, shape in shapes.items():
        if name in BIASES:
            tensors[name] = np.zeros(shape)
            continue
        if len(shape) == 3:
            fan_in, fan_out = shape[1], shape[2]
        elif len(shape) == 2:
            fan_in, fan_out = shape
        else:
            fan_in, fan_out = shape[0], 1
        a = glorot_bound(fan_in, fan_out)
        tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(hparams, tensors, item_vocab, category_vocab)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mhsa_forward(history_emb: np.ndarray, params: ModelParams, return_attention: bool = False):
    """Unmasked multi-head self-attention over an (L, d_model) history.

    No positional encoding, residual or normalization. With
    ``return_attention`` also returns the (H, L, L) attention weights.
    """
    E = np.asarray(history_emb, dtype=np.float64)
    d_head = params.hparams.d_head
    Q = np.einsum("td,hde->hte", E, params["mhsa.wq"])
    K = np.einsum("td,hde->hte", E, params["mhsa.wk"])
    V = np.einsum("td,hde->hte", E, params["mhsa.wv"])
    A = _softmax(np.einsum("hte,hse->hts", Q, K) / np.sqrt(d_head))
    heads = np.einsum("hts,hse->the", A, V).reshape(E.shape[0], -1)
    out = np.einsum("tk,kd->td", heads, params["mhsa.wo"])
    return (out, A) if return_attention else out


def user_net(attended: np.ndarray, profile_emb: np.ndarray, params: ModelParams) -> np.ndarray:
    x = np.concatenate([profile_emb, attended.sum(axis=0)])
    h = _relu(np.einsum("i,ij->j", x, params["user.w1"]) + params["user.b1"])
    return _relu(np.einsum("i,ij->j", h, params["user.w2"]) + params["user.b2"])


def category_net(category_emb: np.ndarray, params: ModelParams) -> np.ndarray:
    """Works on one embedding (d,) or a stack (n, d)."""
    e = np.atleast_2d(category_emb)
    h = _relu(np.einsum("ni,ij->nj", e, params["cat.w3"]) + params["cat.b3"])
    out = _relu(np.einsum("ni,ij->nj", h, params["cat.w4"]) + params["cat.b4"])
    return out if np.ndim(category_emb) == 2 else out[0]


def category_tower(params: ModelParams) -> np.ndarray:
    """e'_c for every category row; reusable across users."""
    return category_net(params["cat_emb"], params)


def user_embedding(context: UserContext, params: ModelParams) -> np.ndarray:
    if len(context.history) == 0:
        raise ModelError("empty history", code="empty-history")
    if not 0 <= context.profile < params["prof_emb"].shape[0]:
        raise ModelError(f"profile token {context.profile} out of range", code="out-of-range-token")
    hist = np.asarray(context.history)[-params.hparams.max_history:]
    E = params["item_emb"][params.item_rows(hist)]
    return user_net(mhsa_forward(E, params), params["prof_emb"][context.profile], params)


def score_categories(context: UserContext, categories, params: ModelParams,
                     tower: np.ndarray | None = None) -> np.ndarray:
    """Scores of one user against a list of category ids.

    ``tower`` may be a precomputed :func:`category_tower`.
    """
    cats = np.atleast_1d(np.asarray(categories, dtype=np.int64))
    rows = params.category_rows(cats)
    e_u = user_embedding(context, params)
    e_c = tower[rows] if tower is not None else category_net(params["cat_emb"][rows], params)
    tokens = crossing_tokens(context, cats)
    cross = params["cross_emb"][tokens[:, 0]] + params["cross_emb"][tokens[:, 1]]
    w = params["wide.w"]
    d_cross = params.hparams.d_cross
    dot = (e_c * e_u).sum(axis=-1)
    return (cross * w[:d_cross]).sum(axis=-1) + w[d_cross] * dot + params["wide.b"][0]


def score(context: UserContext, category: int, params: ModelParams) -> float:
    return float(score_categories(context, [category], params)[0])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic, manifest length (u64 LE), JSON manifest, float32 blob."""
    shapes = tensor_shapes(params.hparams, len(params.item_vocab) + 1, len(params.category_vocab))
    entries, blobs, offset = [], [], 0
    for name, shape in shapes.items():
        data = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(shape), "dtype": "float32", "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "hparams": asdict(params.hparams),
        "tensors": entries,
        "vocab": {
            "items": params.item_vocab.tolist(),
            "categories": params.category_vocab.tolist(),
        },
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC[:4]:
        raise CheckpointError(f"{path}: not a checkpoint", code="bad-magic")
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: unsupported format", code="version-mismatch")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header", code="size-mismatch")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
        version = manifest["format_version"]
        hparams = HyperParams(**manifest["hparams"])
        entries = manifest["tensors"]
        item_vocab = np.asarray(manifest["vocab"]["items"], dtype=np.int64)
        category_vocab = np.asarray(manifest["vocab"]["categories"], dtype=np.int64)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})", code="manifest-corrupt") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {version} != {CHECKPOINT_VERSION}",
                              code="version-mismatch")
    expected = tensor_shapes(hparams, len(item_vocab) + 1, len(category_vocab))
    if [e["name"] for e in entries] != list(expected):
        raise CheckpointError(f"{path}: unexpected tensor list", code="manifest-corrupt")
    blob = raw[16 + mlen:]
    offset = 0
    tensors = {}
    for e in entries:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointError(
                f"{path}: tensor {e['name']} shape {shape} != {expected[e['name']]}",
                code="shape-mismatch",
            )
        if e["offset"] != offset or e.get("dtype") != "float32":
            raise CheckpointError(f"{path}: bad offset/dtype for {e['name']}", code="manifest-corrupt")
        n = int(np.prod(shape)) * 4
        offset += n
    if offset != len(blob):
        raise CheckpointError(
            f"{path}: size mismatch (manifest {offset} bytes, blob {len(blob)})",
            code="size-mismatch",
        )
    for e in entries:
        shape = tuple(e["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(shape)
    return ModelParams(hparams, tensors, item_vocab, category_vocab)
