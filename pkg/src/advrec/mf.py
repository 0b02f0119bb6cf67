"""BPR matrix factorization: parameters, loss and gradients, Adagrad, training, top-K."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from advrec import _binfmt, kernels
from advrec.errors import ConfigurationError, DomainError, TrainingDivergedError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"ADVREC01"
ADAGRAD_EPS = 1e-8


@dataclass(eq=False)
class ModelParams:
    """User embeddings ``P`` (|U| x d) and item embeddings ``Q`` (|I| x d).

    Models are float32, matching the on-disk format; float64 instances are
    accepted everywhere for numerical checks.
    """

    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise DomainError(f"incompatible shapes {self.P.shape} and {self.Q.shape}")
        if self.P.dtype != self.Q.dtype:
            raise DomainError("P and Q must share a dtype")
        self.P = np.ascontiguousarray(self.P)
        self.Q = np.ascontiguousarray(self.Q)

    @property
    def num_users(self):
        return self.P.shape[0]

    @property
    def num_items(self):
        return self.Q.shape[0]

    @property
    def d(self):
        return self.P.shape[1]

    @property
    def dtype(self):
        return self.P.dtype

    def copy(self):
        return ModelParams(self.P.copy(), self.Q.copy())

    def astype(self, dtype):
        return ModelParams(self.P.astype(dtype), self.Q.astype(dtype))

    def is_finite(self):
        return bool(np.isfinite(self.P).all() and np.isfinite(self.Q).all())

    def checksum(self):
        return _binfmt.checksum64(self.P.tobytes() + self.Q.tobytes())

    def equals(self, other):
        return (self.P.dtype == other.P.dtype and np.array_equal(self.P, other.P)
                and np.array_equal(self.Q, other.Q))


class Triples(NamedTuple):
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)

    def take(self, sl):
        return Triples(self.users[sl], self.pos[sl], self.neg[sl])


@dataclass
class Gradients:
    """Dense gradient matrices plus the rows any triple touched."""

    P: np.ndarray
    Q: np.ndarray
    user_rows: np.ndarray
    item_rows: np.ndarray


@dataclass
class AdagradState:
    accum_P: np.ndarray
    accum_Q: np.ndarray
    lr: float = 0.05
    eps_stability: float = ADAGRAD_EPS

    @classmethod
    def zeros_like(cls, params, lr=0.05, eps_stability=ADAGRAD_EPS):
        return cls(np.zeros_like(params.P), np.zeros_like(params.Q), lr, eps_stability)

    def copy(self):
        return AdagradState(self.accum_P.copy(), self.accum_Q.copy(), self.lr, self.eps_stability)


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 512
    lr: float = 0.05
    d: int = 64
    seed: int = 0
    checkpoint_epochs: tuple = (1000,)
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.d < 1:
            raise ConfigurationError("embedding dimension must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.l2_reg < 0:
            raise ConfigurationError("l2_reg must be >= 0")
        self.checkpoint_epochs = tuple(sorted(set(int(e) for e in self.checkpoint_epochs)))


@dataclass
class TrainResult:
    params: ModelParams
    checkpoints: dict = field(default_factory=dict)
    epoch_losses: list = field(default_factory=list)
    state: AdagradState | None = None


def init_params(num_users, num_items, d, seed, std=0.01) -> ModelParams:
    if d < 1:
        raise ConfigurationError("embedding dimension must be >= 1")
    if num_users < 1 or num_items < 1:
        raise ConfigurationError("need at least one user and one item")
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, std, size=(num_users, d)).astype(np.float32)
    Q = rng.normal(0.0, std, size=(num_items, d)).astype(np.float32)
    return ModelParams(P, Q)


def score(params: ModelParams, u, i) -> float:
    if not (0 <= u < params.num_users and 0 <= i < params.num_items):
        raise DomainError(f"index out of range: user {u}, item {i}")
    return float(np.dot(params.P[u].astype(np.float64), params.Q[i].astype(np.float64)))


def _as_triples(triples):
    if isinstance(triples, Triples):
        return triples
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return Triples(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


def bpr_loss(params: ModelParams, triples, l2_reg=0.0) -> float:
    """Summed ``-ln sigmoid(x_uij)`` plus ``l2_reg`` times the squared norms of involved rows."""
    t = _as_triples(triples)
    if len(t) == 0:
        raise DomainError("bpr_loss needs at least one triple")
    pu = params.P[t.users].astype(np.float64)
    qi = params.Q[t.pos].astype(np.float64)
    qj = params.Q[t.neg].astype(np.float64)
    x = np.einsum("nk,nk->n", pu, qi - qj)
    loss = float(np.logaddexp(0.0, -x).sum())
    if l2_reg:
        loss += l2_reg * float((pu * pu).sum() + (qi * qi).sum() + (qj * qj).sum())
    return loss


def bpr_gradients(params: ModelParams, triples, l2_reg=0.0, backend=None) -> Gradients:
    t = _as_triples(triples)
    if len(t) == 0:
        raise DomainError("bpr_gradients needs at least one triple")
    gP = np.zeros_like(params.P)
    gQ = np.zeros_like(params.Q)
    kernels.bpr_accumulate(params.P, params.Q, t.users, t.pos, t.neg, l2_reg, gP, gQ,
                           backend=backend)
    return Gradients(gP, gQ, np.unique(t.users), np.unique(np.concatenate([t.pos, t.neg])))


def adagrad_step(params: ModelParams, state: AdagradState, grads: Gradients):
    """One Adagrad update on the touched rows; returns new ``(params, state)``."""
    if grads.P.shape != params.P.shape or grads.Q.shape != params.Q.shape:
        raise DomainError("gradient shape does not match parameters")
    new, st = params.copy(), state.copy()
    kernels.adagrad_rows(new.P, st.accum_P, grads.P[grads.user_rows], grads.user_rows,
                         st.lr, st.eps_stability)
    kernels.adagrad_rows(new.Q, st.accum_Q, grads.Q[grads.item_rows], grads.item_rows,
                         st.lr, st.eps_stability)
    return new, st


def _negatives(train, users, rng):
    neg = rng.integers(train.num_items, size=len(users))
    bad = np.flatnonzero(train.contains(users, neg))
    while len(bad):
        neg[bad] = rng.integers(train.num_items, size=len(bad))
        bad = bad[train.contains(users[bad], neg[bad])]
    return neg


def sample_triples(train, count, seed) -> Triples:
    """Uniform user, uniform positive, rejection-sampled negative.

    ``seed`` may be an int or a ``numpy.random.Generator``. Users whose
    positives cover the whole catalog are never drawn.
    """
    rng = np.random.default_rng(seed)
    deg = train.user_degrees
    eligible = np.flatnonzero((deg >= 1) & (deg < train.num_items))
    if len(eligible) == 0:
        raise DomainError("no user can produce a negative item")
    users = eligible[rng.integers(len(eligible), size=count)]
    offs = np.floor(rng.random(count) * deg[users]).astype(np.int64)
    pos = train.indices[train.indptr[users] + offs]
    return Triples(users, pos, _negatives(train, users, rng))


def all_triples(train, seed) -> Triples:
    """One triple per observed interaction, each with a seeded negative."""
    rng = np.random.default_rng(seed)
    users, pos, _ = train.pairs()
    ok = train.user_degrees[users] < train.num_items
    users, pos = users[ok], pos[ok]
    return Triples(users.copy(), pos.copy(), _negatives(train, users, rng))


def compact(triples: Triples):
    """Re-index a batch onto its unique rows: ``(user_rows, item_rows, local triples)``."""
    n = len(triples)
    urows, ul = np.unique(triples.users, return_inverse=True)
    irows, il = np.unique(np.concatenate([triples.pos, triples.neg]), return_inverse=True)
    il = il.ravel()
    return urows, irows, Triples(ul.ravel(), il[:n], il[n:])


def bpr_batch_gradient(Pb, Qb, local: Triples, l2_reg=0.0):
    """Loss and compact gradient for a batch already re-indexed by :func:`compact`."""
    gP = np.zeros_like(Pb)
    gQ = np.zeros_like(Qb)
    loss = kernels.bpr_accumulate(Pb, Qb, local.users, local.pos, local.neg, l2_reg, gP, gQ)
    return loss, gP, gQ


def run_epochs(train, params, config: TrainConfig, batch_grad, first_epoch=1,
               state=None, rng=None, checkpoint_epochs=(), on_epoch=None):
    """Shared mini-batch Adagrad loop; mutates ``params`` in place.

    ``on_epoch(epoch, mean_loss, params)`` is called after every epoch with the live parameters.

    ``batch_grad(Pb, Qb, local_triples)`` returns ``(loss, gP, gQ)`` for the
    compacted rows. Returns ``(state, checkpoints, epoch_losses)``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    state = AdagradState.zeros_like(params, config.lr) if state is None else state
    n = train.num_interactions
    nbatches = math.ceil(n / config.batch_size)
    checkpoints, losses = {}, []
    last = first_epoch + config.epochs - 1
    for epoch in range(first_epoch, last + 1):
        triples = sample_triples(train, n, rng)
        total = 0.0
        for b in range(nbatches):
            batch = triples.take(slice(b * config.batch_size, (b + 1) * config.batch_size))
            urows, irows, local = compact(batch)
            loss, gP, gQ = batch_grad(params.P[urows], params.Q[irows], local)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b)
            kernels.adagrad_rows(params.P, state.accum_P, gP, urows, state.lr, state.eps_stability)
            kernels.adagrad_rows(params.Q, state.accum_Q, gQ, irows, state.lr, state.eps_stability)
            total += loss
        losses.append(total / n)
        if epoch in checkpoint_epochs:
            checkpoints[epoch] = params.copy()
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], params)
        if epoch % 100 == 0 or epoch == last:
            logger.info("epoch %d: mean loss %.6f", epoch, losses[-1])
        else:
            logger.debug("epoch %d: mean loss %.6f", epoch, losses[-1])
    if not params.is_finite():
        raise TrainingDivergedError(last, nbatches - 1, "non-finite parameters")
    return state, checkpoints, losses


def train_bpr(train, config: TrainConfig, init: ModelParams | None = None, on_epoch=None) -> TrainResult:
    """Train BPR-MF with mini-batch Adagrad.

    An epoch draws one triple per training interaction. When ``init`` is
    given training continues from it with a fresh optimizer state.
    """
    if train.num_interactions == 0:
        raise DomainError("cannot train on an empty dataset")
    init_seed, sample_seed = np.random.SeedSequence(config.seed).spawn(2)
    if init is None:
        params = init_params(train.num_users, train.num_items, config.d, init_seed)
    else:
        if init.num_users != train.num_users or init.num_items != train.num_items:
            raise DomainError("initial parameters do not match the dataset")
        params = init.copy()

    def grad(Pb, Qb, local):
        return bpr_batch_gradient(Pb, Qb, local, config.l2_reg)

    state, checkpoints, losses = run_epochs(
        train, params, config, grad, rng=np.random.default_rng(sample_seed),
        checkpoint_epochs=config.checkpoint_epochs, on_epoch=on_epoch,
    )
    return TrainResult(params, checkpoints, losses, state)


# --- ranking ----------------------------------------------------------------

@dataclass
class Recommendation:
    items: np.ndarray
    scores: np.ndarray
    short: bool = False


def _rank_rows(scores, excluded, K):
    """Top-K per row, descending score, ties by ascending item index."""
    s = np.where(excluded, -np.inf, scores)
    order = np.argsort(-s, axis=1, kind="stable")[:, :K]
    return order, np.take_along_axis(s, order, axis=1)


def recommend_topk(params: ModelParams, u, K, exclusions=()) -> Recommendation:
    if K < 1:
        raise DomainError("K must be >= 1")
    if not 0 <= u < params.num_users:
        raise DomainError(f"user {u} out of range")
    scores = params.Q.astype(np.float64) @ params.P[u].astype(np.float64)
    excluded = np.zeros(params.num_items, dtype=bool)
    excluded[np.asarray(list(exclusions), dtype=np.int64)] = True
    order, top = _rank_rows(scores[None, :], excluded[None, :], K)
    n = min(K, params.num_items - int(excluded.sum()))
    return Recommendation(order[0, :n], top[0, :n], short=n < K)


def topk_slates(params: ModelParams, train, users, K, chunk=1024):
    """Top-K lists for ``users``, excluding each user's training items.

    Returns ``{user: item array}``; lists are shorter than K only when the
    user has fewer than K unseen items.
    """
    users = np.asarray(users, dtype=np.int64)
    Q = params.Q.astype(np.float64)
    out = {}
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        scores = params.P[block].astype(np.float64) @ Q.T
        excluded = np.zeros(scores.shape, dtype=bool)
        for r, u in enumerate(block):
            excluded[r, train.user_items(u)] = True
        order, _ = _rank_rows(scores, excluded, K)
        avail = params.num_items - excluded.sum(axis=1)
        for r, u in enumerate(block):
            out[int(u)] = order[r, : min(K, avail[r])]
    return out


def random_recommender(num_items, u, K, exclusions=(), seed=0) -> Recommendation:
    if K < 1:
        raise DomainError("K must be >= 1")
    rng = np.random.default_rng([seed, u])
    candidates = np.setdiff1d(np.arange(num_items), np.asarray(list(exclusions), dtype=np.int64))
    items = rng.permutation(candidates)[:K]
    return Recommendation(items, np.zeros(len(items)), short=len(items) < K)


def random_slates(train, users, K, seed=0):
    return {
        int(u): random_recommender(train.num_items, int(u), K, train.user_items(u), seed).items
        for u in users
    }


# --- persistence -------------------------------------------------------------

def save_params(params: ModelParams, path):
    with open(path, "wb") as fh:
        fh.write(_binfmt.pack(MODEL_MAGIC, params.P, params.Q))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        P, Q, _ = _binfmt.unpack(MODEL_MAGIC, fh.read())
    return ModelParams(P, Q)
