"""Adversarial perturbations of embedding parameters and adversarial training.

Perturbations are computed in float64 and stored in the dtype of the
attacked model. Multi-step attacks clip in perturbation space, which is
the same as clipping ``Theta + Delta`` to ``[Theta - eps, Theta + eps]``.
"""
from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass

import numpy as np

from advrec import _binfmt, kernels
from advrec.errors import AttackDivergedError, ConfigurationError, DomainError
from advrec.mf import (
    ModelParams,
    TrainConfig,
    TrainResult,
    Triples,
    all_triples,
    bpr_batch_gradient,
    bpr_loss,
    run_epochs,
    sample_triples,
)

logger = logging.getLogger(__name__)

DELTA_MAGIC = b"ADVDEL01"
STRATEGIES = ("FGSM", "BIM", "PGD")
_DELTA_HEADER = struct.Struct("<IddIq")

# rng streams derived from an attack seed
_INIT_STREAM = 0
_BATCH_STREAM = 1


@dataclass(frozen=True)
class SampledBatch:
    count: int
    seed: int = 0


@dataclass(frozen=True)
class PerturbationConfig:
    """Attack settings.

    ``alpha`` defaults to ``epsilon / 4``. FGSM always runs one step from a
    zero start, BIM starts from zero and PGD from ``Uniform(-eps, eps)``.
    Multi-step attacks ascend one fixed set of triples unless
    ``resample_each_step`` draws fresh negatives at every iteration.
    """

    strategy: str
    epsilon: float = 0.5
    alpha: float | None = None
    iterations: int = 1
    init_mode: str | None = None
    seed: int = 0
    targets: str = "both"
    loss_batch: object = "all"
    normalization: str = "row"
    resample_each_step: bool = False

    def __post_init__(self):
        strategy = str(self.strategy).upper()
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("strategy", strategy)
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.alpha is None:
            set_("alpha", self.epsilon / 4)
        if not self.alpha > 0 or self.alpha > self.epsilon:
            raise ConfigurationError("alpha must lie in (0, epsilon]")
        expected = "uniform" if strategy == "PGD" else "zeros"
        if self.init_mode is None:
            set_("init_mode", expected)
        elif self.init_mode != expected:
            raise ConfigurationError(f"{strategy} requires init_mode={expected!r}")
        if strategy == "FGSM":
            set_("iterations", 1)
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.targets not in ("P", "Q", "both"):
            raise ConfigurationError("targets must be 'P', 'Q' or 'both'")
        if self.normalization not in ("row", "global"):
            raise ConfigurationError("normalization must be 'row' or 'global'")
        if not (self.loss_batch == "all" or isinstance(self.loss_batch, SampledBatch)):
            raise ConfigurationError("loss_batch must be 'all' or a SampledBatch")


@dataclass(frozen=True)
class AprConfig:
    lam: float = 1.0
    epsilon_adv: float = 0.5
    epochs: int = 1000
    warm_start_epoch: int = 1000

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if not self.epsilon_adv > 0:
            raise ConfigurationError("epsilon_adv must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("apr epochs must be >= 1")


@dataclass(eq=False)
class Delta:
    dP: np.ndarray
    dQ: np.ndarray
    epsilon: float
    strategy: str
    alpha: float = 0.0
    iterations_run: int = 1
    seed: int = 0
    degenerate: bool = False

    def max_abs(self):
        return float(max(np.abs(self.dP).max(initial=0.0), np.abs(self.dQ).max(initial=0.0)))

    def row_norms(self):
        return (np.linalg.norm(self.dP.astype(np.float64), axis=1),
                np.linalg.norm(self.dQ.astype(np.float64), axis=1))

    def __neg__(self):
        return dataclasses.replace(self, dP=-self.dP, dQ=-self.dQ)


def batch_triples(train, loss_batch, seed, step) -> Triples:
    """Triples the attacker differentiates through at iteration ``step``."""
    if loss_batch == "all":
        return all_triples(train, [seed, _BATCH_STREAM, step])
    return sample_triples(train, loss_batch.count, [loss_batch.seed, _BATCH_STREAM, step])


def loss_gradient(P, Q, triples, targets="both"):
    """Dense float64 gradient of the summed BPR loss with respect to (P, Q)."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    if len(triples):
        kernels.bpr_accumulate(P, Q, triples.users, triples.pos, triples.neg, 0.0, gP, gQ)
    if targets == "P":
        gQ[:] = 0.0
    elif targets == "Q":
        gP[:] = 0.0
    return gP, gQ


def _row_unit(g):
    norms = np.sqrt(np.einsum("rk,rk->r", g, g))
    out = np.zeros_like(g)
    nz = norms > 0
    out[nz] = g[nz] / norms[nz, None]
    return out


def normalize_gradient(gP, gQ, mode="row"):
    """Unit directions: per embedding row (default) or over the whole of Theta."""
    if mode == "row":
        return _row_unit(gP), _row_unit(gQ)
    total = np.sqrt(np.vdot(gP, gP) + np.vdot(gQ, gQ))
    if total == 0:
        return np.zeros_like(gP), np.zeros_like(gQ)
    return gP / total, gQ / total


def fgsm_delta(params: ModelParams, train, epsilon, loss_batch="all", *, seed=0,
               targets="both", normalization="row", triples=None) -> Delta:
    """Single-step perturbation ``epsilon * Pi / ||Pi||`` with Pi the loss gradient at Theta.

    Rows no triple touches get a zero perturbation. An all-zero gradient
    yields a zero Delta with ``degenerate=True``.
    """
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be > 0")
    if triples is None:
        triples = batch_triples(train, loss_batch, seed, 0)
    gP, gQ = loss_gradient(params.P, params.Q, triples, targets)
    if not (np.isfinite(gP).all() and np.isfinite(gQ).all()):
        raise AttackDivergedError(1)
    degenerate = not (gP.any() or gQ.any())
    if degenerate:
        logger.warning("FGSM: loss gradient is identically zero")
    nP, nQ = normalize_gradient(gP, gQ, normalization)
    return Delta((epsilon * nP).astype(params.dtype), (epsilon * nQ).astype(params.dtype),
                 epsilon=float(epsilon), strategy="FGSM", alpha=float(epsilon),
                 iterations_run=1, seed=seed, degenerate=degenerate)


def apply_delta(params: ModelParams, delta: Delta) -> ModelParams:
    if delta.dP.shape != params.P.shape or delta.dQ.shape != params.Q.shape:
        raise DomainError("delta shape does not match parameters")
    return ModelParams((params.P + delta.dP).astype(params.dtype),
                       (params.Q + delta.dQ).astype(params.dtype))


def clip_to_budget(theta_adv: ModelParams, theta_orig: ModelParams, epsilon) -> ModelParams:
    """Clamp every entry of ``theta_adv`` into ``theta_orig +/- epsilon``."""
    if theta_adv.P.shape != theta_orig.P.shape or theta_adv.Q.shape != theta_orig.Q.shape:
        raise DomainError("shape mismatch")
    return ModelParams(
        np.clip(theta_adv.P, theta_orig.P - epsilon, theta_orig.P + epsilon),
        np.clip(theta_adv.Q, theta_orig.Q - epsilon, theta_orig.Q + epsilon),
    )


def iterate_deltas(params: ModelParams, train, config: PerturbationConfig, init_override=None):
    """Yield the multi-step perturbation after each of ``config.iterations`` steps.

    ``init_override`` replaces the strategy's initialisation (``"zeros"``
    turns PGD into BIM); it exists for tests.
    """
    if config.strategy not in ("BIM", "PGD"):
        raise ConfigurationError("iterative attacks are BIM or PGD")
    eps, alpha = config.epsilon, config.alpha
    P0 = params.P.astype(np.float64)
    Q0 = params.Q.astype(np.float64)
    init = init_override or config.init_mode
    if init == "uniform":
        rng = np.random.default_rng([config.seed, _INIT_STREAM])
        dP = rng.uniform(-eps, eps, size=P0.shape)
        dQ = rng.uniform(-eps, eps, size=Q0.shape)
        if config.targets == "P":
            dQ[:] = 0.0
        elif config.targets == "Q":
            dP[:] = 0.0
    elif init == "zeros":
        dP, dQ = np.zeros_like(P0), np.zeros_like(Q0)
    else:
        raise ConfigurationError(f"unknown init mode {init!r}")

    for step in range(1, config.iterations + 1):
        if step == 1 or config.resample_each_step:
            triples = batch_triples(train, config.loss_batch, config.seed, step - 1)
        gP, gQ = loss_gradient(P0 + dP, Q0 + dQ, triples, config.targets)
        if not (np.isfinite(gP).all() and np.isfinite(gQ).all()):
            raise AttackDivergedError(step)
        nP, nQ = normalize_gradient(gP, gQ, config.normalization)
        dP = np.clip(dP + alpha * nP, -eps, eps)
        dQ = np.clip(dQ + alpha * nQ, -eps, eps)
        yield Delta(dP.astype(params.dtype), dQ.astype(params.dtype), epsilon=eps,
                    strategy=config.strategy, alpha=alpha, iterations_run=step,
                    seed=config.seed)


def iterative_delta(params: ModelParams, train, config: PerturbationConfig,
                    init_override=None) -> Delta:
    delta = None
    for delta in iterate_deltas(params, train, config, init_override):
        pass
    return delta


def perturb(params: ModelParams, train, config: PerturbationConfig) -> Delta:
    """Run whichever strategy ``config`` names."""
    if config.strategy == "FGSM":
        return fgsm_delta(params, train, config.epsilon, config.loss_batch, seed=config.seed,
                          targets=config.targets, normalization=config.normalization)
    return iterative_delta(params, train, config)


# --- adversarial training ----------------------------------------------------

def _batch_fgsm(gP, gQ, epsilon, dtype):
    return ((epsilon * _row_unit(gP.astype(np.float64))).astype(dtype),
            (epsilon * _row_unit(gQ.astype(np.float64))).astype(dtype))


def apr_batch_gradient(Pb, Qb, local, lam, epsilon_adv, l2_reg=0.0):
    """Loss and gradient of ``L(Theta) + lam * L(Theta + Delta)`` on a compacted batch.

    Delta is the batch FGSM perturbation and is held constant. Returns
    ``(total_loss, gP, gQ, plain_loss)``.
    """
    loss, gP, gQ = bpr_batch_gradient(Pb, Qb, local, l2_reg)
    if lam == 0:
        return loss, gP, gQ, loss
    if l2_reg:
        _, fP, fQ = bpr_batch_gradient(Pb, Qb, local, 0.0)
    else:
        fP, fQ = gP, gQ
    dP, dQ = _batch_fgsm(fP, fQ, epsilon_adv, Pb.dtype)
    adv_loss, aP, aQ = bpr_batch_gradient(Pb + dP, Qb + dQ, local, 0.0)
    return loss + lam * adv_loss, gP + lam * aP, gQ + lam * aQ, loss


def apr_train(train, bpr_checkpoint: ModelParams, apr_config: AprConfig,
              train_config: TrainConfig, on_epoch=None) -> TrainResult:
    """Adversarial personalized ranking, warm-started from a BPR checkpoint.

    Uses the same sampling stream as :func:`advrec.mf.train_bpr` with
    ``init=bpr_checkpoint``, so ``lam == 0`` reproduces that run exactly.
    """
    if (bpr_checkpoint.num_users != train.num_users
            or bpr_checkpoint.num_items != train.num_items):
        raise DomainError("checkpoint does not match the dataset")
    config = dataclasses.replace(train_config, epochs=apr_config.epochs, checkpoint_epochs=())
    _, sample_seed = np.random.SeedSequence(config.seed).spawn(2)
    params = bpr_checkpoint.copy()

    def grad(Pb, Qb, local):
        total, gP, gQ, _ = apr_batch_gradient(Pb, Qb, local, apr_config.lam,
                                              apr_config.epsilon_adv, config.l2_reg)
        return total, gP, gQ

    state, _, losses = run_epochs(train, params, config, grad,
                                  rng=np.random.default_rng(sample_seed), on_epoch=on_epoch)
    return TrainResult(params, {}, losses, state)


def amf_loss(params: ModelParams, triples: Triples, lam, epsilon_adv):
    """``(combined, plain)`` AMF objective on ``triples`` at the current parameters."""
    plain = bpr_loss(params, triples)
    gP, gQ = loss_gradient(params.P, params.Q, triples)
    dP, dQ = _batch_fgsm(gP, gQ, epsilon_adv, np.float64)
    adv = bpr_loss(ModelParams(params.P.astype(np.float64) + dP,
                               params.Q.astype(np.float64) + dQ), triples)
    return plain + lam * adv, plain


# --- persistence -------------------------------------------------------------

def save_delta(delta: Delta, path):
    extra = _DELTA_HEADER.pack(STRATEGIES.index(delta.strategy), delta.epsilon, delta.alpha,
                               delta.iterations_run, delta.seed)
    with open(path, "wb") as fh:
        fh.write(_binfmt.pack(DELTA_MAGIC, delta.dP, delta.dQ, extra))


def load_delta(path) -> Delta:
    with open(path, "rb") as fh:
        dP, dQ, extra = _binfmt.unpack(DELTA_MAGIC, fh.read(), _DELTA_HEADER.size)
    code, eps, alpha, iters, seed = _DELTA_HEADER.unpack(extra)
    if code >= len(STRATEGIES):
        raise DomainError(f"unknown strategy code {code}")
    return Delta(dP, dQ, epsilon=eps, strategy=STRATEGIES[code], alpha=alpha,
                 iterations_run=iters, seed=seed)
