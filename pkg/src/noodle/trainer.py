"""Deterministic training loop: batching, per-batch decomposition, joint loss,
and simultaneous SGD on the encoder and the transition logits.

Randomness is split into four named streams derived from one master seed
(initialization, shuffling, per-batch decomposition, reference-store
decomposition).  Because the decomposition consumes its own stream, disabling
the regularizer (``lam = 0``) leaves the initialization and shuffling draws,
and therefore the entire parameter trajectory, untouched: plain CE training
falls out as an exact special case rather than an approximate one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .datagen import LabeledSet
from .decompose import grad_through_split, split_features
from .losses import (
    GCE_Q,
    LOSS_KINDS,
    SCE_ALPHA,
    SCE_BETA,
    TransitionMatrix,
    classification_loss,
    init_near_identity,
    joint_loss,
    sparsity_loss,
)
from .model import (
    DEFAULT_WIDTHS,
    DivergenceError,
    MlpParams,
    backward,
    clip_global_norm,
    forward,
    init_mlp,
    sgd_step,
    zero_grads_like,
)
from .scoring import DEFAULT_COV_REG, EmbeddingStore, build_store

# JSON config key for the sparsity weight; `lambda` is a Python keyword, so
# the dataclass field is `lam` while the external name stays `lambda`.
_LAMBDA_KEY = "lambda"


@dataclass
class TrainConfig:
    """Everything that determines a training run, hashable for provenance."""

    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss_kind: str = "cm"
    lam: float = 0.001            # sparsity weight on the residual
    k_rank: int | None = None     # None -> number of classes
    pi_iters: int = 10
    normalize: bool = True
    seed: int = 0
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    t_diag_init: float = 0.99
    grad_clip: float = 10.0
    sce_alpha: float = SCE_ALPHA
    sce_beta: float = SCE_BETA
    gce_q: float = GCE_Q
    cov_reg: float = DEFAULT_COV_REG

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)

    def validate(self) -> None:
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.loss_kind not in LOSS_KINDS:
            problems.append(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.lam < 0:
            problems.append(f"lambda must be >= 0, got {self.lam}")
        if self.k_rank is not None and self.k_rank < 1:
            problems.append(f"k_rank must be >= 1 or null, got {self.k_rank}")
        if self.pi_iters < 1:
            problems.append(f"pi_iters must be >= 1, got {self.pi_iters}")
        if not 0.0 < self.t_diag_init < 1.0:
            problems.append(f"t_diag_init must be in (0, 1), got {self.t_diag_init}")
        if self.grad_clip <= 0:
            problems.append(f"grad_clip must be positive, got {self.grad_clip}")
        if len(self.widths) < 1 or min(self.widths) < 1:
            problems.append(f"widths must be positive, got {self.widths}")
        if self.sce_alpha < 0 or self.sce_beta < 0:
            problems.append("sce_alpha and sce_beta must be >= 0")
        if not 0.0 < self.gce_q <= 1.0:
            problems.append(f"gce_q must be in (0, 1], got {self.gce_q}")
        if self.cov_reg <= 0:
            problems.append(f"cov_reg must be positive, got {self.cov_reg}")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc[_LAMBDA_KEY] = doc.pop("lam")
        doc["widths"] = list(self.widths)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        """Build from an external JSON dict; unknown keys are an error so
        typos never silently fall back to defaults."""
        known = {f.name for f in fields(cls)} - {"lam"}
        known |= {_LAMBDA_KEY, "version"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: v for k, v in doc.items() if k != "version"}
        if _LAMBDA_KEY in kwargs:
            kwargs["lam"] = kwargs.pop(_LAMBDA_KEY)
        if "widths" in kwargs:
            kwargs["widths"] = tuple(kwargs["widths"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class TrainResult:
    params: MlpParams
    transition: TransitionMatrix
    loss_trace: list[float] = field(default_factory=list)
    store: EmbeddingStore | None = None


class SeedStreams(NamedTuple):
    """The four independent random streams of one run.

    Stream assignment is a compatibility contract: reordering it changes
    every result downstream of a seed.
    """

    init: np.random.Generator       # parameter initialization
    shuffle: np.random.Generator    # epoch shuffles
    decompose: np.random.Generator  # per-batch subspace starts
    store: np.random.Generator      # full-pass decomposition for the store


def derive_streams(seed: int) -> SeedStreams:
    children = np.random.SeedSequence(seed).spawn(4)
    return SeedStreams(*(np.random.default_rng(c) for c in children))


def params_checksum(params: MlpParams) -> str:
    """SHA-256 over shapes and raw bytes of all parameter arrays."""
    digest = hashlib.sha256()
    for arr in [*params.weights, *params.biases, params.head_weight, params.head_bias]:
        digest.update(str(arr.shape).encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def train(data: LabeledSet, config: TrainConfig) -> TrainResult:
    """Run the full training loop.

    Per batch: forward; decompose the latent columns; classification loss on
    the noisy labels plus ``lam`` times the residual sparsity loss; pull the
    latent gradient back through the (frozen-basis) split; one clipped SGD
    step on the network and, for ``loss_kind='cm'``, on the transition
    logits.  Deterministic given ``config.seed``.

    Raises
    ------
    DivergenceError
        On a non-finite loss, identifying the offending epoch and batch.
    """
    config.validate()
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    num_classes = data.num_classes
    if not 1.0 / num_classes < config.t_diag_init:
        raise ValueError(
            f"t_diag_init={config.t_diag_init} must exceed 1/{num_classes} for {num_classes} classes"
        )

    streams = derive_streams(config.seed)
    params = init_mlp(data.dim, num_classes, streams.init, config.widths)
    transition = init_near_identity(num_classes, config.t_diag_init)
    opt_state = zero_grads_like(params)
    theta_state = np.zeros_like(transition.theta)
    batch_size = min(config.batch_size, n)
    k_rank = config.k_rank if config.k_rank is not None else num_classes

    trace: list[float] = []
    for epoch in range(config.epochs):
        order = streams.shuffle.permutation(n)
        batch_losses: list[float] = []
        for b_start in range(0, n, batch_size):
            idx = order[b_start : b_start + batch_size]
            cache = forward(params, data.features[idx])
            split = split_features(
                cache.latent, k_rank, config.pi_iters, streams.decompose, config.normalize
            )
            corrected = classification_loss(
                config.loss_kind,
                cache.probs,
                data.noisy_labels[idx],
                transition,
                sce_alpha=config.sce_alpha,
                sce_beta=config.sce_beta,
                gce_q=config.gce_q,
            )
            total = joint_loss(corrected, sparsity_loss(split.ood_part), config.lam)
            if not np.isfinite(total.value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b_start // batch_size}"
                )
            grad_latent = (
                None if total.grad_latent is None else grad_through_split(split, total.grad_latent)
            )
            grads = backward(params, cache, total.grad_logits, grad_latent)
            clip_global_norm(grads, config.grad_clip, extra=total.grad_theta)
            sgd_step(params, grads, opt_state, config.lr, config.momentum, config.weight_decay)
            if total.grad_theta is not None:
                # Same optimizer, shared lr; no weight decay on the transition
                # logits (decay would pull T toward uniform).
                theta_state *= config.momentum
                theta_state += total.grad_theta
                transition.theta -= config.lr * theta_state
            batch_losses.append(total.value)
        trace.append(float(np.mean(batch_losses)))

    store = extract_reference_store(params, data, config, rng=streams.store)
    return TrainResult(params, transition, trace, store)


def extract_reference_store(
    params: MlpParams,
    data: LabeledSet,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> EmbeddingStore:
    """Forward the whole training set, decompose the complete latent matrix
    once, and build the reference store from the in-subspace part.

    Labels stored are the (noisy) training labels; the clean ones are not
    available to the method.  ``rng`` defaults to the store stream of
    ``config.seed`` so a standalone call matches what :func:`train` builds.
    """
    if rng is None:
        rng = derive_streams(config.seed).store
    cache = forward(params, data.features)
    k_rank = config.k_rank if config.k_rank is not None else data.num_classes
    split = split_features(cache.latent, k_rank, config.pi_iters, rng, config.normalize)
    meta = {
        "encoder_checksum": params_checksum(params),
        "config_hash": config.config_hash(),
        "n_train": len(data),
    }
    return build_store(split.id_part, data.noisy_labels, config.cov_reg, meta)


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """Convenience for sweeps: replace fields, accepting `lam` under either name."""
    if _LAMBDA_KEY in overrides:
        overrides["lam"] = overrides.pop(_LAMBDA_KEY)
    return replace(config, **overrides)
