"""Training loop: epochs of disjoint bags, two views per sample,
proportion-constrained codes, swapped-prediction loss, plain SGD.

The learning rate warms up linearly from lr_init/100 over the first
warmup_epochs, then follows a per-step cosine from lr_init down to
lr_final. Prototypes stay frozen (bitwise) for the first
freeze_prototypes_epochs and are re-normalized to unit rows after every
update. Per-epoch and per-sample randomness derive from (seed, epoch,
index) alone, so a run can be checkpointed and resumed bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .bagging import PriorSetup, make_epoch_bags
from .datagen import AugmentationPolicy, derive_seed, two_views
from .errors import FormatError, NumericalError, UnsupportedVersionError
from .loss import predicted_proportions, swap_loss
from .model import (
    Gradients,
    ModelConfig,
    ModelState,
    backward,
    encode,
    normalize_rows,
    probabilities,
    prototype_scores,
)
from .sinkhorn import MarginalSpec, entropy, max_feasible_entropy

CHECKPOINT_MAGIC = b"LLPC"
CHECKPOINT_VERSION = 1

# A run is flagged as collapsing when the mean code entropy over an epoch
# comes within 1% of the feasible maximum (codes carry no information).
COLLAPSE_ENTROPY_RATIO = 0.99


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    bag_size: int
    samples_per_epoch: int
    lr_init: float = 0.1
    lr_final: float = 1e-4
    warmup_epochs: int = 5
    weight_decay: float = 1e-6
    epsilon: float = 0.05
    sinkhorn_iters: int = 5
    tau: float = 0.1
    freeze_prototypes_epochs: int = 1
    hard_codes: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.bag_size < 1 or self.samples_per_epoch < 1:
            raise ValueError("epochs must be >= 0, bag_size and samples_per_epoch >= 1")
        if self.epsilon <= 0 or self.tau <= 0:
            raise ValueError("epsilon and tau must be positive")
        # lr of exactly 0 is allowed: it freezes the run, which is handy for
        # wiring checks.
        if self.lr_init < 0 or self.lr_final < 0:
            raise ValueError("learning rates must be >= 0")
        if self.weight_decay < 0 or self.sinkhorn_iters < 1:
            raise ValueError("weight_decay must be >= 0 and sinkhorn_iters >= 1")
        if self.warmup_epochs < 0 or self.freeze_prototypes_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    lr: float
    predicted_w: np.ndarray
    mean_bag_prior: np.ndarray
    marginal_residual: float
    mean_code_entropy_ratio: float
    min_code_entropy_ratio: float
    collapse: bool

    def to_jsonable(self) -> dict:
        d = asdict(self)
        d["predicted_w"] = self.predicted_w.tolist()
        d["mean_bag_prior"] = self.mean_bag_prior.tolist()
        return d

    @classmethod
    def from_jsonable(cls, d: dict) -> "EpochStats":
        d = dict(d)
        d["predicted_w"] = np.asarray(d["predicted_w"], dtype=np.float64)
        d["mean_bag_prior"] = np.asarray(d["mean_bag_prior"], dtype=np.float64)
        return cls(**d)


@dataclass
class TrainTrace:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def collapse_detected(self) -> bool:
        return any(e.collapse for e in self.epochs)

    def to_jsonable(self) -> list[dict]:
        return [e.to_jsonable() for e in self.epochs]

    @classmethod
    def from_jsonable(cls, items: list[dict]) -> "TrainTrace":
        return cls(epochs=[EpochStats.from_jsonable(d) for d in items])


def lr_at(config: TrainConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    """Learning rate at a global step: linear warmup from lr_init/100 to
    lr_init, then cosine decay to exactly lr_final at the last step."""
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    if not (0 <= epoch < config.epochs) or not (0 <= step_in_epoch < steps_per_epoch):
        raise ValueError("epoch/step outside the configured schedule")
    s = epoch * steps_per_epoch + step_in_epoch
    total = config.epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    if s < warmup:
        start = config.lr_init / 100.0
        return start + (config.lr_init - start) * (s / warmup)
    span = total - 1 - warmup
    if span <= 0:
        return config.lr_final
    progress = (s - warmup) / span
    return config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (
        1.0 + np.cos(np.pi * progress)
    )


def _bag_views(dataset, indices, policy, seed: int, epoch: int):
    views_s, views_t = [], []
    for i in indices:
        v1, v2 = two_views(dataset.sample(int(i)), policy, derive_seed(seed, epoch, int(i)))
        views_s.append(v1.ravel())
        views_t.append(v2.ravel())
    return np.stack(views_s), np.stack(views_t)


def train(
    state: ModelState,
    dataset,
    prior: PriorSetup,
    config: TrainConfig,
    policy: AugmentationPolicy | None = None,
    start_epoch: int = 0,
    stop_epoch: int | None = None,
    trace: TrainTrace | None = None,
) -> tuple[ModelState, TrainTrace]:
    """Run the bag-level training loop and return (final state, trace).

    The input state is not mutated. stop_epoch pauses a run early without
    altering the schedule; passing start_epoch/trace from a loaded
    checkpoint continues it. Because all randomness is derived from
    (config.seed, epoch, sample index), a paused-and-resumed run is bitwise
    identical to an uninterrupted one.
    """
    if policy is None:
        policy = AugmentationPolicy()
    if dataset.class_count != state.config.cluster_count:
        raise ValueError(
            f"dataset has {dataset.class_count} classes but the model has"
            f" {state.config.cluster_count} prototypes"
        )
    state = state.copy()
    trace = trace if trace is not None else TrainTrace()

    last_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    for epoch in range(start_epoch, last_epoch):
        bags = make_epoch_bags(
            dataset,
            config.bag_size,
            prior.mode,
            global_w=prior.global_w,
            samples_per_epoch=config.samples_per_epoch,
            seed=derive_seed(config.seed, epoch),
        )
        steps = len(bags)
        if steps == 0:
            raise ValueError("samples_per_epoch too small to form a single bag")
        frozen = epoch < config.freeze_prototypes_epochs

        losses = []
        pred_w = np.zeros(dataset.class_count)
        bag_w = np.zeros(dataset.class_count)
        residuals = []
        entropy_ratios = []
        lr = 0.0
        for step, bag in enumerate(bags):
            lr = lr_at(config, epoch, step, steps)
            X_s, X_t = _bag_views(dataset, bag.indices, policy, config.seed, epoch)
            Z_s, cache_s = encode(state, X_s)
            Z_t, cache_t = encode(state, X_t)
            S_s = prototype_scores(state, Z_s)
            S_t = prototype_scores(state, Z_t)
            if not (np.isfinite(S_s).all() and np.isfinite(S_t).all()):
                raise NumericalError(
                    f"non-finite prototype scores at epoch={epoch} bag={step}"
                    f" epsilon={config.epsilon} lr={lr:.6g}"
                )
            marginals = MarginalSpec.with_uniform_cols(bag.prior.w, len(bag))
            result = swap_loss(
                S_s,
                S_t,
                marginals,
                epsilon=config.epsilon,
                temperature=config.tau,
                sinkhorn_iters=config.sinkhorn_iters,
                hard=config.hard_codes,
            )
            if not np.isfinite(result.loss):
                raise NumericalError(
                    f"non-finite loss at epoch={epoch} bag={step}"
                    f" epsilon={config.epsilon} lr={lr:.6g}"
                )

            grads = backward(state, cache_s, result.grad_scores_s.astype(state.dtype))
            grads.add_(backward(state, cache_t, result.grad_scores_t.astype(state.dtype)))
            _apply_sgd(state, grads, lr, config.weight_decay, frozen)

            losses.append(result.loss)
            P_s = probabilities(np.asarray(S_s, dtype=np.float64), config.tau)
            P_t = probabilities(np.asarray(S_t, dtype=np.float64), config.tau)
            pred_w += 0.5 * (predicted_proportions(P_s) + predicted_proportions(P_t))
            bag_w += bag.prior.w
            residuals.append(max(result.codes_s.residual, result.codes_t.residual))
            h_max = max_feasible_entropy(marginals)
            entropy_ratios.append(entropy(result.codes_s) / h_max)
            entropy_ratios.append(entropy(result.codes_t) / h_max)

        mean_ratio = float(np.mean(entropy_ratios))
        trace.epochs.append(
            EpochStats(
                epoch=epoch,
                loss=float(np.mean(losses)),
                lr=float(lr),
                predicted_w=pred_w / steps,
                mean_bag_prior=bag_w / steps,
                marginal_residual=float(np.mean(residuals)),
                mean_code_entropy_ratio=mean_ratio,
                min_code_entropy_ratio=float(np.min(entropy_ratios)),
                collapse=mean_ratio > COLLAPSE_ENTROPY_RATIO,
            )
        )
    return state, trace


def _apply_sgd(
    state: ModelState, grads: Gradients, lr: float, weight_decay: float, frozen: bool
) -> None:
    # Weight decay touches weight matrices and prototypes, not biases.
    # Prototype rows are re-normalized after every real update (so their
    # decay is absorbed); a zero step leaves all parameters bitwise intact.
    if lr == 0.0:
        return
    for W, b, gW, gb in zip(state.weights, state.biases, grads.weights, grads.biases):
        W -= lr * (gW + weight_decay * W)
        b -= lr * gb
    if not frozen:
        state.prototypes -= lr * (grads.prototypes + weight_decay * state.prototypes)
        state.prototypes = normalize_rows(state.prototypes)


def align_prototypes_to_prior(
    state: ModelState, dataset, prior_w, batch_size: int = 2048
) -> tuple[ModelState, np.ndarray]:
    """Reorder prototype rows so cluster k's realized share of hard
    assignments matches the k-th prior proportion.

    The identity of a cluster is exchangeable during training: nothing ties
    prototype k to the class holding the k-th prior entry, so a run may end
    with pure clusters under a permuted naming. This step canonicalizes the
    naming using only the prior and unlabeled samples: encode the dataset,
    hard-assign to prototypes, and permute rows to minimize the total
    mass-vs-prior mismatch. Tied prior entries keep their current order, so
    an ambiguous prior (equal shares) leaves the naming untouched.

    Returns the re-ordered state and the permutation applied (new index k
    holds old prototype perm[k]).
    """
    from scipy.optimize import linear_sum_assignment

    prior_w = np.asarray(prior_w, dtype=np.float64)
    K = state.config.cluster_count
    if prior_w.shape != (K,):
        raise ValueError(f"prior has shape {prior_w.shape}, expected ({K},)")
    counts = np.zeros(K)
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        X = dataset.matrix(idx)
        Z, _ = encode(state, X)
        assign = prototype_scores(state, Z).argmax(axis=0)
        counts += np.bincount(assign, minlength=K)
    masses = counts / counts.sum()

    cost = np.abs(prior_w[:, None] - masses[None, :])
    # tiny lexicographic tiebreak keeps the identity permutation on ties
    cost += 1e-12 * np.abs(np.arange(K)[:, None] - np.arange(K)[None, :])
    _, perm = linear_sum_assignment(cost)
    aligned = state.copy()
    aligned.prototypes = aligned.prototypes[perm].copy()
    return aligned, perm


def save_checkpoint(path, state: ModelState, config: TrainConfig, trace: TrainTrace) -> None:
    """Checkpoint file: magic LLPC, version, JSON config block, parameters
    as little-endian float32 in declaration order, JSON trace block."""
    header = {
        "model_config": {
            "input_dim": state.config.input_dim,
            "hidden_dims": list(state.config.hidden_dims),
            "embed_dim": state.config.embed_dim,
            "cluster_count": state.config.cluster_count,
            "temperature": state.config.temperature,
        },
        "train_config": asdict(config),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    trace_bytes = json.dumps(trace.to_jsonable()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for arr in state.parameter_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(trace_bytes)))
        fh.write(trace_bytes)


def _read_exact(fh, nbytes: int) -> bytes:
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise FormatError(f"truncated checkpoint: wanted {nbytes} bytes, got {len(data)}")
    return data


def load_checkpoint(path) -> tuple[ModelState, TrainConfig, TrainTrace]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise UnsupportedVersionError(f"checkpoint version {version} not supported")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        mc = header["model_config"]
        model_config = ModelConfig(
            input_dim=mc["input_dim"],
            hidden_dims=tuple(mc["hidden_dims"]),
            embed_dim=mc["embed_dim"],
            cluster_count=mc["cluster_count"],
            temperature=mc["temperature"],
        )
        train_config = TrainConfig(**header["train_config"])

        dims = model_config.layer_dims
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(
                np.frombuffer(_read_exact(fh, 4 * fan_in * fan_out), dtype="<f4")
                .reshape(fan_in, fan_out)
                .copy()
            )
            biases.append(np.frombuffer(_read_exact(fh, 4 * fan_out), dtype="<f4").copy())
        K, m = model_config.cluster_count, model_config.embed_dim
        prototypes = np.frombuffer(_read_exact(fh, 4 * K * m), dtype="<f4").reshape(K, m).copy()
        state = ModelState(
            config=model_config, weights=weights, biases=biases, prototypes=prototypes
        )
        (trace_len,) = struct.unpack("<I", _read_exact(fh, 4))
        trace = TrainTrace.from_jsonable(json.loads(_read_exact(fh, trace_len).decode("utf-8")))
    return state, train_config, trace
