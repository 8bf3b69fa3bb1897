"""Bag construction and proportion priors.

An epoch's bags are pairwise-disjoint index sets drawn without replacement.
The prior attached to each bag depends on the supervision mode: exact
per-bag label histograms, a shared global vector (from annotations or a
census), or the uninformative equal split.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class PriorMode(str, Enum):
    EXACT_PER_BAG = "exact_per_bag"
    GLOBAL_ANNOTATED = "global_annotated"
    GLOBAL_CENSUS = "global_census"
    EQUIPARTITION = "equipartition"


@dataclass(frozen=True)
class ProportionPrior:
    mode: PriorMode
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("prior must be a distribution")


@dataclass(frozen=True)
class Bag:
    indices: np.ndarray
    prior: ProportionPrior

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class PriorSetup:
    """How priors are produced for a run: the mode plus, for the global
    modes, the shared proportion vector."""

    mode: PriorMode
    global_w: np.ndarray | None = None

    def __post_init__(self):
        if self.global_w is not None:
            object.__setattr__(self, "global_w", np.asarray(self.global_w, dtype=np.float64))


def make_epoch_bags(
    dataset,
    bag_size: int,
    prior_mode: PriorMode,
    global_w: np.ndarray | None = None,
    samples_per_epoch: int | None = None,
    seed: int = 0,
) -> list[Bag]:
    """Draw one epoch of disjoint bags.

    `dataset` must expose __len__, `class_count`, and (for the exact mode)
    integer `labels`. samples_per_epoch indices are drawn without
    replacement and split into floor(samples_per_epoch / bag_size) bags;
    the remainder is dropped. Deterministic in `seed`.
    """
    n_total = len(dataset)
    K = dataset.class_count
    if samples_per_epoch is None:
        samples_per_epoch = n_total
    if bag_size < 1:
        raise ValueError("bag_size must be >= 1")
    if bag_size > n_total:
        raise ValueError(f"bag_size {bag_size} exceeds dataset size {n_total}")
    if samples_per_epoch > n_total:
        raise ValueError(
            f"samples_per_epoch {samples_per_epoch} exceeds dataset size {n_total}"
        )

    if prior_mode in (PriorMode.GLOBAL_ANNOTATED, PriorMode.GLOBAL_CENSUS):
        if global_w is None:
            raise ValueError(f"{prior_mode.value} requires a global proportion vector")
        shared = ProportionPrior(prior_mode, np.asarray(global_w, dtype=np.float64))
        if shared.w.size != K:
            raise ValueError(f"global_w has length {shared.w.size}, expected {K}")
    elif prior_mode is PriorMode.EQUIPARTITION:
        shared = ProportionPrior(prior_mode, np.full(K, 1.0 / K))
    elif prior_mode is PriorMode.EXACT_PER_BAG:
        if getattr(dataset, "labels", None) is None:
            raise ValueError("exact per-bag priors require labels")
        shared = None
    else:
        raise ValueError(f"unknown prior mode {prior_mode!r}")

    rng = np.random.default_rng(seed)
    n_bags = samples_per_epoch // bag_size
    drawn = rng.permutation(n_total)[: n_bags * bag_size]

    bags = []
    for i in range(n_bags):
        idx = drawn[i * bag_size : (i + 1) * bag_size]
        if shared is not None:
            prior = shared
        else:
            counts = np.bincount(np.asarray(dataset.labels)[idx], minlength=K)
            prior = ProportionPrior(PriorMode.EXACT_PER_BAG, counts / bag_size)
        bags.append(Bag(indices=idx, prior=prior))
    return bags


def census_prior(raw: list[tuple[str, float]], target_classes: list[str]) -> np.ndarray:
    """Fold census percentages onto the target class list.

    Every target class except the trailing "others" keeps its census
    percent verbatim; "others" absorbs the unlisted census mass plus the
    shortfall to 100% (census tables rarely sum to 100). The result is
    normalized to a distribution.
    """
    if not target_classes or target_classes[-1] != "others":
        raise ValueError('target_classes must end with "others"')
    percents: dict[str, float] = {}
    for name, pct in raw:
        if pct < 0:
            raise ValueError(f"negative census percent for {name!r}")
        percents[name] = percents.get(name, 0.0) + float(pct)

    named = target_classes[:-1]
    values = []
    for name in named:
        if name not in percents:
            raise ValueError(f"census data has no entry for target class {name!r}")
        values.append(percents[name])
    total_raw = sum(percents.values())
    unlisted = total_raw - sum(values)
    shortfall = max(0.0, 100.0 - total_raw)
    values.append(unlisted + shortfall)

    out = np.asarray(values, dtype=np.float64)
    return out / out.sum()


def empirical_bag_stats(
    dataset, bag_size: int, trials: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo spread of realized bag proportions.

    Draws `trials` independent bags (each without replacement) and returns
    the per-class mean and standard deviation of their label proportions.
    """
    labels = np.asarray(dataset.labels)
    K = dataset.class_count
    if bag_size > labels.size:
        raise ValueError("bag_size exceeds dataset size")
    rng = np.random.default_rng(seed)
    props = np.empty((trials, K))
    for t in range(trials):
        idx = rng.choice(labels.size, size=bag_size, replace=False)
        props[t] = np.bincount(labels[idx], minlength=K) / bag_size
    return props.mean(axis=0), props.std(axis=0)
