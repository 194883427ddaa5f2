"""Dataset preparation: attacker-MAC filtering, labeling, and balanced
train/test splitting with per-class caps."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .flows import FlowRecord
from .labels import CLASS_NAMES

# attacker devices of the CIC-IoT2023 testbed
DEFAULT_ATTACKER_MACS: frozenset[str] = frozenset(
    {
        "E4:5F:01:55:90:C4",
        "DC:A6:32:C9:E4:D5",
        "DC:A6:32:DC:27:D5",
        "DC:A6:32:C9:E5:EF",
        "DC:A6:32:C9:E4:AB",
        "DC:A6:32:C9:E4:90",
        "DC:A6:32:C9:E5:A4",
        "B0:09:DA:3E:82:6C",
        "AC:17:02:05:34:27",
    }
)

_MAC_RE = re.compile(r"^([0-9A-Fa-f]{2}:){5}[0-9A-Fa-f]{2}$")


@dataclass
class LabelingConfig:
    attacker_macs: frozenset[str] = DEFAULT_ATTACKER_MACS
    classes: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        bad = [m for m in self.attacker_macs if not _MAC_RE.match(m)]
        if bad:
            raise ValueError(f"invalid MAC addresses: {bad}")
        self.attacker_macs = frozenset(m.upper() for m in self.attacker_macs)


@dataclass
class FilterStats:
    retained_attack: int = 0
    retained_benign: int = 0
    dropped: int = 0
    quarantined: int = 0


def filter_and_label(
    flows: list[FlowRecord], cfg: LabelingConfig | None = None
) -> tuple[list[FlowRecord], FilterStats]:
    """Apply the attacker-MAC retention rule to provenance-labeled flows.

    Attack-class flows are kept only when either MAC is an attacker MAC;
    benign flows only when neither is. Flows without MAC metadata are
    quarantined with a warning.
    """
    cfg = cfg or LabelingConfig()
    kept: list[FlowRecord] = []
    stats = FilterStats()
    for flow in flows:
        if not flow.src_mac or not flow.dst_mac:
            warnings.warn(f"flow without MAC metadata quarantined (label={flow.label})")
            stats.quarantined += 1
            continue
        attacker = (
            flow.src_mac.upper() in cfg.attacker_macs
            or flow.dst_mac.upper() in cfg.attacker_macs
        )
        if flow.label == "Benign":
            if attacker:
                stats.dropped += 1
            else:
                stats.retained_benign += 1
                kept.append(flow)
        else:
            if attacker:
                stats.retained_attack += 1
                kept.append(flow)
            else:
                stats.dropped += 1
    return kept, stats


@dataclass
class SplitPlan:
    test_cap: int = 4000
    train_target: int = 20000
    test_fraction: float = 0.2
    seed: int = 0
    subclass_proportional: bool = True

    def __post_init__(self):
        if self.test_cap <= 0 or self.train_target <= 0:
            raise ValueError("caps and targets must be positive")


@dataclass
class SplitResult:
    train_indices: list[int]  # may contain repeated indices (oversampling)
    test_indices: list[int]
    oversampled: list[int]  # positions in train_indices that are duplicates


def split_and_balance(
    labels: list[str],
    plan: SplitPlan,
    subclasses: list[str | None] | None = None,
) -> SplitResult:
    """Per class: test = min(test_fraction * n, test_cap) samples; train is
    resampled to exactly ``train_target`` via undersampling without
    replacement or oversampling by random duplication. Train and test are
    disjoint by sample identity; duplicates are flagged."""
    if subclasses is None:
        subclasses = [None] * len(labels)
    by_class: dict[str, list[int]] = {}
    for i, lbl in enumerate(labels):
        by_class.setdefault(lbl, []).append(i)
    for cls, members in by_class.items():
        if not members:
            raise ValueError(f"class {cls!r} has no samples")

    rng = np.random.RandomState(plan.seed)
    train: list[int] = []
    test: list[int] = []
    oversampled: list[int] = []
    for cls in sorted(by_class):
        members = np.array(by_class[cls])
        rng.shuffle(members)
        n_test = min(int(len(members) * plan.test_fraction), plan.test_cap)
        test.extend(int(i) for i in members[:n_test])
        pool = members[n_test:]
        if len(pool) == 0:
            raise ValueError(f"class {cls!r} has no training samples after the test split")

        groups: dict[str | None, np.ndarray]
        if plan.subclass_proportional and any(subclasses[i] is not None for i in pool):
            groups = {}
            for i in pool:
                groups.setdefault(subclasses[i], []).append(i)
            groups = {k: np.array(v) for k, v in sorted(groups.items(), key=lambda kv: str(kv[0]))}
        else:
            groups = {None: pool}

        # largest-remainder allocation of the per-class target across subclasses
        total = sum(len(g) for g in groups.values())
        quotas = {k: plan.train_target * len(g) / total for k, g in groups.items()}
        alloc = {k: int(q) for k, q in quotas.items()}
        leftovers = sorted(groups, key=lambda k: quotas[k] - alloc[k], reverse=True)
        for k in leftovers[: plan.train_target - sum(alloc.values())]:
            alloc[k] += 1

        for k, g in groups.items():
            want = alloc[k]
            if want <= len(g):
                chosen = rng.choice(g, size=want, replace=False)
                train.extend(int(i) for i in chosen)
            else:
                train.extend(int(i) for i in g)
                extra = rng.choice(g, size=want - len(g), replace=True)
                for i in extra:
                    oversampled.append(len(train))
                    train.append(int(i))
    return SplitResult(train_indices=train, test_indices=test, oversampled=oversampled)
