import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgnid.dataset import (
    DEFAULT_ATTACKER_MACS,
    FilterStats,
    LabelingConfig,
    SplitPlan,
    filter_and_label,
    split_and_balance,
)
from hgnid.flows import FlowKey, FlowRecord
from hgnid.packets import PacketRecord, Protocol, TcpFlags

ATTACKER = "DC:A6:32:C9:E4:D5"
BENIGN_MAC = "00:11:22:33:44:55"
OTHER_MAC = "66:77:88:99:AA:BB"


def make_flow(label, src_mac, dst_mac):
    pkt = PacketRecord(
        timestamp=0, src_ip="1.1.1.1", dst_ip="2.2.2.2", src_port=1, dst_port=2,
        src_mac=src_mac, dst_mac=dst_mac, protocol=Protocol.TCP, protocol_code=6,
        tcp_flags=TcpFlags.ACK, ip_layer_size=40, transport_layer_size=20, payload=b"",
    )
    return FlowRecord(
        key=FlowKey("1.1.1.1", 1, "2.2.2.2", 2, 6), packets=[pkt],
        flow_features=np.zeros(76), label=label, src_mac=src_mac, dst_mac=dst_mac,
    )


# --- MAC filtering ---


def test_filter_retains_correct_flows():
    flows = [
        make_flow("DDoS", ATTACKER, BENIGN_MAC),      # kept: attack + attacker MAC
        make_flow("DDoS", BENIGN_MAC, OTHER_MAC),     # dropped: attack, no attacker MAC
        make_flow("Benign", BENIGN_MAC, OTHER_MAC),   # kept: benign, clean MACs
        make_flow("Benign", BENIGN_MAC, ATTACKER),    # dropped: benign with attacker MAC
    ]
    kept, stats = filter_and_label(flows)
    assert [f.label for f in kept] == ["DDoS", "Benign"]
    assert stats == FilterStats(retained_attack=1, retained_benign=1, dropped=2)


def test_filter_is_case_insensitive_on_macs():
    kept, _ = filter_and_label([make_flow("Mirai", ATTACKER.lower(), BENIGN_MAC)])
    assert len(kept) == 1


def test_missing_mac_is_quarantined_with_warning():
    with pytest.warns(UserWarning):
        kept, stats = filter_and_label([make_flow("DoS", "", BENIGN_MAC)])
    assert kept == []
    assert stats.quarantined == 1


def test_invalid_mac_config_rejected():
    with pytest.raises(ValueError):
        LabelingConfig(attacker_macs=frozenset({"not-a-mac"}))


def test_default_attacker_set_size():
    assert len(DEFAULT_ATTACKER_MACS) == 9
    assert "E4:5F:01:55:90:C4" in DEFAULT_ATTACKER_MACS


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["Benign", "DoS", "Recon"]),
                          st.sampled_from([ATTACKER, BENIGN_MAC, OTHER_MAC, ""]),
                          st.sampled_from([ATTACKER, BENIGN_MAC, OTHER_MAC])),
                max_size=40))
def test_filter_partitions_every_flow(rows):
    import warnings as w

    flows = [make_flow(*r) for r in rows]
    with w.catch_warnings():
        w.simplefilter("ignore")
        kept, stats = filter_and_label(flows)
    assert (stats.retained_attack + stats.retained_benign
            + stats.dropped + stats.quarantined) == len(flows)
    assert stats.retained_attack + stats.retained_benign == len(kept)
    for f in kept:
        attacker = ATTACKER in (f.src_mac, f.dst_mac)
        assert attacker == (f.label != "Benign")


# --- split and balance ---


def labels_of(counts):
    out = []
    for cls, n in counts.items():
        out.extend([cls] * n)
    return out


def test_split_exact_counts_with_undersampling():
    labels = labels_of({"Benign": 1000, "DoS": 400})
    plan = SplitPlan(test_cap=50, train_target=100, test_fraction=0.2, seed=1)
    res = split_and_balance(labels, plan)
    # test: min(20% of 1000, 50) = 50 benign; min(20% of 400, 50) = 50 DoS
    test_labels = [labels[i] for i in res.test_indices]
    assert test_labels.count("Benign") == 50 and test_labels.count("DoS") == 50
    train_labels = [labels[i] for i in res.train_indices]
    assert train_labels.count("Benign") == 100 and train_labels.count("DoS") == 100
    assert res.oversampled == []
    # undersampled classes never repeat a sample
    assert len(set(res.train_indices)) == len(res.train_indices)


def test_split_oversamples_scarce_class():
    labels = labels_of({"Benign": 500, "Mirai": 30})
    plan = SplitPlan(test_cap=10, train_target=100, test_fraction=0.2, seed=3)
    res = split_and_balance(labels, plan)
    train_labels = [labels[i] for i in res.train_indices]
    assert train_labels.count("Mirai") == 100
    # 30 - 6 test = 24 unique; 76 duplicated positions flagged
    mirai_positions = [p for p in res.oversampled
                       if labels[res.train_indices[p]] == "Mirai"]
    assert len(mirai_positions) == 76
    for p in res.oversampled:
        assert labels[res.train_indices[p]] != "Benign"


def test_split_train_test_disjoint_over_seeds():
    labels = labels_of({"Benign": 120, "DoS": 80, "Recon": 45})
    for seed in range(10):
        plan = SplitPlan(test_cap=20, train_target=60, test_fraction=0.2, seed=seed)
        res = split_and_balance(labels, plan)
        assert set(res.train_indices).isdisjoint(res.test_indices)
        train_labels = [labels[i] for i in res.train_indices]
        for cls in ("Benign", "DoS", "Recon"):
            assert train_labels.count(cls) == 60
        test_labels = [labels[i] for i in res.test_indices]
        assert test_labels.count("Benign") == 20
        assert test_labels.count("DoS") == 16
        assert test_labels.count("Recon") == 9


def test_split_is_seed_deterministic():
    labels = labels_of({"A": 50, "B": 70})
    plan = SplitPlan(test_cap=10, train_target=30, test_fraction=0.2, seed=9)
    a = split_and_balance(labels, plan)
    b = split_and_balance(labels, plan)
    assert a.train_indices == b.train_indices
    assert a.test_indices == b.test_indices


def test_subclass_proportions_largest_remainder():
    # 90 DDoS train candidates: 60 of subclass s1, 30 of s2 -> 2:1 in train
    labels = ["DDoS"] * 90 + ["Benign"] * 90
    subclasses = ["s1"] * 60 + ["s2"] * 30 + [None] * 90
    plan = SplitPlan(test_cap=1_000_000, train_target=30, test_fraction=0.0, seed=0)
    res = split_and_balance(labels, plan, subclasses)
    chosen = [subclasses[i] for i in res.train_indices if labels[i] == "DDoS"]
    assert chosen.count("s1") == 20 and chosen.count("s2") == 10


def test_split_rejects_class_with_no_train_pool():
    labels = ["A", "B"]  # fraction 1.0 sends everything to test
    plan = SplitPlan(test_cap=10, train_target=5, test_fraction=1.0, seed=0)
    with pytest.raises(ValueError):
        split_and_balance(labels, plan)


def test_plan_validation():
    with pytest.raises(ValueError):
        SplitPlan(test_cap=0)
    with pytest.raises(ValueError):
        SplitPlan(train_target=0)
