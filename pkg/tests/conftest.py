import random

import numpy as np
import pytest

from hgnid.flows import assemble_flows
from hgnid.graphs import build_graph
from hgnid.model import HeteroGATClassifier
from hgnid.packets import read_pcap
from hgnid.synthetic import generate_archetype_pcaps
from hgnid.temporal import TemporalFeaturizer


def graphs_from_pcaps(paths: dict) -> list:
    graphs = []
    for label, path in sorted(paths.items()):
        featurizer = TemporalFeaturizer()
        flows = sorted(assemble_flows(read_pcap(path)), key=lambda f: f.end_time)
        for flow in flows:
            flow.label = label
            graphs.append(build_graph(flow, featurizer.update(flow)))
    return graphs


@pytest.fixture(scope="session")
def small_graphs(tmp_path_factory):
    """~120 labeled graphs across the four synthetic archetypes."""
    d = tmp_path_factory.mktemp("pcaps")
    paths = generate_archetype_pcaps(d, flows_per_class=30, seed=7)
    graphs = graphs_from_pcaps(paths)
    random.Random(7).shuffle(graphs)
    return graphs


@pytest.fixture(scope="session")
def tiny_classifier(small_graphs):
    """A small float64 model trained enough to be non-degenerate."""
    clf = HeteroGATClassifier(hidden_dim=16, heads=2, head_widths=(16, 8),
                              dtype="float64", epochs=6, seed=3)
    clf.fit(small_graphs)
    return clf


@pytest.fixture()
def rng():
    return np.random.RandomState(42)
