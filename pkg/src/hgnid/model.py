"""Heterogeneous graph-attention classifier.

Two node types (flow, packet) are projected to a shared hidden width and
refined by two attention-convolution layers with per-edge-type parameters
and edge features. Reverse edge types (packet->flow, reversed link) are
materialized at batch time so information reaches the flow node. Node
embeddings are mean-pooled per graph and classified by a three-layer dense
head with log-softmax output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from .graphs import CONTAIN_EDGE_DIM, GRAPH_SCHEMA_VERSION, LINK_EDGE_DIM, PAYLOAD_DIM, HeteroGraph
from .temporal import EXTENDED_DIM

CHECKPOINT_VERSION = "hgnid-ckpt-1"

# (source node type, destination node type, edge feature width)
RELATIONS: dict[str, tuple[str, str, int]] = {
    "contain": ("flow", "packet", CONTAIN_EDGE_DIM),
    "contained_by": ("packet", "flow", CONTAIN_EDGE_DIM),
    "link": ("packet", "packet", LINK_EDGE_DIM),
    "link_rev": ("packet", "packet", LINK_EDGE_DIM),
}
NODE_TYPES = ("flow", "packet")


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    heads: int = 4
    head_widths: tuple[int, int] = (32, 16)
    negative_slope: float = 0.01
    attn_slope: float = 0.2
    activation: str = "leaky_relu"  # or "relu"
    dtype: str = "float32"

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.15
    patience: int = 10
    checkpoint_dir: str | None = None


class Normalizer:
    """Per-feature standardization statistics fitted on the training set.

    Flow/temporal and edge features are standardized; payload bytes are
    scaled to [0, 1] by /255.
    """

    def __init__(self):
        self.flow_mean = np.zeros(EXTENDED_DIM)
        self.flow_std = np.ones(EXTENDED_DIM)
        self.contain_mean = np.zeros(CONTAIN_EDGE_DIM)
        self.contain_std = np.ones(CONTAIN_EDGE_DIM)
        self.link_mean = np.zeros(LINK_EDGE_DIM)
        self.link_std = np.ones(LINK_EDGE_DIM)

    @staticmethod
    def _moments(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        return mean, np.maximum(std, 1e-6)

    def fit(self, graphs: list[HeteroGraph]) -> "Normalizer":
        self.flow_mean, self.flow_std = self._moments(
            np.stack([g.flow_features for g in graphs])
        )
        contain = np.concatenate([g.contain_edge_features for g in graphs])
        self.contain_mean, self.contain_std = self._moments(contain)
        links = [g.link_edge_features for g in graphs if g.link_edge_features.size]
        if links:
            self.link_mean, self.link_std = self._moments(np.concatenate(links))
        return self

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        n = cls()
        for k, v in d.items():
            setattr(n, k, np.array(v, dtype=np.float64))
        return n


@dataclass
class GraphBatch:
    """Collated graphs: per-type node tensors, typed edges, membership."""

    flow_x: torch.Tensor  # (B, 92)
    packet_x: torch.Tensor  # (P, 1500)
    edge_index: dict[str, torch.Tensor]  # rel -> (2, E) long
    edge_attr: dict[str, torch.Tensor]  # rel -> (E, dim)
    flow_batch: torch.Tensor  # (B,) long
    packet_batch: torch.Tensor  # (P,) long
    y: torch.Tensor | None = None  # (B,) long
    num_graphs: int = 0


def graph_tensors(
    g: HeteroGraph, normalizer: Normalizer, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Normalized input tensors for one graph (flow, payload, contain, link)."""
    flow = torch.as_tensor(
        (g.flow_features - normalizer.flow_mean) / normalizer.flow_std, dtype=dtype
    )
    packet = torch.as_tensor(g.packet_payloads, dtype=dtype) / 255.0
    contain = torch.as_tensor(
        (g.contain_edge_features - normalizer.contain_mean) / normalizer.contain_std,
        dtype=dtype,
    )
    link = torch.as_tensor(
        (g.link_edge_features - normalizer.link_mean) / normalizer.link_std
        if g.link_edge_features.size
        else np.zeros((0, LINK_EDGE_DIM)),
        dtype=dtype,
    )
    return flow, packet, contain, link


def collate(
    per_graph: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]],
    labels: torch.Tensor | None = None,
) -> GraphBatch:
    """Concatenate per-graph tensors and build typed edge index lists."""
    flow_rows, packet_rows, contain_rows, link_rows = [], [], [], []
    contain_src, contain_dst, link_src, link_dst = [], [], [], []
    packet_batch = []
    offset = 0
    for b, (flow, packet, contain, link) in enumerate(per_graph):
        n = packet.shape[0]
        flow_rows.append(flow)
        packet_rows.append(packet)
        contain_rows.append(contain)
        link_rows.append(link)
        contain_src.extend([b] * n)
        contain_dst.extend(range(offset, offset + n))
        link_src.extend(range(offset, offset + n - 1))
        link_dst.extend(range(offset + 1, offset + n))
        packet_batch.extend([b] * n)
        offset += n

    long = torch.long
    ei_contain = torch.tensor([contain_src, contain_dst], dtype=long).reshape(2, -1)
    ei_link = torch.tensor([link_src, link_dst], dtype=long).reshape(2, -1)
    contain_attr = torch.cat(contain_rows) if contain_rows else torch.zeros(0, CONTAIN_EDGE_DIM)
    link_attr = torch.cat(link_rows)
    return GraphBatch(
        flow_x=torch.stack(flow_rows),
        packet_x=torch.cat(packet_rows),
        edge_index={
            "contain": ei_contain,
            "contained_by": ei_contain.flip(0),
            "link": ei_link,
            "link_rev": ei_link.flip(0),
        },
        edge_attr={
            "contain": contain_attr,
            "contained_by": contain_attr,
            "link": link_attr,
            "link_rev": link_attr,
        },
        flow_batch=torch.arange(len(per_graph), dtype=long),
        packet_batch=torch.tensor(packet_batch, dtype=long),
        y=labels,
        num_graphs=len(per_graph),
    )


def _edge_softmax(logits: torch.Tensor, dst: torch.Tensor, num_dst: int) -> torch.Tensor:
    """Softmax of edge logits grouped by destination node; (E, H) in and out."""
    heads = logits.shape[1]
    maxes = logits.detach().new_full((num_dst, heads), -math.inf)
    maxes = maxes.index_reduce(0, dst, logits.detach(), "amax", include_self=True)
    shifted = torch.exp(logits - maxes[dst])
    denom = logits.new_zeros((num_dst, heads)).index_add_(0, dst, shifted)
    return shifted / denom[dst]


class _RelationConv(nn.Module):
    """Multi-head attention convolution for one typed edge relation."""

    def __init__(self, src_dim: int, dst_dim: int, edge_dim: int, heads: int, head_dim: int,
                 attn_slope: float):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.attn_slope = attn_slope
        self.w_src = nn.Linear(src_dim, heads * head_dim, bias=False)
        self.w_dst = nn.Linear(dst_dim, heads * head_dim, bias=False)
        self.w_edge = nn.Linear(edge_dim, heads * head_dim, bias=False)
        self.a_src = nn.Parameter(torch.empty(heads, head_dim))
        self.a_dst = nn.Parameter(torch.empty(heads, head_dim))
        self.a_edge = nn.Parameter(torch.empty(heads, head_dim))
        for p in (self.a_src, self.a_dst, self.a_edge):
            nn.init.xavier_uniform_(p)

    def forward(
        self,
        h_src: torch.Tensor,
        h_dst: torch.Tensor,
        edge_index: torch.Tensor,
        edge_attr: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (num_dst, heads*head_dim) aggregation and (E, heads) alphas."""
        num_dst = h_dst.shape[0]
        H, D = self.heads, self.head_dim
        if edge_index.shape[1] == 0:
            out = h_dst.new_zeros(num_dst, H * D)
            return out, edge_attr.new_zeros(0, H)
        src, dst = edge_index[0], edge_index[1]
        msg = self.w_src(h_src).view(-1, H, D)[src]
        key = self.w_dst(h_dst).view(-1, H, D)[dst]
        edg = self.w_edge(edge_attr).view(-1, H, D)
        logits = F.leaky_relu(
            (msg * self.a_src).sum(-1) + (key * self.a_dst).sum(-1) + (edg * self.a_edge).sum(-1),
            negative_slope=self.attn_slope,
        )
        alpha = _edge_softmax(logits, dst, num_dst)
        weighted = (msg + edg) * alpha.unsqueeze(-1)
        out = h_dst.new_zeros(num_dst, H, D).index_add_(0, dst, weighted)
        return out.reshape(num_dst, H * D), alpha


class _HeteroLayer(nn.Module):
    """One hetero attention layer: per-relation conv, summed at destinations,
    batch norm per node type, then activation. Nodes with no incoming edges
    pass through a per-type self projection."""

    def __init__(self, in_dim: int, out_dim: int, heads: int, cfg: ModelConfig):
        super().__init__()
        assert out_dim % heads == 0
        head_dim = out_dim // heads
        self.convs = nn.ModuleDict(
            {
                rel: _RelationConv(in_dim, in_dim, edge_dim, heads, head_dim, cfg.attn_slope)
                for rel, (_src, _dst, edge_dim) in RELATIONS.items()
            }
        )
        self.self_proj = nn.ModuleDict(
            {nt: nn.Linear(in_dim, out_dim, bias=False) for nt in NODE_TYPES}
        )
        self.norm = nn.ModuleDict({nt: nn.BatchNorm1d(out_dim) for nt in NODE_TYPES})
        self.activation = cfg.activation
        self.negative_slope = cfg.negative_slope

    def forward(
        self, h: dict[str, torch.Tensor], batch: GraphBatch, collect_alpha: dict | None = None
    ) -> dict[str, torch.Tensor]:
        agg: dict[str, torch.Tensor] = {}
        indeg: dict[str, torch.Tensor] = {
            nt: torch.zeros(h[nt].shape[0], dtype=torch.long) for nt in NODE_TYPES
        }
        for rel, (src_t, dst_t, _dim) in RELATIONS.items():
            out, alpha = self.convs[rel](
                h[src_t], h[dst_t], batch.edge_index[rel], batch.edge_attr[rel]
            )
            agg[dst_t] = agg.get(dst_t, 0) + out
            ones = torch.ones(batch.edge_index[rel].shape[1], dtype=torch.long)
            indeg[dst_t] = indeg[dst_t].index_add(0, batch.edge_index[rel][1], ones)
            if collect_alpha is not None:
                collect_alpha[rel] = (alpha, batch.edge_index[rel][1])

        out: dict[str, torch.Tensor] = {}
        for nt in NODE_TYPES:
            x = agg.get(nt)
            if x is None:
                x = self.self_proj[nt](h[nt])
            else:
                isolated = indeg[nt] == 0
                if isolated.any():
                    x = torch.where(
                        isolated.unsqueeze(1), self.self_proj[nt](h[nt]), x
                    )
            x = self.norm[nt](x)
            if self.activation == "relu":
                x = F.relu(x)
            else:
                x = F.leaky_relu(x, negative_slope=self.negative_slope)
            out[nt] = x
        return out


class HeteroGAT(nn.Module):
    def __init__(self, num_classes: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        hid = cfg.hidden_dim
        self.proj = nn.ModuleDict(
            {
                "flow": nn.Linear(EXTENDED_DIM, hid),
                "packet": nn.Linear(PAYLOAD_DIM, hid),
            }
        )
        self.layer1 = _HeteroLayer(hid, hid, cfg.heads, cfg)
        self.layer2 = _HeteroLayer(hid, hid, 1, cfg)
        w0, w1 = cfg.head_widths
        self.head = nn.Sequential(
            nn.Linear(hid, w0), nn.ReLU(), nn.Linear(w0, w1), nn.ReLU(), nn.Linear(w1, num_classes)
        )

    def forward(
        self, batch: GraphBatch, collect_alpha: dict | None = None
    ) -> torch.Tensor:
        h = {
            "flow": self.proj["flow"](batch.flow_x),
            "packet": self.proj["packet"](batch.packet_x),
        }
        a1 = {} if collect_alpha is not None else None
        a2 = {} if collect_alpha is not None else None
        h = self.layer1(h, batch, a1)
        h = self.layer2(h, batch, a2)
        if collect_alpha is not None:
            collect_alpha["layer1"] = a1
            collect_alpha["layer2"] = a2

        pooled = global_mean_pool(
            torch.cat([h["flow"], h["packet"]]),
            torch.cat([batch.flow_batch, batch.packet_batch]),
            batch.num_graphs,
        )
        return F.log_softmax(self.head(pooled), dim=1)


def global_mean_pool(x: torch.Tensor, membership: torch.Tensor, num_graphs: int) -> torch.Tensor:
    """Arithmetic mean of node embeddings per graph."""
    sums = x.new_zeros(num_graphs, x.shape[1]).index_add_(0, membership, x)
    counts = x.new_zeros(num_graphs).index_add_(
        0, membership, x.new_ones(x.shape[0])
    )
    return sums / counts.unsqueeze(1)


class TrainingDiverged(RuntimeError):
    pass


class SchemaMismatch(RuntimeError):
    pass


class HeteroGATClassifier(BaseEstimator):
    """sklearn-style estimator around the hetero-GAT.

    fit() consumes HeteroGraphs (labels from ``graph.label`` unless given
    explicitly); predict/predict_proba run in eval mode. All stochastic
    choices derive from ``seed``.
    """

    def __init__(
        self,
        hidden_dim: int = 64,
        heads: int = 4,
        head_widths: tuple[int, int] = (32, 16),
        negative_slope: float = 0.01,
        attn_slope: float = 0.2,
        activation: str = "leaky_relu",
        dtype: str = "float32",
        epochs: int = 100,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        seed: int = 0,
        val_fraction: float = 0.15,
        patience: int = 10,
    ):
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.head_widths = head_widths
        self.negative_slope = negative_slope
        self.attn_slope = attn_slope
        self.activation = activation
        self.dtype = dtype
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.val_fraction = val_fraction
        self.patience = patience

    # -- internals --

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            head_widths=tuple(self.head_widths),
            negative_slope=self.negative_slope,
            attn_slope=self.attn_slope,
            activation=self.activation,
            dtype=self.dtype,
        )

    def _collate_indices(self, tensors, labels, idx) -> GraphBatch:
        sub = [tensors[i] for i in idx]
        y = labels[idx] if labels is not None else None
        return self.make_batch_from_tensors(sub, y)

    @staticmethod
    def make_batch_from_tensors(tensors, labels=None) -> GraphBatch:
        return collate(tensors, labels)

    def make_batch(self, graphs: list[HeteroGraph], with_labels: bool = False) -> GraphBatch:
        dtype = self._model_config().torch_dtype()
        tensors = [graph_tensors(g, self.normalizer_, dtype) for g in graphs]
        y = None
        if with_labels:
            y = torch.tensor([self.class_to_index_[g.label] for g in graphs], dtype=torch.long)
        return collate(tensors, y)

    # -- estimator API --

    def fit(self, graphs: list[HeteroGraph], labels: list[str] | None = None):
        if labels is None:
            labels = [g.label for g in graphs]
        if any(lbl is None for lbl in labels):
            raise ValueError("all training graphs must carry a label")
        self.classes_ = sorted(set(labels))
        if len(self.classes_) < 2:
            raise ValueError(f"training requires >= 2 classes, got {self.classes_}")
        self.class_to_index_ = {c: i for i, c in enumerate(self.classes_)}

        torch.manual_seed(self.seed)
        torch.set_num_threads(max(torch.get_num_threads(), 1))
        rng = np.random.RandomState(self.seed)

        cfg = self._model_config()
        dtype = cfg.torch_dtype()
        y_all = torch.tensor([self.class_to_index_[lbl] for lbl in labels], dtype=torch.long)

        order = rng.permutation(len(graphs))
        n_val = int(round(len(graphs) * self.val_fraction))
        val_idx, train_idx = order[:n_val], order[n_val:]
        if len(train_idx) == 0:
            raise ValueError("training set empty after validation split")

        self.normalizer_ = Normalizer().fit([graphs[i] for i in train_idx])
        tensors = [graph_tensors(g, self.normalizer_, dtype) for g in graphs]

        model = HeteroGAT(len(self.classes_), cfg).to(dtype)
        opt = torch.optim.Adam(model.parameters(), lr=self.learning_rate)

        val_batch = (
            self._collate_indices(tensors, y_all, val_idx) if len(val_idx) else None
        )

        best_f1 = -1.0
        best_state = None
        patience_left = self.patience
        self.training_log_ = []
        for epoch in range(self.epochs):
            model.train()
            perm = rng.permutation(train_idx)
            total_loss = 0.0
            n_batches = 0
            for start in range(0, len(perm), self.batch_size):
                idx = perm[start : start + self.batch_size]
                batch = self._collate_indices(tensors, y_all, idx)
                opt.zero_grad()
                out = model(batch)
                loss = F.nll_loss(out, batch.y)
                if not torch.isfinite(loss):
                    grad_norms = {
                        n: float(p.grad.norm()) for n, p in model.named_parameters()
                        if p.grad is not None
                    }
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} (lr={self.learning_rate}, "
                        f"grad norms={grad_norms})"
                    )
                loss.backward()
                opt.step()
                total_loss += loss.item()
                n_batches += 1

            model.eval()
            if val_batch is not None:
                with torch.no_grad():
                    val_pred = model(val_batch).argmax(dim=1)
                val_f1 = _macro_f1(val_batch.y.numpy(), val_pred.numpy(), len(self.classes_))
            else:
                val_f1 = float("nan")
            self.training_log_.append(
                {"epoch": epoch, "train_loss": total_loss / max(n_batches, 1), "val_macro_f1": val_f1}
            )
            if val_batch is None or val_f1 > best_f1:
                best_f1 = val_f1
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
                patience_left = self.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    break

        if best_state is not None:
            model.load_state_dict(best_state)
        model.eval()
        self.model_ = model
        self.final_loss_ = self.training_log_[-1]["train_loss"]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("classifier is not fitted")

    def predict_log_proba(self, graphs: list[HeteroGraph]) -> np.ndarray:
        self._check_fitted()
        self.model_.eval()
        with torch.no_grad():
            out = self.model_(self.make_batch(graphs))
        return out.numpy()

    def predict_proba(self, graphs: list[HeteroGraph]) -> np.ndarray:
        return np.exp(self.predict_log_proba(graphs))

    def predict(self, graphs: list[HeteroGraph]) -> list[str]:
        log_probs = self.predict_log_proba(graphs)
        # np.argmax takes the first maximum: lowest class index wins ties
        return [self.classes_[i] for i in np.argmax(log_probs, axis=1)]

    def predict_one(self, g: HeteroGraph) -> tuple[str, np.ndarray]:
        probs = self.predict_proba([g])[0]
        return self.classes_[int(np.argmax(probs))], probs

    def input_gradient(self, g: HeteroGraph, target_class: int) -> dict[str, np.ndarray]:
        """Gradient of the target-class log-probability w.r.t. every
        (normalized) input feature of the graph."""
        self._check_fitted()
        self.model_.eval()
        dtype = self._model_config().torch_dtype()
        tensors = [t.clone().requires_grad_(True) for t in graph_tensors(g, self.normalizer_, dtype)]
        batch = collate([tuple(tensors)])
        out = self.model_(batch)
        grads = torch.autograd.grad(out[0, target_class], tensors, allow_unused=True)
        names = ["flow", "payload", "contain", "link"]
        return {
            name: (grad.detach().numpy() if grad is not None else np.zeros(t.shape))
            for name, t, grad in zip(names, tensors, grads)
        }

    # -- checkpointing --

    def save(self, path: str | Path) -> None:
        self._check_fitted()
        torch.save(
            {
                "checkpoint_version": CHECKPOINT_VERSION,
                "graph_schema_version": GRAPH_SCHEMA_VERSION,
                "params": self.get_params(),
                "classes": self.classes_,
                "normalizer": self.normalizer_.to_dict(),
                "state_dict": self.model_.state_dict(),
                "training_log": getattr(self, "training_log_", []),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "HeteroGATClassifier":
        ckpt = torch.load(path, weights_only=False)
        if ckpt.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise SchemaMismatch(
                f"checkpoint version {ckpt.get('checkpoint_version')!r}, "
                f"expected {CHECKPOINT_VERSION!r}"
            )
        if ckpt.get("graph_schema_version") != GRAPH_SCHEMA_VERSION:
            raise SchemaMismatch("checkpoint was trained against a different graph schema")
        clf = cls(**ckpt["params"])
        clf.classes_ = list(ckpt["classes"])
        clf.class_to_index_ = {c: i for i, c in enumerate(clf.classes_)}
        clf.normalizer_ = Normalizer.from_dict(ckpt["normalizer"])
        model = HeteroGAT(len(clf.classes_), clf._model_config()).to(clf._model_config().torch_dtype())
        model.load_state_dict(ckpt["state_dict"])
        model.eval()
        clf.model_ = model
        clf.training_log_ = ckpt.get("training_log", [])
        return clf


def _macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    scores = []
    for c in range(num_classes):
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))
