"""Stage orchestration: extract -> featurize -> build-graphs -> prepare ->
train -> infer -> evaluate -> explain, with content-hash skipping.

Each stage records sha256 hashes of its inputs and outputs in
``manifest.json``; a stage re-runs only when a hash is missing or stale,
or when forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds
from .attribution import attribution_report, integrated_gradients
from .flows import (
    FlowAssembler,
    read_flows_jsonl,
    write_features_csv,
    write_flows_jsonl,
)
from .graphs import build_graph, read_corpus, write_corpus
from .metrics import evaluate
from .model import HeteroGATClassifier
from .explain import LlmClient, LlmConfig, compose_explanation
from .packets import ParseStats, read_pcap
from .temporal import DEFAULT_WINDOW_S, TemporalFeaturizer

log = logging.getLogger(__name__)

STAGES = ("extract", "featurize", "build-graphs", "prepare", "train", "infer", "evaluate", "explain")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class PipelineConfig:
    out_dir: Path
    pcaps: list[tuple[Path, str]]  # (path, provenance label)
    max_packets: int = 20
    idle_timeout_s: float = 120.0
    window_s: float = DEFAULT_WINDOW_S
    mac_filter: bool = False
    test_cap: int = 4000
    train_target: int = 20000
    test_fraction: float = 0.2
    seed: int = 0
    model_params: dict | None = None
    explain_count: int = 3
    explain_steps: int = 50
    llm_base_url: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text())
        return cls(
            out_dir=Path(raw["out_dir"]),
            pcaps=[(Path(p["path"]), p["label"]) for p in raw["pcaps"]],
            max_packets=raw.get("max_packets", 20),
            idle_timeout_s=raw.get("idle_timeout_s", 120.0),
            window_s=raw.get("window_s", DEFAULT_WINDOW_S),
            mac_filter=raw.get("mac_filter", False),
            test_cap=raw.get("test_cap", 4000),
            train_target=raw.get("train_target", 20000),
            test_fraction=raw.get("test_fraction", 0.2),
            seed=raw.get("seed", 0),
            model_params=raw.get("model", None),
            explain_count=raw.get("explain_count", 3),
            explain_steps=raw.get("explain_steps", 50),
            llm_base_url=raw.get("llm_base_url", None),
        )


class PipelineRunner:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = (
            json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}
        )
        self.skipped: list[str] = []
        self.ran: list[str] = []

    # paths
    @property
    def flows_path(self) -> Path:
        return self.out / "flows.jsonl"

    @property
    def features_csv(self) -> Path:
        return self.out / "features.csv"

    @property
    def extended_path(self) -> Path:
        return self.out / "extended.jsonl"

    @property
    def corpus_path(self) -> Path:
        return self.out / "corpus.xgg"

    @property
    def train_corpus(self) -> Path:
        return self.out / "train.xgg"

    @property
    def test_corpus(self) -> Path:
        return self.out / "test.xgg"

    @property
    def model_path(self) -> Path:
        return self.out / "model.pt"

    @property
    def preds_path(self) -> Path:
        return self.out / "preds.jsonl"

    @property
    def eval_path(self) -> Path:
        return self.out / "eval.json"

    def _up_to_date(self, stage: str, inputs: list[Path], outputs: list[Path]) -> bool:
        rec = self.manifest.get(stage)
        if rec is None:
            return False
        if not all(p.exists() for p in outputs):
            return False
        for p in inputs + outputs:
            if rec.get("hashes", {}).get(str(p)) != _sha256(p):
                return False
        return True

    def _record(self, stage: str, inputs: list[Path], outputs: list[Path]) -> None:
        self.manifest[stage] = {"hashes": {str(p): _sha256(p) for p in inputs + outputs}}
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1))

    def _stage(self, name: str, inputs: list[Path], outputs: list[Path], fn, force: bool) -> None:
        if not force and self._up_to_date(name, inputs, outputs):
            log.info("stage %s up to date, skipping", name)
            self.skipped.append(name)
            return
        try:
            fn()
        except Exception as exc:
            # quarantine partial outputs so a rerun cannot consume them
            for p in outputs:
                if p.exists():
                    p.rename(p.with_suffix(p.suffix + ".partial"))
            raise StageFailure(name, exc) from exc
        self._record(name, inputs, outputs)
        self.ran.append(name)

    # stage bodies

    def _extract(self) -> None:
        flows = []
        for pcap_path, label in self.cfg.pcaps:
            asm = FlowAssembler(
                max_packets=self.cfg.max_packets, idle_timeout_s=self.cfg.idle_timeout_s
            )
            stats = ParseStats()
            for pkt in read_pcap(pcap_path, stats):
                for flow in asm.process(pkt):
                    flow.label = label
                    flows.append(flow)
            for flow in asm.close_all():
                flow.label = label
                flows.append(flow)
            log.info(
                "%s: %d packets accepted, %d non-IP skipped, %d malformed",
                pcap_path, stats.accepted, stats.skipped_non_ip, stats.malformed,
            )
        if self.cfg.mac_filter:
            flows, fstats = ds.filter_and_label(flows)
            log.info("MAC filter: %s", fstats)
        flows.sort(key=lambda f: f.end_time)
        write_flows_jsonl(self.flows_path, flows)
        write_features_csv(self.features_csv, flows)

    def _featurize(self) -> None:
        featurizer = TemporalFeaturizer(window_s=self.cfg.window_s)
        with open(self.extended_path, "w") as fh:
            fh.write(json.dumps({"window_s": self.cfg.window_s}) + "\n")
            for i, flow in enumerate(read_flows_jsonl(self.flows_path)):
                ext = featurizer.update(flow)
                fh.write(json.dumps({"index": i, "extended": ext.tolist()}) + "\n")

    def _build_graphs(self) -> None:
        with open(self.extended_path) as fh:
            fh.readline()
            extended = [json.loads(line)["extended"] for line in fh if line.strip()]

        def gen():
            for flow, ext in zip(read_flows_jsonl(self.flows_path), extended):
                yield build_graph(flow, np.array(ext))

        write_corpus(self.corpus_path, gen())

    def _prepare(self) -> None:
        graphs = list(read_corpus(self.corpus_path))
        labels = [g.label for g in graphs]
        plan = ds.SplitPlan(
            test_cap=self.cfg.test_cap,
            train_target=self.cfg.train_target,
            test_fraction=self.cfg.test_fraction,
            seed=self.cfg.seed,
        )
        split = ds.split_and_balance(labels, plan)
        write_corpus(self.train_corpus, (graphs[i] for i in split.train_indices))
        write_corpus(self.test_corpus, (graphs[i] for i in split.test_indices))

    def _train(self) -> None:
        graphs = list(read_corpus(self.train_corpus))
        params = dict(self.cfg.model_params or {})
        params.setdefault("seed", self.cfg.seed)
        clf = HeteroGATClassifier(**params)
        clf.fit(graphs)
        clf.save(self.model_path)
        (self.out / "training_log.json").write_text(json.dumps(clf.training_log_, indent=1))

    def _infer(self) -> None:
        clf = HeteroGATClassifier.load(self.model_path)
        with open(self.preds_path, "w") as fh:
            for g in read_corpus(self.test_corpus):
                pred, probs = clf.predict_one(g)
                fh.write(
                    json.dumps(
                        {
                            "graph_id": g.graph_id,
                            "label": g.label,
                            "prediction": pred,
                            "probabilities": {c: float(p) for c, p in zip(clf.classes_, probs)},
                        }
                    )
                    + "\n"
                )

    def _evaluate(self) -> None:
        preds, labels = [], []
        with open(self.preds_path) as fh:
            for line in fh:
                rec = json.loads(line)
                preds.append(rec["prediction"])
                labels.append(rec["label"])
        report = evaluate(preds, labels)
        self.eval_path.write_text(json.dumps(report.to_dict(), indent=1))

    def _explain(self) -> None:
        clf = HeteroGATClassifier.load(self.model_path)
        client = LlmClient(LlmConfig(base_url=self.cfg.llm_base_url))
        exp_dir = self.out / "explanations"
        exp_dir.mkdir(exist_ok=True)
        for i, g in enumerate(read_corpus(self.test_corpus)):
            if i >= self.cfg.explain_count:
                break
            pred, probs = clf.predict_one(g)
            att = integrated_gradients(
                clf, g, target_class=clf.class_to_index_[pred], steps=self.cfg.explain_steps
            )
            report = compose_explanation(
                pred,
                {c: float(p) for c, p in zip(clf.classes_, probs)},
                att,
                g.flow_features,
                g.packet_payloads,
                client=client,
            )
            (exp_dir / f"explanation_{i}.json").write_text(json.dumps(report.to_dict(), indent=1))
            (exp_dir / f"explanation_{i}.md").write_text(report.to_markdown())
            (exp_dir / f"attribution_{i}.json").write_text(
                json.dumps(attribution_report(att, g, pred))
            )

    def run(self, force: bool = False, stages: list[str] | None = None) -> None:
        wanted = set(stages or STAGES)
        pcap_inputs = [p for p, _ in self.cfg.pcaps]
        plan = [
            ("extract", pcap_inputs, [self.flows_path, self.features_csv], self._extract),
            ("featurize", [self.flows_path], [self.extended_path], self._featurize),
            (
                "build-graphs",
                [self.flows_path, self.extended_path],
                [self.corpus_path],
                self._build_graphs,
            ),
            ("prepare", [self.corpus_path], [self.train_corpus, self.test_corpus], self._prepare),
            ("train", [self.train_corpus], [self.model_path], self._train),
            ("infer", [self.model_path, self.test_corpus], [self.preds_path], self._infer),
            ("evaluate", [self.preds_path], [self.eval_path], self._evaluate),
            ("explain", [self.model_path, self.test_corpus], [], self._explain),
        ]
        for name, inputs, outputs, fn in plan:
            if name in wanted:
                self._stage(name, inputs, outputs, fn, force)
