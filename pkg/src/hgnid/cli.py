"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import dataset as ds
from .attribution import attribution_report, integrated_gradients
from .explain import LlmClient, LlmConfig, compose_explanation
from .flows import (
    FlowAssembler,
    read_flows_jsonl,
    write_features_csv,
    write_flows_jsonl,
)
from .graphs import GraphFormatError, build_graph, read_corpus, write_corpus
from .metrics import evaluate as evaluate_metrics
from .model import HeteroGATClassifier, SchemaMismatch
from .packets import ParseStats, PcapError, read_pcap
from .pipeline import PipelineConfig, PipelineRunner, StageFailure
from .temporal import DEFAULT_WINDOW_S, OrderingError, TemporalFeaturizer

log = logging.getLogger("hgnid")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool):
    """Flow/packet fusion intrusion detection toolkit."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.option("--pcap", "pcap_path", required=True, type=click.Path(path_type=Path),
              help="pcap/pcapng file or a directory of captures.")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--max-packets", default=20, show_default=True)
@click.option("--idle-timeout", default=120.0, show_default=True, help="Seconds.")
@click.option("--label", default=None, help="Provenance class label for all flows.")
def extract(pcap_path: Path, out_dir: Path, max_packets: int, idle_timeout: float,
            label: str | None):
    """Assemble flows from raw captures and dump features."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(pcap_path.glob("*.pcap*")) if pcap_path.is_dir() else [pcap_path]
    if not paths:
        raise click.UsageError(f"no captures found under {pcap_path}")
    flows = []
    for p in paths:
        asm = FlowAssembler(max_packets=max_packets, idle_timeout_s=idle_timeout)
        stats = ParseStats()
        for pkt in read_pcap(p, stats):
            flows.extend(asm.process(pkt))
        flows.extend(asm.close_all())
        click.echo(
            f"{p}: accepted={stats.accepted} non_ip={stats.skipped_non_ip} "
            f"malformed={stats.malformed}"
        )
    if label:
        for f in flows:
            f.label = label
    flows.sort(key=lambda f: f.end_time)
    n = write_flows_jsonl(out_dir / "flows.jsonl", flows)
    write_features_csv(out_dir / "features.csv", flows)
    click.echo(f"wrote {n} flows to {out_dir / 'flows.jsonl'}")


@cli.command()
@click.option("--flows", "flows_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--window", default=DEFAULT_WINDOW_S, show_default=True, help="Seconds.")
@click.option("--checkpoint", default=None, type=click.Path(path_type=Path),
              help="Write the temporal state checkpoint here.")
def featurize(flows_path: Path, out_path: Path, window: float, checkpoint: Path | None):
    """Compute rolling temporal features and extended 92-entry vectors."""
    featurizer = TemporalFeaturizer(window_s=window)
    count = 0
    with open(out_path, "w") as fh:
        fh.write(json.dumps({"window_s": window}) + "\n")
        for i, flow in enumerate(read_flows_jsonl(flows_path)):
            ext = featurizer.update(flow)
            fh.write(json.dumps({"index": i, "extended": ext.tolist()}) + "\n")
            count += 1
    if checkpoint:
        featurizer.state.save(checkpoint)
    click.echo(f"wrote {count} extended feature rows to {out_path}")


@cli.command("build-graphs")
@click.option("--flows", "flows_path", required=True, type=click.Path(path_type=Path))
@click.option("--extended", "extended_path", default=None, type=click.Path(path_type=Path),
              help="Extended features from `featurize`; computed on the fly if omitted.")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--window", default=DEFAULT_WINDOW_S, show_default=True)
def build_graphs(flows_path: Path, extended_path: Path | None, out_path: Path, window: float):
    """Build the heterogeneous graph corpus from flows."""
    if extended_path:
        with open(extended_path) as fh:
            fh.readline()
            extended = [np.array(json.loads(line)["extended"]) for line in fh if line.strip()]

        def gen():
            for flow, ext in zip(read_flows_jsonl(flows_path), extended):
                yield build_graph(flow, ext)
    else:
        featurizer = TemporalFeaturizer(window_s=window)

        def gen():
            for flow in read_flows_jsonl(flows_path):
                yield build_graph(flow, featurizer.update(flow))

    n = write_corpus(out_path, gen())
    click.echo(f"wrote {n} graphs to {out_path}")


@cli.command("prepare-dataset")
@click.option("--corpus", "corpus_path", type=click.Path(path_type=Path), default=None)
@click.option("--flows", "flows_path", type=click.Path(path_type=Path), default=None,
              help="Apply the attacker-MAC filter to labeled flows instead.")
@click.option("--train-out", type=click.Path(path_type=Path), default=None)
@click.option("--test-out", type=click.Path(path_type=Path), default=None)
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None,
              help="Filtered flows output (flow mode).")
@click.option("--test-cap", default=4000, show_default=True)
@click.option("--train-target", default=20000, show_default=True)
@click.option("--test-fraction", default=0.2, show_default=True)
@click.option("--seed", default=0, show_default=True)
def prepare_dataset(corpus_path, flows_path, train_out, test_out, out_path,
                    test_cap, train_target, test_fraction, seed):
    """Filter/label flows or split a graph corpus into balanced train/test."""
    if flows_path:
        if not out_path:
            raise click.UsageError("--flows mode requires --out")
        flows = list(read_flows_jsonl(flows_path))
        kept, stats = ds.filter_and_label(flows)
        write_flows_jsonl(out_path, kept)
        click.echo(
            f"retained {stats.retained_attack} attack + {stats.retained_benign} benign, "
            f"dropped {stats.dropped}, quarantined {stats.quarantined}"
        )
        return
    if not corpus_path or not train_out or not test_out:
        raise click.UsageError("corpus mode requires --corpus, --train-out and --test-out")
    graphs = list(read_corpus(corpus_path))
    plan = ds.SplitPlan(
        test_cap=test_cap, train_target=train_target, test_fraction=test_fraction, seed=seed
    )
    split = ds.split_and_balance([g.label for g in graphs], plan)
    write_corpus(train_out, (graphs[i] for i in split.train_indices))
    write_corpus(test_out, (graphs[i] for i in split.test_indices))
    click.echo(
        f"train={len(split.train_indices)} (oversampled {len(split.oversampled)}), "
        f"test={len(split.test_indices)}"
    )


@cli.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "model_path", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", default=None, type=click.Path(path_type=Path),
              help="JSON file of classifier parameters.")
@click.option("--epochs", default=None, type=int)
@click.option("--seed", default=None, type=int)
def train(corpus_path: Path, model_path: Path, config_path: Path | None,
          epochs: int | None, seed: int | None):
    """Train the hetero-GAT classifier on a graph corpus."""
    params = json.loads(config_path.read_text()) if config_path else {}
    if epochs is not None:
        params["epochs"] = epochs
    if seed is not None:
        params["seed"] = seed
    clf = HeteroGATClassifier(**params)
    clf.fit(list(read_corpus(corpus_path)))
    clf.save(model_path)
    last = clf.training_log_[-1]
    click.echo(
        f"trained {len(clf.classes_)} classes; final loss {last['train_loss']:.4f}, "
        f"val macro F1 {last['val_macro_f1']:.4f}"
    )


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(path_type=Path))
@click.option("--graphs", "corpus_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def infer(model_path: Path, corpus_path: Path, out_path: Path):
    """Predict classes for every graph in a corpus (JSONL output)."""
    clf = HeteroGATClassifier.load(model_path)
    n = 0
    with open(out_path, "w") as fh:
        for g in read_corpus(corpus_path):
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
            n += 1
    click.echo(f"wrote {n} predictions to {out_path}")


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(path_type=Path))
@click.option("--graphs", "corpus_path", required=True, type=click.Path(path_type=Path))
@click.option("--graph", "graph_index", default=0, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--llm-url", default=None, help="OpenAI-compatible base URL; offline if omitted.")
def explain(model_path: Path, corpus_path: Path, graph_index: int, steps: int,
            out_dir: Path, llm_url: str | None):
    """Attribute a prediction and generate the human-readable explanation."""
    clf = HeteroGATClassifier.load(model_path)
    graph = None
    for i, g in enumerate(read_corpus(corpus_path)):
        if i == graph_index:
            graph = g
            break
    if graph is None:
        raise click.UsageError(f"graph index {graph_index} out of range")
    pred, probs = clf.predict_one(graph)
    att = integrated_gradients(clf, graph, target_class=clf.class_to_index_[pred], steps=steps)
    report = compose_explanation(
        pred,
        {c: float(p) for c, p in zip(clf.classes_, probs)},
        att,
        graph.flow_features,
        graph.packet_payloads,
        client=LlmClient(LlmConfig(base_url=llm_url)),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "explanation.json").write_text(json.dumps(report.to_dict(), indent=1))
    (out_dir / "explanation.md").write_text(report.to_markdown())
    (out_dir / "attribution.json").write_text(json.dumps(attribution_report(att, graph, pred)))
    click.echo(f"predicted {pred}; completeness gap {att.completeness_gap:.3g}")


@cli.command()
@click.option("--preds", "preds_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_path", default=None, type=click.Path(path_type=Path))
def evaluate(preds_path: Path, out_path: Path | None):
    """Score predictions (JSONL with `prediction` and `label` fields)."""
    preds, labels = [], []
    with open(preds_path) as fh:
        for line in fh:
            rec = json.loads(line)
            preds.append(rec["prediction"])
            labels.append(rec["label"])
    report = evaluate_metrics(preds, labels)
    text = json.dumps(report.to_dict(), indent=1)
    if out_path:
        out_path.write_text(text)
    click.echo(f"macro F1 = {report.macro_f1:.4f}")
    click.echo(text)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--force", is_flag=True, help="Re-run stages even if up to date.")
@click.option("--stages", default=None, help="Comma-separated subset of stages.")
def run(config_path: Path, force: bool, stages: str | None):
    """Run the full pipeline from a JSON config file."""
    cfg = PipelineConfig.from_file(config_path)
    runner = PipelineRunner(cfg)
    runner.run(force=force, stages=stages.split(",") if stages else None)
    click.echo(f"ran: {runner.ran or 'nothing'}; skipped: {runner.skipped or 'nothing'}")


def main() -> int:
    try:
        cli(standalone_mode=False)
        return 0
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except (PcapError, GraphFormatError, OrderingError, SchemaMismatch, StageFailure,
            FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        click.echo(f"internal error: {exc}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
