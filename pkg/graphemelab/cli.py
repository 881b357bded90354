#!/usr/bin/env python3
"""
graphemelab CLI: run the embedding study stage by stage inside a run directory.

Every subcommand reads its inputs from and writes its outputs to --out DIR,
then writes manifest_<command>.json (resolved config, seed, file digests,
duration). The result is printed to stdout as JSON.

    gen-corpus -> corpus.tsv
    split      -> splits.tsv
    train-tts  -> tts.gel, tts_loss.tsv
    extract-emb-> embeddings.tsv
    train-g2p  -> probe_<mode>_<split>.gel, probe_curve_<mode>_<split>.tsv
    eval-per   -> per_<mode>_<split>.tsv
    table2     -> table2.tsv (+ the four probe checkpoints)
    tsne       -> tsne.tsv
    purity     -> purity.tsv
    swap       -> swap.tsv
    report     -> report.txt

Usage:
    graphemelab gen-corpus --out run --set n=500
    graphemelab table2 --out run --config lab.cfg

Exit codes:
  0 - Success
  1 - Domain error (message printed verbatim)
  2 - Usage or configuration error
"""

import argparse
import hashlib
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from graphemelab import __version__
from graphemelab.analysis import (
    TsneConfig,
    export_table,
    highlight_groups,
    knn_purity,
    one_hot_records,
    punctuation_similarity,
    read_table,
    subsample_records,
    swap_experiment,
    tsne_embed,
)
from graphemelab.checkpoint import load_checkpoint, save_checkpoint
from graphemelab.config import Config, load_config
from graphemelab.corpus import (
    Corpus,
    build_vocabs,
    generate_corpus,
    read_corpus,
    read_splits,
    split_corpus,
    write_corpus,
    write_splits,
    write_text_atomic,
)
from graphemelab.errors import ConfigError, IoFailure, LabError, MissingInput
from graphemelab.g2p import (
    ProbeConfig,
    ProbeMode,
    ProbeModel,
    evaluate_probe,
    run_table2,
    train_probe,
)
from graphemelab.tts import (
    EncoderModel,
    TtsConfig,
    attention_monotonicity,
    build_acoustic_spec,
    build_frames,
    extract_embeddings,
    models_from_tensors,
    models_to_tensors,
    train_proxy,
)

LOG_FORMAT = "[%(asctime)s] [%(funcName)s] %(levelname)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
MONOTONICITY_UTTERANCES = 50
PIPELINE_STAGES = ("gen-corpus", "split", "train-tts", "extract-emb", "table2", "tsne", "purity", "swap")
PIPELINE_BUDGET_SECONDS = 1800


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_tsv(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    lines = ["\t".join(header)]
    lines.extend("\t".join(fmt(v) if isinstance(v, float) else str(v) for v in row) for row in rows)
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_tsv(path: Path, name: str) -> list[dict[str, str]]:
    if not path.exists():
        raise MissingInput(name)
    lines = [line for line in path.read_text(encoding="utf-8").split("\n") if line]
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


# ============================================================================
# Run context
# ============================================================================

@dataclass
class RunContext:
    run_dir: Path
    config: Config
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.get_int("seed")

    def input(self, filename: str, name: str) -> Path:
        path = self.run_dir / filename
        if not path.exists():
            raise MissingInput(name)
        self.inputs.append(path)
        return path

    def output(self, filename: str) -> Path:
        path = self.run_dir / filename
        self.outputs.append(path)
        return path

    def corpus(self) -> Corpus:
        corpus = read_corpus(self.input("corpus.tsv", "corpus"))
        return read_splits(corpus, self.input("splits.tsv", "splits"))

    def encoder(self) -> EncoderModel:
        encoder, _ = models_from_tensors(load_checkpoint(self.input("tts.gel", "tts")))
        return encoder

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            epochs=self.config.get_int("probe_epochs"),
            lr=self.config.get_float("probe_lr"),
            seed=self.seed,
            mode=self.config.get_str("probe_mode"),
            split=self.config.get_str("probe_split"),
            hidden=self.config.get_int("probe_hidden"),
        )


def tts_config(config: Config) -> TtsConfig:
    return TtsConfig(
        embed_dim=config.get_int("tts_embed_dim"),
        conv_k=config.get_int("tts_conv_k"),
        conv_channels=config.get_int("tts_conv_channels"),
        hidden=config.get_int("tts_hidden"),
        decoder_hidden=config.get_int("tts_decoder_hidden"),
        attention_dim=config.get_int("tts_attention_dim"),
        reduction=config.get_int("tts_reduction"),
        frame_width=config.get_int("frame_width"),
        lr=config.get_float("tts_lr"),
        epochs=config.get_int("tts_epochs"),
        self_attention=config.get_bool("tts_self_attention"),
        clip_norm=config.get_float("tts_clip_norm"),
    )


# ============================================================================
# Subcommands
# ============================================================================

def cmd_gen_corpus(ctx: RunContext) -> None:
    corpus = generate_corpus(ctx.config.get_int("n"), ctx.seed)
    write_corpus(corpus, ctx.output("corpus.tsv"))
    ctx.metadata["utterances"] = len(corpus.utterances)


def cmd_split(ctx: RunContext) -> None:
    corpus = read_corpus(ctx.input("corpus.tsv", "corpus"))
    corpus = split_corpus(corpus, ctx.config.get_int("test_n"), ctx.config.get_int("dev_n"), ctx.seed)
    graphemes, phonemes = build_vocabs(corpus)
    write_splits(corpus, ctx.output("splits.tsv"))
    ctx.metadata.update({name: len(ids) for name, ids in corpus.splits.items()})
    ctx.metadata["graphemes"] = len(graphemes)
    ctx.metadata["phonemes"] = len(phonemes)


def cmd_train_tts(ctx: RunContext) -> None:
    config = tts_config(ctx.config)
    corpus = ctx.corpus()
    graphemes, phonemes = build_vocabs(corpus)
    spec = build_acoustic_spec(phonemes, config.frame_width, ctx.seed)
    frames = build_frames(corpus, spec, ctx.seed)
    encoder, decoder, curve = train_proxy(corpus, frames, graphemes, config, ctx.seed)
    save_checkpoint(models_to_tensors(encoder, decoder), ctx.output("tts.gel"))
    write_tsv(ctx.output("tts_loss.tsv"), ["epoch", "loss"],
              [[epoch + 1, loss] for epoch, loss in enumerate(curve)])
    dev = [u for u in corpus.split("dev") if u.id in frames][:MONOTONICITY_UTTERANCES]
    examples = [(graphemes.encode(u.graphemes), frames[u.id]) for u in dev]
    ctx.metadata["final_loss"] = curve[-1] if curve else None
    ctx.metadata["attention_monotonicity"] = attention_monotonicity(encoder, decoder, examples)


def cmd_extract_emb(ctx: RunContext) -> None:
    corpus = ctx.corpus()
    graphemes, _ = build_vocabs(corpus)
    records = extract_embeddings(ctx.encoder(), corpus, ctx.config.get_str("embed_split"), graphemes)
    export_table(records, ctx.output("embeddings.tsv"))
    ctx.metadata["records"] = len(records)


def cmd_train_g2p(ctx: RunContext) -> None:
    config = ctx.probe_config()
    corpus = ctx.corpus()
    graphemes, phonemes = build_vocabs(corpus)
    encoder = ctx.encoder() if config.mode == ProbeMode.EMBEDDING else None
    run = train_probe(corpus, config, graphemes, phonemes, encoder)
    tag = f"{config.mode}_{config.split}"
    save_checkpoint(run.model.to_tensors(), ctx.output(f"probe_{tag}.gel"))
    write_tsv(ctx.output(f"probe_curve_{tag}.tsv"), ["epoch", "dev_per"],
              [[epoch + 1, value] for epoch, value in enumerate(run.curve)])
    ctx.metadata.update({"skipped": run.skipped, "final_dev_per": run.curve[-1] if run.curve else None})


def cmd_eval_per(ctx: RunContext) -> None:
    config = ctx.probe_config()
    corpus = ctx.corpus()
    graphemes, phonemes = build_vocabs(corpus)
    tag = f"{config.mode}_{config.split}"
    probe = ProbeModel.from_tensors(load_checkpoint(ctx.input(f"probe_{tag}.gel", f"probe_{tag}")))
    encoder = ctx.encoder() if probe.mode == ProbeMode.EMBEDDING else None
    evaluation = evaluate_probe(probe, corpus, "test", graphemes, phonemes, encoder)
    write_tsv(ctx.output(f"per_{tag}.tsv"), ["id", "reference", "hypothesis", "per"],
              [[r.utterance_id, " ".join(r.reference), " ".join(r.hypothesis), r.rate]
               for r in evaluation.rows])
    ctx.metadata.update({"per_micro": evaluation.summary.micro, "per_macro": evaluation.summary.macro})


def cmd_table2(ctx: RunContext) -> None:
    base = ctx.probe_config()
    corpus = ctx.corpus()
    graphemes, phonemes = build_vocabs(corpus)
    result = run_table2(corpus, ctx.encoder(), graphemes, phonemes, base)
    rows = []
    for cell in result.cells:
        tag = f"{cell.mode}_{cell.split}"
        save_checkpoint(cell.run.model.to_tensors(), ctx.output(f"probe_{tag}.gel"))
        rows.append([cell.mode.value, cell.split.value, cell.evaluation.summary.micro, cell.skipped,
                     cell.evaluation.summary.macro, result.p_values[cell.split]])
        ctx.metadata[f"per_{tag}"] = cell.evaluation.summary.micro
    write_tsv(ctx.output("table2.tsv"),
              ["mode", "train_split", "per", "skipped", "per_macro", "p_value"], rows)


def _tsne_perplexity(requested: float, count: int) -> float:
    limit = (count - 1) / 3.0
    if requested >= limit:
        if limit <= 1.0:
            raise ConfigError(f"t-SNE needs more points than {count} for any valid perplexity")
        logging.warning(f"[graphemelab] perplexity {requested} capped to {limit:.3f} for {count} points")
        return limit
    return requested


def cmd_tsne(ctx: RunContext) -> None:
    config = TsneConfig(
        perplexity=ctx.config.get_float("tsne_perplexity"),
        iterations=ctx.config.get_int("tsne_iterations"),
        learning_rate=ctx.config.get_float("tsne_learning_rate"),
        seed=ctx.seed,
    )
    records, _ = read_table(ctx.input("embeddings.tsv", "embeddings"))
    records = subsample_records(records, ctx.config.get_int("tsne_max_points"), ctx.seed)
    config = replace(config, perplexity=_tsne_perplexity(config.perplexity, len(records)))
    result = tsne_embed(np.stack([r.vector for r in records]), config)
    labels = ["other"] * len(records)
    for name, indices in highlight_groups(records).items():
        if name == "all":
            continue
        for i in indices:
            labels[i] = name
    export_table(records, ctx.output("tsne.tsv"), result.points, ("x", "y"), labels)
    ctx.metadata.update({"points": len(records), "final_kl": result.kl_history[-1],
                         "perplexity": config.perplexity})


def cmd_purity(ctx: RunContext) -> None:
    corpus = ctx.corpus()
    graphemes, _ = build_vocabs(corpus)
    records, _ = read_table(ctx.input("embeddings.tsv", "embeddings"))
    k = ctx.config.get_int("purity_k")
    trained = knn_purity(records, k)
    baseline_records = one_hot_records(records, graphemes)
    baseline = knn_purity(baseline_records, k)
    rows: list[list[Any]] = [["overall", "all", trained.overall, baseline.overall]]
    rows += [["grapheme", key, value, baseline.per_grapheme[key]]
             for key, value in trained.per_grapheme.items()]
    rows += [["phoneme", key, value, baseline.per_phoneme[key]]
             for key, value in trained.per_phoneme.items()]
    within, between = punctuation_similarity(records)
    base_within, base_between = punctuation_similarity(baseline_records)
    rows += [["punctuation", "within", within, base_within],
             ["punctuation", "between", between, base_between]]
    write_tsv(ctx.output("purity.tsv"), ["scope", "key", "embedding", "one_hot"], rows)
    ctx.metadata.update({"k": k, "overall": trained.overall, "one_hot_overall": baseline.overall})


def cmd_swap(ctx: RunContext) -> None:
    corpus = ctx.corpus()
    graphemes, phonemes = build_vocabs(corpus)
    tag = f"{ProbeMode.EMBEDDING}_{ctx.probe_config().split}"
    probe = ProbeModel.from_tensors(load_checkpoint(ctx.input(f"probe_{tag}.gel", f"probe_{tag}")))
    encoder = ctx.encoder()
    split = ctx.config.get_str("embed_split")
    rows = []
    for matched in (True, False):
        report = swap_experiment(encoder, probe, corpus, split, graphemes, phonemes,
                                 ctx.config.get_int("swap_pairs"), matched, ctx.seed)
        ctx.metadata["matched_rate" if matched else "mismatched_rate"] = report.rate
        for o in report.outcomes:
            rows.append([str(matched).lower(), o.host_id, o.host_position, o.donor_id, o.donor_position,
                         o.host_label, o.donor_label, o.swapped_site or "-",
                         str(o.carried_donor).lower(), o.prediction_distance])
    write_tsv(ctx.output("swap.tsv"),
              ["matched", "host_id", "host_position", "donor_id", "donor_position", "host_label",
               "donor_label", "swapped_site", "carried_donor", "prediction_distance"], rows)


def read_manifest(run_dir: Path, command: str) -> dict[str, Any]:
    path = run_dir / f"manifest_{command}.json"
    if not path.exists():
        raise MissingInput(f"manifest_{command}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read {path.name}: {exc}") from exc


def pipeline_seconds(run_dir: Path) -> float:
    """Summed duration_seconds of the stage manifests present in run_dir."""
    total = 0.0
    for command in PIPELINE_STAGES:
        if (run_dir / f"manifest_{command}.json").exists():
            total += float(read_manifest(run_dir, command).get("duration_seconds", 0.0))
    return round(total, 3)


def build_report(run_dir: Path) -> str:
    """Plain-text summary of table2.tsv, purity.tsv and swap.tsv.

    The config digest is the one recorded by the table2 stage, so the report
    names the configuration that produced the PER grid.
    """
    table2 = read_tsv(run_dir / "table2.tsv", "table2")
    purity = read_tsv(run_dir / "purity.tsv", "purity")
    swap = read_tsv(run_dir / "swap.tsv", "swap")
    producer = read_manifest(run_dir, "table2")

    lines = ["graphemelab report", f"config_digest: {producer['config_digest']}", "", "[per]"]
    lines.append(f"{'mode':<10} {'train_split':<12} {'micro':>8} {'macro':>8} {'skipped':>8} {'p_value':>8}")
    for row in table2:
        lines.append(f"{row['mode']:<10} {row['train_split']:<12} {100 * float(row['per']):>7.2f}% "
                     f"{100 * float(row['per_macro']):>7.2f}% {row['skipped']:>8} "
                     f"{float(row['p_value']):>8.4f}")
    lines += ["", "[purity]", f"{'scope':<12} {'key':<8} {'embedding':>10} {'one_hot':>10}"]
    for row in purity:
        lines.append(f"{row['scope']:<12} {row['key']!r:<8} {float(row['embedding']):>10.4f} "
                     f"{float(row['one_hot']):>10.4f}")
    lines += ["", "[swap]"]
    for flag, name in (("true", "matched"), ("false", "mismatched")):
        subset = [r for r in swap if r["matched"] == flag]
        carried = sum(r["carried_donor"] == "true" for r in subset)
        rate = carried / len(subset) if subset else 0.0
        lines.append(f"{name:<12} pairs={len(subset):<5} donor_rate={rate:.4f}")
    return "\n".join(lines) + "\n"


def cmd_report(ctx: RunContext) -> None:
    for filename, name in (("table2.tsv", "table2"), ("purity.tsv", "purity"), ("swap.tsv", "swap"),
                           ("manifest_table2.json", "manifest_table2")):
        ctx.input(filename, name)
    write_text_atomic(ctx.output("report.txt"), build_report(ctx.run_dir))
    seconds = pipeline_seconds(ctx.run_dir)
    ctx.metadata.update({"pipeline_seconds": seconds, "budget_seconds": PIPELINE_BUDGET_SECONDS})
    if seconds > PIPELINE_BUDGET_SECONDS:
        logging.warning(f"[graphemelab] pipeline took {seconds:.1f}s, over the {PIPELINE_BUDGET_SECONDS}s budget")


COMMANDS: dict[str, tuple[Callable[[RunContext], None], str]] = {
    "gen-corpus": (cmd_gen_corpus, "Generate the synthetic corpus"),
    "split": (cmd_split, "Split the corpus into train/dev/test"),
    "train-tts": (cmd_train_tts, "Train the encoder on the acoustic-proxy task"),
    "extract-emb": (cmd_extract_emb, "Export contextual grapheme embeddings"),
    "train-g2p": (cmd_train_g2p, "Train one CTC probe"),
    "eval-per": (cmd_eval_per, "Evaluate a trained probe on the test split"),
    "table2": (cmd_table2, "Train and evaluate all four probes"),
    "tsne": (cmd_tsne, "Project embeddings to 2-D with t-SNE"),
    "purity": (cmd_purity, "k-NN phoneme purity of embeddings vs one-hot graphemes"),
    "swap": (cmd_swap, "Embedding swap experiment"),
    "report": (cmd_report, "Summarize a complete run directory"),
}


# ============================================================================
# Manifest, logging and entry point
# ============================================================================

def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(ctx: RunContext, command: str, duration: float) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": ctx.seed,
        "config": ctx.config.resolved(),
        "config_digest": ctx.config.digest(),
        "inputs": {p.name: file_digest(p) for p in ctx.inputs},
        "outputs": {p.name: file_digest(p) for p in ctx.outputs if p.exists()},
        "duration_seconds": round(duration, 3),
    }
    path = ctx.run_dir / f"manifest_{command}.json"
    write_text_atomic(path, json.dumps(manifest, indent=2, ensure_ascii=False) + "\n")
    return path


def setup_logging(run_dir: Path, level: str) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        handlers=[
            logging.FileHandler(run_dir / "run.log", encoding="utf-8"),
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )


def parse_arguments(argv: list[str] | None = None) -> argparse.Namespace:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="Flat key=value config file")
    shared.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key (repeatable)")
    shared.add_argument("--out", type=Path, default=Path("run"), help="Run directory (default: run)")
    shared.add_argument("--seed", type=int, help="Alias for --set seed=N")

    parser = argparse.ArgumentParser(prog="graphemelab",
                                     description="Contextual grapheme embedding lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        subparsers.add_parser(name, parents=[shared], help=help_text)
    return parser.parse_args(argv)


def emit(result: dict) -> None:
    print(json.dumps(result, indent=2, ensure_ascii=False))


def main(argv: list[str] | None = None) -> int:
    args = parse_arguments(argv)
    try:
        config = load_config(args.config, args.overrides, args.seed)
    except ConfigError as e:
        emit({"success": False, "error": str(e), "error_type": type(e).__name__})
        return 2

    setup_logging(args.out, config.get_str("log_level"))
    logging.info("=" * 60)
    logging.info(f"[graphemelab] {args.command} -> {args.out}")
    logging.info("=" * 60)
    config.log_values()

    ctx = RunContext(args.out, config)
    handler, _ = COMMANDS[args.command]
    started = time.monotonic()
    try:
        handler(ctx)
        manifest = write_manifest(ctx, args.command, time.monotonic() - started)
        emit({
            "success": True,
            "command": args.command,
            "outputs": [str(p) for p in ctx.outputs] + [str(manifest)],
            "metadata": ctx.metadata,
        })
        logging.info(f"[graphemelab] {args.command} finished")
        return 0
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        emit({"success": False, "error": str(e), "error_type": type(e).__name__})
        return 2
    except LabError as e:
        logging.error(f"{type(e).__name__}: {e}")
        emit({"success": False, "error": str(e), "error_type": type(e).__name__})
        return 1
    except Exception as e:
        logging.error(f"Unexpected error: {e}")
        logging.error(traceback.format_exc())
        emit({"success": False, "error": str(e), "error_type": type(e).__name__})
        return 1
    finally:
        logging.info("=" * 60)


if __name__ == "__main__":
    sys.exit(main())
