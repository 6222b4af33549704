"""flowforest command line: extract, train, compile, simulate, report, generate."""

from __future__ import annotations

import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import click
import pandas as pd
from rich.console import Console
from rich.table import Table

from src import __version__
from src.core.compiler import (
    HardwareLimits,
    compile_classifier,
    dump_rows,
    load_config,
    serialize_config,
)
from src.core.context_trainer import (
    FULL_FEATURES_FILE,
    ContextDataset,
    TrainerConfig,
    TrainingReport,
    classifier_from_record,
    classifier_to_record,
    context_file_name,
    evaluate_classifier,
    train_classifier,
)
from src.core.dataplane import new_switch, replay
from src.core.exceptions import DataError, FlowForestError, MalformedConfigError, NoModelFoundError
from src.core.features import extract_contexts, extract_full
from src.core.models import (
    ClassifierRecord,
    DeploymentRecord,
    EvaluationRecord,
    ExtractSummaryRecord,
    SimulationStatsRecord,
)
from src.core.settings import RunConfig, load_run_config
from src.core.synthetic import (
    phase_dataset,
    two_class_trace,
    write_labels,
    write_packet_csv,
    write_pcap,
)
from src.core.traffic import (
    CaptureFormat,
    LabeledDataset,
    ParsedCapture,
    assemble_flows,
    label_flows,
    load_labels,
    parse_capture,
)
from src.utils.artifacts import read_record, write_record
from src.utils.plotting import plot_bits_vs_threshold, plot_classified_by_count

console = Console()
logger = logging.getLogger(__name__)

T = TypeVar("T")


def setup_logging(verbose: bool = False, level: str = "INFO") -> None:
    """Setup logging configuration."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def parse_packet_counts(text: str | None) -> list[int] | None:
    """``"1-5"``, ``"1,2,8"`` or a mix such as ``"1-4,8"``."""
    if text is None:
        return None
    counts: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                counts.extend(range(lo, hi + 1))
            elif part:
                counts.append(int(part))
    except ValueError as e:
        raise click.BadParameter(f"cannot parse packet counts {text!r}") from e
    return counts


def _settings(ctx: click.Context, **overrides: Any) -> RunConfig:
    try:
        cfg = load_run_config(ctx.obj.get("config_file"), overrides)
    except FlowForestError as e:
        console.print(f"[red]❌ {e}[/red]")
        sys.exit(e.exit_code)
    setup_logging(ctx.obj.get("verbose", False), cfg.log_level)
    return cfg


def _guard(ctx: click.Context, action: Callable[[], None]) -> None:
    """Run a command body, mapping library errors to exit codes."""
    try:
        action()
    except FlowForestError as e:
        console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
        if ctx.obj.get("verbose"):
            console.print_exception()
        sys.exit(e.exit_code)
    except KeyboardInterrupt:
        console.print("\n[yellow]⚠️ Interrupted by user[/yellow]")
        sys.exit(130)


def _capture_format(path: Path) -> CaptureFormat:
    return CaptureFormat.CSV if path.suffix.lower() == ".csv" else CaptureFormat.PCAP


def _read_input(path: Path, parse: Callable[[bytes], T]) -> T:
    """Parse the bytes of ``path``, naming the file in data errors."""
    try:
        return parse(path.read_bytes())
    except DataError as e:
        e.args = (f"{path}: {e}",)
        raise


def _read_capture(path: Path) -> ParsedCapture:
    return _read_input(path, lambda raw: parse_capture(raw, _capture_format(path)))


def _load_labeled(capture: str | None, labels: str | None) -> tuple[LabeledDataset, int, int, int]:
    if capture is None:
        raise click.UsageError("a capture is required (--capture or config file)")
    if labels is None or not Path(labels).exists():
        raise click.UsageError(f"labels file missing: {labels}")
    capture_path = Path(capture)
    if not capture_path.exists():
        raise click.UsageError(f"capture not found: {capture}")
    parsed = _read_capture(capture_path)
    flows = assemble_flows(parsed.packets)
    dataset = label_flows(flows, _read_input(Path(labels), load_labels))
    return dataset, len(parsed.packets), parsed.skipped, len(flows)


def _load_contexts(features: Path | None, cfg: RunConfig) -> ContextDataset:
    if features is not None:
        return ContextDataset.read_dir(features)
    dataset, *_ = _load_labeled(cfg.capture, cfg.labels)
    return ContextDataset.from_labeled(dataset, cfg.packet_counts)


@click.group()
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="TOML run configuration (flags override it)",
)
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.version_option(version=__version__, prog_name="flowforest")
@click.pass_context
def cli(ctx: click.Context, config_file: Path | None, verbose: bool) -> None:
    """flowforest - early flow classification with context-dependent forests."""
    ctx.ensure_object(dict)
    ctx.obj["config_file"] = config_file
    ctx.obj["verbose"] = verbose


@cli.command()
@click.option("--capture", type=click.Path(dir_okay=False), help="pcap or packet CSV")
@click.option("--labels", type=click.Path(dir_okay=False), help="Label CSV")
@click.option(
    "--features",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Existing feature CSV directory to pass through",
)
@click.option("--packet-counts", help="Contexts, e.g. 1-20 or 1,2,5")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
def extract(
    ctx: click.Context,
    capture: str | None,
    labels: str | None,
    features: Path | None,
    packet_counts: str | None,
    out: str | None,
) -> None:
    """Write one feature matrix per packet count."""
    cfg = _settings(
        ctx,
        capture=capture,
        labels=labels,
        output_dir=out,
        packet_counts=parse_packet_counts(packet_counts),
    )

    def run() -> None:
        out_dir = Path(cfg.output_dir)
        if features is not None:
            data = ContextDataset.read_dir(features)
            written = data.write_dir(out_dir)
            console.print(f"[green]✅ Copied {len(written)} feature files to {out_dir}[/green]")
            return

        dataset, packets, skipped, n_flows = _load_labeled(cfg.capture, cfg.labels)
        if not dataset.flows:
            console.print("[yellow]⚠️ No labeled flows in capture; writing empty matrices[/yellow]")
        contexts = extract_contexts(dataset, cfg.packet_counts)
        for p, matrix in contexts.items():
            if len(matrix) == 0:
                logger.warning(f"No flow reaches {p} packets; writing an empty matrix")
        for p, matrix in contexts.items():
            matrix.to_csv(out_dir / context_file_name(p))
        extract_full(dataset).to_csv(out_dir / FULL_FEATURES_FILE)
        summary = ExtractSummaryRecord(
            run_config=cfg.provenance(),
            packets=packets,
            skipped_packets=skipped,
            flows=n_flows,
            labeled_flows=len(dataset.flows),
            contexts={str(p): len(m) for p, m in contexts.items()},
            short_flows={str(p): m.excluded for p, m in contexts.items()},
        )
        write_record(out_dir / "extract_summary.json", summary)

        table = Table(title="Extracted contexts")
        table.add_column("packets", justify="right", style="cyan")
        table.add_column("flows", justify="right", style="green")
        table.add_column("too short", justify="right", style="yellow")
        for p, m in contexts.items():
            table.add_row(str(p), str(len(m)), str(m.excluded))
        console.print(table)
        console.print(
            f"[green]✅ {len(dataset.flows)} labeled flows from {packets} packets "
            f"({skipped} skipped) → {out_dir}[/green]"
        )

    _guard(ctx, run)


@cli.command()
@click.option(
    "--features",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Feature CSV directory from extract",
)
@click.option("--capture", type=click.Path(dir_okay=False), help="pcap or packet CSV")
@click.option("--labels", type=click.Path(dir_okay=False), help="Label CSV")
@click.option("--thr-s", type=float, help="Minimum F1-macro per model")
@click.option("--thr-c", type=float, help="Minimum certainty to classify")
@click.option("--packet-counts", help="Contexts, e.g. 1-20 or 1,2,5")
@click.option("--seed", type=int, help="Random seed")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
def train(
    ctx: click.Context,
    features: Path | None,
    capture: str | None,
    labels: str | None,
    thr_s: float | None,
    thr_c: float | None,
    packet_counts: str | None,
    seed: int | None,
    out: str | None,
) -> None:
    """Extract context-dependent forests greedily."""
    cfg = _settings(
        ctx,
        capture=capture,
        labels=labels,
        thr_s=thr_s,
        thr_c=thr_c,
        packet_counts=parse_packet_counts(packet_counts),
        seed=seed,
        output_dir=out,
    )
    if features is None and cfg.capture is None:
        raise click.UsageError("give --features or --capture with --labels")

    def run() -> None:
        out_dir = Path(cfg.output_dir)
        data = _load_contexts(features, cfg)
        counts = cfg.packet_counts if features is None else sorted(data.contexts)
        provenance = cfg.provenance()
        try:
            classifier, report = train_classifier(
                data, counts, cfg.thr_s, TrainerConfig.from_run_config(cfg), cfg.thr_c
            )
        except NoModelFoundError as e:
            if isinstance(e.report, TrainingReport):
                write_record(out_dir / "report.json", e.report.to_record(provenance))
            raise

        write_record(out_dir / "classifier.json", classifier_to_record(classifier, provenance))
        write_record(out_dir / "report.json", report.to_record(provenance))
        report.to_frame().to_csv(out_dir / "report.csv", index=False)
        evaluation = evaluate_classifier(
            classifier, data, cfg.thr_c, cfg.classify_short_flows
        )
        write_record(out_dir / "evaluation.json", evaluation.to_record(provenance))

        table = Table(title="Context models")
        table.add_column("#", justify="right")
        table.add_column("from packet", justify="right", style="cyan")
        table.add_column("features", style="green")
        table.add_column("score", justify="right")
        table.add_column("reuses", justify="right", style="yellow")
        for i, m in enumerate(classifier.models):
            table.add_row(
                str(i),
                str(m.activation_count),
                ", ".join(f.value for f in m.features),
                f"{m.score_at_extraction:.4f}",
                "" if m.reused_from is None else str(m.reused_from),
            )
        console.print(table)
        f1 = evaluation.f1_classified
        console.print(
            f"[green]✅ {evaluation.classified_pct:.1f}% of flows classified"
            + (f", F1 {f1:.4f}" if f1 is not None else "")
            + f" → {out_dir}[/green]"
        )

    _guard(ctx, run)


@cli.command(name="compile")
@click.option(
    "--classifier",
    "classifier_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="classifier.json from train",
)
@click.option("--accuracy", type=float, help="Comparison accuracy a")
@click.option("--max-trees", type=int)
@click.option("--max-depth", type=int)
@click.option("--stages", type=int)
@click.option("--dump", is_flag=True, help="Print every table entry")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
def compile_cmd(
    ctx: click.Context,
    classifier_path: Path,
    accuracy: float | None,
    max_trees: int | None,
    max_depth: int | None,
    stages: int | None,
    dump: bool,
    out: str | None,
) -> None:
    """Compile a classifier into table configuration."""
    cfg = _settings(
        ctx,
        accuracy=accuracy,
        max_trees=max_trees,
        max_depth=max_depth,
        stages=stages,
        output_dir=out,
    )

    def run() -> None:
        classifier = classifier_from_record(read_record(classifier_path, ClassifierRecord))
        limits = HardwareLimits(cfg.max_trees, cfg.max_depth, cfg.stages)
        config = compile_classifier(classifier, cfg.accuracy, limits, cfg.provenance())
        path = Path(cfg.output_dir) / "deployment.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(serialize_config(config))

        if dump:
            table = Table(title="Table entries")
            for column in ("model", "tree", "level", "key", "action"):
                table.add_column(column)
            for row in dump_rows(config):
                table.add_row(*row)
            console.print(table)
        memory = config.memory
        console.print(
            f"[blue]Per-flow bits: {memory.row_bits} "
            f"({memory.base_bits} base + {memory.packet_count_bits} count + "
            f"{config.layout.total} features); "
            f"{memory.flows_per_10mb} flows per 10MB[/blue]"
        )
        console.print(f"[green]✅ Wrote {path}[/green]")

    _guard(ctx, run)


@cli.command()
@click.option(
    "--deployment",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="deployment.json from compile",
)
@click.option("--capture", type=click.Path(dir_okay=False), help="pcap or packet CSV")
@click.option("--labels", type=click.Path(dir_okay=False), help="Label CSV (for F1)")
@click.option("--rows", type=int, help="Register rows R")
@click.option("--probes", type=int, help="Hash probes k")
@click.option("--timeout-us", type=int, help="Idle timeout in microseconds")
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
def simulate(
    ctx: click.Context,
    deployment: Path,
    capture: str | None,
    labels: str | None,
    rows: int | None,
    probes: int | None,
    timeout_us: int | None,
    seed: int | None,
    out: str | None,
) -> None:
    """Replay a capture through the software switch."""
    cfg = _settings(
        ctx,
        capture=capture,
        labels=labels,
        rows=rows,
        hash_probes=probes,
        timeout_us=timeout_us,
        seed=seed,
        output_dir=out,
    )
    if cfg.capture is None or not Path(cfg.capture).exists():
        raise click.UsageError(f"capture not found: {cfg.capture}")
    if cfg.labels is not None and not Path(cfg.labels).exists():
        raise click.UsageError(f"labels file missing: {cfg.labels}")

    def run() -> None:
        config = _read_input(deployment, load_config)
        parsed = _read_capture(Path(str(cfg.capture)))
        labels_map = _read_input(Path(cfg.labels), load_labels) if cfg.labels else {}
        switch = new_switch(config, cfg.rows, cfg.hash_probes, cfg.timeout_us, cfg.seed)
        result = replay(switch, parsed.packets, labels_map)

        out_dir = Path(cfg.output_dir)
        write_record(out_dir / "stats.json", result.stats.to_record(cfg.provenance()))
        result.verdict_frame(config.classes).to_csv(out_dir / "verdicts.csv", index=False)

        stats = result.stats
        c = stats.counters
        table = Table(title="Simulation")
        table.add_column("metric", style="cyan")
        table.add_column("value", justify="right", style="green")
        for name, value in (
            ("packets", stats.packets),
            ("flows", stats.flows),
            ("classified flows", f"{stats.classified_flows} ({stats.classified_pct:.1f}%)"),
            ("F1 (classified)", "-" if stats.f1_classified is None else f"{stats.f1_classified:.4f}"),
            ("table full", c.table_full),
            ("collisions", c.collisions),
            ("evicted", c.evicted),
            ("register bits", stats.register_bits),
        ):
            table.add_row(name, str(value))
        console.print(table)
        console.print(f"[green]✅ Wrote {out_dir / 'stats.json'}[/green]")

    _guard(ctx, run)


def _count_frame_from_stats(path: Path) -> pd.DataFrame:
    stats = read_record(path, SimulationStatsRecord)
    return pd.DataFrame(
        [s.model_dump() for s in stats.per_count],
        columns=["packet_count", "classified", "classified_pct", "cumulative_classified_pct", "cumulative_f1"],
    )


def _count_frame_from_evaluation(path: Path) -> pd.DataFrame:
    evaluation = read_record(path, EvaluationRecord)
    rows = [
        {
            "packet_count": c.packet_count,
            "classified": c.classified,
            "classified_pct": c.classified_pct,
            "cumulative_classified_pct": c.cumulative_classified_pct,
            "cumulative_f1": c.cumulative_f1,
        }
        for c in evaluation.contexts
    ]
    return pd.DataFrame(
        rows,
        columns=["packet_count", "classified", "classified_pct", "cumulative_classified_pct", "cumulative_f1"],
    )


@cli.command()
@click.option("--stats", "stats_path", type=click.Path(dir_okay=False, path_type=Path), help="stats.json from simulate")
@click.option(
    "--evaluation",
    "evaluation_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="evaluation.json from train (used when --stats is absent)",
)
@click.option(
    "--deployment",
    "deployments",
    multiple=True,
    type=click.Path(dir_okay=False, path_type=Path),
    help="deployment.json; repeat for a threshold sweep",
)
@click.option("--out", type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
def report(
    ctx: click.Context,
    stats_path: Path | None,
    evaluation_path: Path | None,
    deployments: tuple[Path, ...],
    out: str | None,
) -> None:
    """Tables and figures: classified flows per packet count, bits per flow."""
    cfg = _settings(ctx, output_dir=out)
    given = [p for p in (stats_path, evaluation_path, *deployments) if p is not None]
    if not given:
        raise click.UsageError("give --stats, --evaluation or --deployment")
    missing = [str(p) for p in given if not p.exists()]
    if missing:
        raise click.UsageError(f"missing inputs: {', '.join(missing)}")

    def run() -> None:
        out_dir = Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []

        counts = None
        if stats_path is not None:
            counts = _count_frame_from_stats(stats_path)
        elif evaluation_path is not None:
            counts = _count_frame_from_evaluation(evaluation_path)
        if counts is not None:
            path = out_dir / "classified_by_count.csv"
            counts.to_csv(path, index=False)
            written += [path, plot_classified_by_count(counts, out_dir / "classified_by_count.svg")]

        if deployments:
            records = [read_record(p, DeploymentRecord) for p in deployments]
            memory = records[0].memory
            rows = [{"component": "flow_id_and_timestamp", "bits": memory.base_bits}]
            rows.append({"component": "packet_count", "bits": memory.packet_count_bits})
            rows += [{"component": f, "bits": b} for f, b in memory.feature_bits.items()]
            rows.append({"component": "total", "bits": memory.row_bits})
            path = out_dir / "memory_bits.csv"
            pd.DataFrame(rows, columns=["component", "bits"]).to_csv(path, index=False)
            written.append(path)

            sweep = []
            for source, record in zip(deployments, records, strict=True):
                thr = record.run_config.get("thr_s")
                if thr is None:
                    raise MalformedConfigError(f"{source} does not record thr_s")
                sweep.append(
                    {
                        "thr_s": float(thr),
                        "row_bits": record.memory.row_bits,
                        "flows_per_10mb": record.memory.flows_per_10mb,
                    }
                )
            frame = pd.DataFrame(sweep, columns=["thr_s", "row_bits", "flows_per_10mb"])
            path = out_dir / "bits_vs_thr_s.csv"
            frame.sort_values("thr_s").to_csv(path, index=False)
            written += [path, plot_bits_vs_threshold(frame, out_dir / "bits_vs_thr_s.svg")]

        for path in written:
            console.print(f"[green]✅ Wrote {path}[/green]")

    _guard(ctx, run)


@cli.command()
@click.option(
    "--kind",
    type=click.Choice(["phases", "trace"]),
    default="phases",
    show_default=True,
    help="Feature-level phase dataset or a two-class packet trace",
)
@click.option("--samples", type=int, default=600, show_default=True, help="Flows to generate")
@click.option(
    "--format",
    "fmt",
    type=click.Choice([f.value for f in CaptureFormat]),
    default=CaptureFormat.PCAP.value,
    show_default=True,
    help="Trace encoding",
)
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
def generate(
    ctx: click.Context,
    kind: str,
    samples: int,
    fmt: str,
    seed: int | None,
    out: str | None,
) -> None:
    """Write a synthetic dataset."""
    cfg = _settings(ctx, seed=seed, output_dir=out)

    def run() -> None:
        out_dir = Path(cfg.output_dir)
        if kind == "phases":
            written = phase_dataset(samples, cfg.seed).write_dir(out_dir)
            console.print(f"[green]✅ Wrote {len(written)} feature files to {out_dir}[/green]")
            return
        packets, labels = two_class_trace(samples, cfg.seed)
        if CaptureFormat(fmt) is CaptureFormat.PCAP:
            trace = write_pcap(packets, out_dir / "trace.pcap")
        else:
            trace = write_packet_csv(packets, out_dir / "trace.csv")
        write_labels(labels, out_dir / "labels.csv")
        console.print(
            f"[green]✅ Wrote {len(packets)} packets to {trace} and labels to "
            f"{out_dir / 'labels.csv'}[/green]"
        )

    _guard(ctx, run)


def main() -> None:
    """Console script entry point."""
    cli(obj={})


if __name__ == "__main__":
    main()
