from .context import RunContext
from .data_synth import SampleRecord, SyntheticDataset, load_dataset
from .galleries_scoring import detect_batch, export_heatmap, load_galleries, save_galleries
from .logger import logger, flush_throttled, setup_logger, format_log_message as flm
from .metrics import (
    METRIC_NAMES,
    EvalTarget,
    ResultRow,
    SampleScore,
    ablation_deltas,
    evaluate_run,
    rate_trend,
    write_report_csv,
    write_scores_csv,
)
from .missing_config import MissingLevel, MissingSchedule, MissingType, sample_missing_schedule
from .model import MisddModel, build_model, load_model, save_model
from .prompts import PromptConfig
from .scl_training import TrainConfig, TrainingView, epoch_log_csv, few_shot_subset, train
from .text_branch import TextConfig, Vocabulary, build_text_encoder, load_templates
from .tools import atomic_write_text, derive_seed
from .version import VERSION
from .vision_encoder import EncoderConfig, WarmupConfig, warmup_pretrain
from collections import defaultdict
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any
import json
import numpy as np
import torch

# --- Constants ---
EVAL_BATCH: int = 16
DEFAULT_ETAS: tuple[float, ...] = (0.3, 0.5, 0.7)
DEFAULT_GRID_TYPES: tuple[str, ...] = ("rgb", "3d", "both")

# Ablation presets: prompt switches and contrastive training.
ABLATIONS: dict[str, dict[str, bool]] = {
    "full": {"use_ccp": True, "use_msp": True, "use_map": True, "use_scl": True},
    "no-scl": {"use_ccp": True, "use_msp": True, "use_map": True, "use_scl": False},
    "no-cpl-scl": {"use_ccp": False, "use_msp": False, "use_map": False, "use_scl": False},
    "ccp-only": {"use_ccp": True, "use_msp": False, "use_map": False, "use_scl": True},
    "msp-only": {"use_ccp": False, "use_msp": True, "use_map": False, "use_scl": True},
    "map-only": {"use_ccp": False, "use_msp": False, "use_map": True, "use_scl": True},
}

# Run directory layout
RUN_MANIFEST = "run.json"
LOSS_LOG = "loss_log.csv"
CHECKPOINT_DIR = "checkpoint"
GALLERY_DIR = "galleries"
METRICS_CSV = "metrics.csv"
SCORES_CSV = "scores.csv"
HEATMAP_DIR = "heatmaps"
WARMUP_DIR = "warmup"


def ablation_name(config: TrainConfig) -> str:
    """The preset matching the config's switches, or "custom"."""
    switches = {name: getattr(config, name) for name in ABLATIONS["full"]}
    for name, preset in ABLATIONS.items():
        if preset == switches:
            return name
    return "custom"


@dataclass(frozen=True)
class CellSpec:
    """One training/evaluation configuration of an experiment."""

    missing_type: str
    eta: float
    ablation: str = "full"
    seed: int = 0
    level: str = MissingLevel.INPUT.value
    k_shot: int | None = None

    @property
    def name(self) -> str:
        shot = f"-k{self.k_shot}" if self.k_shot is not None else ""
        return f"{self.missing_type}-eta{self.eta:g}-{self.ablation}{shot}-s{self.seed}"


@dataclass(frozen=True)
class ExperimentGrid:
    missing_types: tuple[str, ...] = DEFAULT_GRID_TYPES
    etas: tuple[float, ...] = DEFAULT_ETAS
    seeds: tuple[int, ...] = (0,)
    ablations: tuple[str, ...] = ("full",)

    def validate(self) -> None:
        """
        Raises:
            ValueError: If an axis is empty or holds an unknown value.
        """
        for axis in ("missing_types", "etas", "seeds", "ablations"):
            if not getattr(self, axis):
                raise ValueError(f"ExperimentGrid.{axis} must not be empty")
        for missing_type in self.missing_types:
            MissingType(missing_type)
        for eta in self.etas:
            if not 0.0 <= eta <= 1.0:
                raise ValueError(f"ExperimentGrid.etas: {eta} is outside [0, 1]")
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ValueError(
                f"ExperimentGrid.ablations: unknown preset {unknown[0]!r} "
                f"(known: {', '.join(ABLATIONS)})"
            )

    def cells(self, level: MissingLevel | str = MissingLevel.INPUT) -> list[CellSpec]:
        """All cells, ablation-major then missing type, rate and seed."""
        self.validate()
        level = MissingLevel(level).value
        return [
            CellSpec(missing_type, eta, ablation, seed, level)
            for ablation in self.ablations
            for missing_type in self.missing_types
            for eta in self.etas
            for seed in self.seeds
        ]


@dataclass(frozen=True)
class RunSettings:
    """Resolved configuration shared by every cell of an invocation."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text: TextConfig = field(default_factory=TextConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prompt_len: int = 8
    prompt_file: str | None = None
    memory_bank: bool = False
    export_heatmaps: bool = False

    def for_cell(self, cell: CellSpec) -> TrainConfig:
        switches = ABLATIONS.get(cell.ablation, {})
        return replace(self.train, seed=cell.seed, **switches)

    def prompt_config(self, train_config: TrainConfig) -> PromptConfig:
        return PromptConfig(
            l_ccp=self.prompt_len,
            l_msp=self.prompt_len,
            l_map=self.prompt_len,
            prompt_depth=self.encoder.prompt_depth,
            width=self.encoder.width,
            heads=self.encoder.heads,
            use_ccp=train_config.use_ccp,
            use_msp=train_config.use_msp,
            use_map=train_config.use_map,
        )

    def validate(self, dataset: SyntheticDataset) -> None:
        """
        Raises:
            ValueError: If a config is invalid or the image size disagrees with the dataset.
        """
        self.encoder.validate()
        self.text.validate()
        self.warmup.validate()
        self.train.validate()
        if self.encoder.image_size != dataset.image_size:
            raise ValueError(
                f"Image size {self.encoder.image_size} differs from the dataset's "
                f"{dataset.image_size}"
            )
        if self.train.image_size != self.encoder.image_size:
            raise ValueError(
                f"TrainConfig.image_size {self.train.image_size} differs from "
                f"EncoderConfig.image_size {self.encoder.image_size}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "encoder": self.encoder.to_dict(),
            "text": self.text.to_dict(),
            "warmup": self.warmup.to_dict(),
            "train": self.train.to_dict(),
            "prompt_len": self.prompt_len,
            "prompt_file": self.prompt_file,
            "memory_bank": self.memory_bank,
            "export_heatmaps": self.export_heatmaps,
        }


def _write_json(path: Path, data: dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_run_manifest(run_dir: str | Path) -> dict[str, Any]:
    """
    Raises:
        FileNotFoundError: If the run directory holds no run.json.
    """
    path = Path(run_dir) / RUN_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: not a run directory (no {RUN_MANIFEST})")
    return json.loads(path.read_text(encoding="utf-8"))


def prepare_warmup(
    dataset: SyntheticDataset,
    records: Sequence[SampleRecord],
    settings: RunSettings,
    seed: int,
    out_dir: str | Path,
    context: RunContext | None = None,
) -> Path:
    """
    Warms up the encoder pair and the text encoder on complete normals and
    saves the frozen result as a prompt-free checkpoint.

    Args:
        dataset (SyntheticDataset): The dataset.
        records (Sequence[SampleRecord]): Training records used for the warmup.
        settings (RunSettings): Encoder, text and warmup configuration.
        seed (int): Base seed of the warmup.
        out_dir (str | Path): Checkpoint directory.
        context (RunContext | None, optional): Logging context.

    Returns:
        Path: The checkpoint directory.
    """
    context = context or RunContext({"id": "000000", "cell": WARMUP_DIR}, seed=seed)
    settings.validate(dataset)
    templates = load_templates(settings.prompt_file).with_classes(dataset.class_names)
    vocab = Vocabulary.from_templates(templates, settings.text.n_ctx)
    text = build_text_encoder(vocab, settings.text, derive_seed(seed, "text"))
    normals = [dataset.load(r.id) for r in records]
    result = warmup_pretrain(
        normals,
        settings.encoder,
        settings.warmup,
        derive_seed(seed, "warmup"),
        text=text,
        vocab=vocab,
        templates=templates.templates,
        states=templates.states,
        context=context,
    )
    base = MisddModel(result.encoder, text, vocab, templates)
    meta = {
        "stage": "warmup",
        "seed": seed,
        "n_normals": len(normals),
        "mae_losses": result.mae_losses,
        "align_losses": result.align_losses,
    }
    return save_model(out_dir, base, meta)


def run_train(
    dataset: SyntheticDataset,
    cell: CellSpec,
    settings: RunSettings,
    run_dir: str | Path,
    warmup_dir: str | Path | None = None,
    view: TrainingView | None = None,
    context: RunContext | None = None,
) -> Path:
    """
    Trains one cell and fills its run directory with the config echo, loss log,
    checkpoint and galleries.

    Args:
        dataset (SyntheticDataset): The dataset.
        cell (CellSpec): Missing configuration, ablation and seed.
        settings (RunSettings): Shared configuration.
        run_dir (str | Path): The run directory.
        warmup_dir (str | Path | None, optional): A shared warmup checkpoint; a
            private one is prepared inside the run directory when omitted.
        view (TrainingView | None, optional): Restricts the training records (few-shot).
        context (RunContext | None, optional): Logging context.

    Returns:
        Path: The run directory.

    Raises:
        ValueError: If the configuration is invalid or the training set is empty.
    """
    context = context or RunContext({"id": "000000", "cell": cell.name}, seed=cell.seed)
    run_dir = Path(run_dir)
    settings.validate(dataset)
    records = list(view.records) if view is not None else dataset.split("train")
    if not records:
        raise ValueError("Empty effective training set")
    if warmup_dir is None:
        warmup_dir = prepare_warmup(
            dataset, records, settings, cell.seed, run_dir / WARMUP_DIR, context
        )

    base, _ = load_model(warmup_dir)
    train_config = settings.for_cell(cell)
    prompt_config = settings.prompt_config(train_config)
    model = build_model(
        base.encoder, base.text, base.vocab, base.templates, prompt_config, cell.seed
    )
    samples = [dataset.load(r.id) for r in records]
    schedule = sample_missing_schedule(
        len(samples),
        cell.missing_type,
        cell.eta,
        derive_seed(cell.seed, "train", cell.missing_type),
        cell.level,
    )
    logger.info(
        flm(
            f"Training on {len(samples)} normals, availability {schedule.counts()}",
            context.ident,
            context.verbose,
        )
    )
    result = train(model, samples, schedule, train_config, context)

    run_dir.mkdir(parents=True, exist_ok=True)
    save_model(run_dir / CHECKPOINT_DIR, model, {"cell": asdict(cell)})
    save_galleries(run_dir / GALLERY_DIR, result.galleries)
    atomic_write_text(run_dir / LOSS_LOG, epoch_log_csv(result.epochs))
    _write_json(
        run_dir / RUN_MANIFEST,
        {
            "version": VERSION,
            "dataset": str(dataset.root),
            "cell": asdict(cell),
            "schedule": schedule.to_config(),
            "counts": schedule.counts(),
            "settings": settings.to_dict(),
            "train": train_config.to_dict(),
            "prompts": prompt_config.to_dict() if model.prompts is not None else None,
            "n_train": len(samples),
            "warmup": str(warmup_dir),
        },
    )
    logger.info(
        flm(
            f"Run written to {run_dir} in {context.get_elapsed_time():.1f}s",
            context.ident,
            context.verbose,
        )
    )
    return run_dir


def _test_schedule(
    n: int, missing_type: str, eta: float, seed: int, level: str
) -> MissingSchedule:
    return sample_missing_schedule(
        n, missing_type, eta, derive_seed(seed, "test", missing_type), level
    )


def run_eval(
    run_dir: str | Path,
    dataset: SyntheticDataset,
    missing_type: str | None = None,
    eta: float | None = None,
    level: str | None = None,
    memory_bank: bool = False,
    export_heatmaps: bool = False,
    context: RunContext | None = None,
) -> list[ResultRow]:
    """
    Scores the test split with a trained run and writes its metrics and
    per-sample score CSVs.

    Missing type, rate and level default to the run's training configuration.

    Args:
        run_dir (str | Path): A directory written by run_train.
        dataset (SyntheticDataset): The dataset to evaluate on.
        missing_type (str | None, optional): Test-time missing modality.
        eta (float | None, optional): Test-time missing rate.
        level (str | None, optional): input or feature.
        memory_bank (bool, optional): Fuse the visual-gallery distance into the maps.
        export_heatmaps (bool, optional): Write heatmaps under run_dir/heatmaps.
        context (RunContext | None, optional): Logging context.

    Returns:
        list[ResultRow]: Per-class rows and the mean row.

    Raises:
        ValueError: If the checkpoint's image size differs from the dataset's.
        UndefinedMetricError: If a metric is undefined for a class.
    """
    run_dir = Path(run_dir)
    manifest = read_run_manifest(run_dir)
    cell = CellSpec(**manifest["cell"])
    context = context or RunContext({"id": "000000", "cell": cell.name}, seed=cell.seed)
    missing_type = missing_type if missing_type is not None else cell.missing_type
    eta = eta if eta is not None else cell.eta
    level = MissingLevel(level if level is not None else cell.level).value

    model, _ = load_model(run_dir / CHECKPOINT_DIR)
    if model.image_size != dataset.image_size:
        raise ValueError(
            f"Checkpoint image size {model.image_size} differs from the dataset's "
            f"{dataset.image_size}"
        )
    galleries = load_galleries(run_dir / GALLERY_DIR)
    records = dataset.split("test")
    if not records:
        raise ValueError("The dataset has no test samples")
    schedule = _test_schedule(len(records), missing_type, eta, cell.seed, level)

    scores = {}
    targets = []
    per_sample = []
    for start in range(0, len(records), EVAL_BATCH):
        chunk = [dataset.load(r.id) for r in records[start : start + EVAL_BATCH]]
        indicators = [schedule[start + i] for i in range(len(chunk))]
        pairs = detect_batch(model, chunk, galleries, indicators, level, memory_bank)
        for sample, ind, pair in zip(chunk, indicators, pairs):
            scores[sample.id] = pair
            targets.append(EvalTarget(sample.id, sample.class_name, sample.label, sample.gt_mask))
            per_sample.append(
                SampleScore(
                    sample.id,
                    sample.class_name,
                    sample.label,
                    sample.defect_type or "",
                    ind.m_rgb,
                    ind.m_3d,
                    pair.s_im,
                )
            )
            if export_heatmaps:
                export_heatmap(run_dir / HEATMAP_DIR, sample, pair, ind)

    rows = [
        ResultRow.from_report(report, missing_type, eta, cell.ablation)
        for report in evaluate_run(scores, targets)
    ]
    write_report_csv(run_dir / METRICS_CSV, rows)
    write_scores_csv(run_dir / SCORES_CSV, per_sample)
    mean = rows[-1]
    logger.info(
        flm(
            f"Evaluated {len(records)} test samples ({missing_type}, eta={eta:g}): "
            f"I-AUROC {mean.i_auroc:.4f}, P-AUROC {mean.p_auroc:.4f}, "
            f"AUPRO {mean.aupro_standard:.4f}",
            context.ident,
            context.verbose,
        )
    )
    return rows


@dataclass(frozen=True)
class CellTask:
    dataset: str
    cell: CellSpec
    settings: RunSettings
    run_dir: str
    warmup_dir: str
    ident: str = "000000"
    verbose: int = 0


def run_cell(task: CellTask) -> list[ResultRow]:
    """Trains and evaluates one grid cell; the unit of work of a grid worker."""
    context = RunContext({"id": task.ident, "cell": task.cell.name}, task.verbose, task.cell.seed)
    dataset = load_dataset(task.dataset)
    try:
        run_train(
            dataset, task.cell, task.settings, task.run_dir, task.warmup_dir, context=context
        )
        return run_eval(
            task.run_dir,
            dataset,
            memory_bank=task.settings.memory_bank,
            export_heatmaps=task.settings.export_heatmaps,
            context=context,
        )
    finally:
        # Pool workers end without running atexit hooks.
        flush_throttled()


def _init_worker(verbose: int, log_file: str | None) -> None:
    setup_logger(log_file, verbose)
    torch.set_num_threads(1)


def average_rows(rows: Sequence[ResultRow]) -> list[ResultRow]:
    """Averages rows repeated across seeds, keeping first-appearance order."""
    grouped: dict[tuple[str, str, float, str], list[ResultRow]] = defaultdict(list)
    for row in rows:
        grouped[(row.class_name, row.missing_type, row.eta, row.ablation)].append(row)
    return [
        ResultRow(
            *key,
            *(float(np.mean([getattr(r, name) for r in group])) for name in METRIC_NAMES),
        )
        for key, group in grouped.items()
    ]


def run_grid(
    dataset_path: str | Path,
    grid: ExperimentGrid,
    settings: RunSettings,
    out_dir: str | Path,
    level: MissingLevel | str = MissingLevel.INPUT,
    workers: int = 1,
    log_file: str | None = None,
    context: RunContext | None = None,
) -> list[ResultRow]:
    """
    Runs every cell of a grid and writes the aggregated results.csv.

    The warmup is shared by all cells of a seed. Each cell derives its random
    streams from its own configuration, so results do not depend on cell order
    or on the worker count.

    Args:
        dataset_path (str | Path): The dataset directory.
        grid (ExperimentGrid): Missing types, rates, seeds and ablations.
        settings (RunSettings): Shared configuration.
        out_dir (str | Path): Output directory; one run directory per cell.
        level (MissingLevel | str, optional): input or feature.
        workers (int, optional): Number of worker processes. Defaults to 1.
        log_file (str | None, optional): Log file of the worker processes.
        context (RunContext | None, optional): Logging context.

    Returns:
        list[ResultRow]: Rows averaged over seeds, in cell order.
    """
    context = context or RunContext({"id": "000000", "cell": "grid"})
    out = Path(out_dir)
    dataset = load_dataset(dataset_path)
    settings.validate(dataset)
    cells = grid.cells(level)
    logger.info(
        flm(
            f"Grid of {len(cells)} cells with {workers} worker(s)",
            context.ident,
            context.verbose,
        )
    )

    warmups = {
        seed: prepare_warmup(
            dataset,
            dataset.split("train"),
            settings,
            seed,
            out / WARMUP_DIR / f"s{seed}",
            context.child(f"warmup-s{seed}", seed),
        )
        for seed in grid.seeds
    }
    tasks = [
        CellTask(
            str(dataset.root),
            cell,
            settings,
            str(out / cell.name),
            str(warmups[cell.seed]),
            context.ident.get("id", "000000"),
            context.verbose,
        )
        for cell in cells
    ]
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(context.verbose, log_file),
        ) as pool:
            per_cell = list(pool.map(run_cell, tasks))
    else:
        per_cell = [run_cell(task) for task in tasks]

    rows = average_rows([row for cell_rows in per_cell for row in cell_rows])
    write_report_csv(out / "results.csv", rows)
    _log_summary(rows, context)
    return rows


def _log_summary(rows: Sequence[ResultRow], context: RunContext) -> None:
    for missing_type, points in rate_trend(rows).items():
        trend = ", ".join(f"{eta:g}: {value:.4f}" for eta, value in points)
        logger.info(flm(f"I-AUROC trend {missing_type}: {trend}", context.ident, context.verbose))
    for delta in ablation_deltas(rows):
        logger.debug(
            flm(
                f"{delta.missing_type} eta={delta.eta:g} {delta.metric}: "
                f"prompts {delta.delta_scl:+.4f}, full {delta.delta_full:+.4f}",
                context.ident,
                context.verbose,
            )
        )


def run_fewshot(
    dataset_path: str | Path,
    ks: Sequence[int | None],
    settings: RunSettings,
    out_dir: str | Path,
    seed: int = 0,
    missing_type: str = MissingType.NONE.value,
    eta: float = 0.0,
    level: MissingLevel | str = MissingLevel.INPUT,
    context: RunContext | None = None,
) -> list[ResultRow]:
    """
    Trains and evaluates with only K training samples per class for every K.

    None stands for the full training split. The test split is untouched. The
    ablation column of the rows reads "<K>-shot" (or "full-shot").

    Raises:
        ValueError: If K exceeds a class's training size.
    """
    context = context or RunContext({"id": "000000", "cell": "fewshot"}, seed=seed)
    out = Path(out_dir)
    dataset = load_dataset(dataset_path)
    settings.validate(dataset)
    views = {k: few_shot_subset(dataset, k, seed) if k is not None else None for k in ks}
    level = MissingLevel(level).value

    rows: list[ResultRow] = []
    for k, view in views.items():
        label = f"{k}-shot" if k is not None else "full-shot"
        cell = CellSpec(missing_type, eta, ablation_name(settings.train), seed, level, k)
        cell_context = context.child(label, seed)
        run_dir = run_train(dataset, cell, settings, out / label, view=view, context=cell_context)
        cell_rows = run_eval(
            run_dir,
            dataset,
            memory_bank=settings.memory_bank,
            export_heatmaps=settings.export_heatmaps,
            context=cell_context,
        )
        rows += [replace(row, ablation=label) for row in cell_rows]

    write_report_csv(out / "fewshot.csv", rows)
    return rows
