from .context import RunContext
from .logger import logger, format_log_message as flm
from .tensor_io import (
    CorruptFileError,
    dumps_manifest,
    encode_tensor,
    read_tensor,
    read_tensor_shape,
)
from .tools import derive_seed, publish_directory
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from scipy import ndimage
from typing import Any
import json
import numpy as np
import tempfile

DATASET_FORMAT = "misdd-dataset"
DATASET_VERSION = 1

NOISE_SIGMA: float = 0.01
MIN_DEFECT_AREA: float = 0.005
MAX_DEFECT_AREA: float = 0.10
MAX_DEFECT_RETRIES: int = 50

SPLITS = ("train", "test")


class DefectType(str, Enum):
    RGB_ONLY = "rgb_only"
    DEPTH_ONLY = "depth_only"
    COMBINED = "combined"


DEFAULT_CLASSES: tuple[str, ...] = ("tile", "foam", "cable", "plate")


def _default_mix() -> dict[str, float]:
    return {
        DefectType.RGB_ONLY.value: 0.4,
        DefectType.DEPTH_ONLY.value: 0.4,
        DefectType.COMBINED.value: 0.2,
    }


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe of a synthetic corpus; the corpus is a pure function of it."""

    classes: tuple[str, ...] = DEFAULT_CLASSES
    n_train_normal: int = 50
    n_test_normal: int = 10
    n_test_anomalous: int = 20
    image_size: int = 64
    defect_mix: dict[str, float] = field(default_factory=_default_mix)
    seed: int = 0

    def validate(self) -> None:
        """
        Checks every field, naming the first offending one.

        Raises:
            ValueError: If a field is invalid.
        """
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ValueError("DatasetSpec.classes must be a non-empty list of unique names")
        unknown = [c for c in self.classes if c not in CLASS_RECIPES]
        if unknown:
            raise ValueError(
                f"DatasetSpec.classes: unknown class {unknown[0]!r} "
                f"(known: {', '.join(sorted(CLASS_RECIPES))})"
            )
        if self.n_train_normal < 1:
            raise ValueError("DatasetSpec.n_train_normal must be >= 1")
        if self.n_test_normal < 0:
            raise ValueError("DatasetSpec.n_test_normal must be >= 0")
        if self.n_test_anomalous < 0:
            raise ValueError("DatasetSpec.n_test_anomalous must be >= 0")
        if not 16 <= self.image_size <= 4096:
            raise ValueError("DatasetSpec.image_size must be in [16, 4096]")
        if not self.defect_mix:
            raise ValueError("DatasetSpec.defect_mix must not be empty")
        for name, weight in self.defect_mix.items():
            if name not in {t.value for t in DefectType}:
                raise ValueError(f"DatasetSpec.defect_mix: unknown defect type {name!r}")
            if weight < 0:
                raise ValueError(f"DatasetSpec.defect_mix: negative weight for {name!r}")
        if abs(sum(self.defect_mix.values()) - 1.0) > 1e-9:
            raise ValueError("DatasetSpec.defect_mix must sum to 1")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["classes"] = list(self.classes)
        data["defect_mix"] = {k: self.defect_mix[k] for k in sorted(self.defect_mix)}
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DatasetSpec":
        return cls(
            classes=tuple(data["classes"]),
            n_train_normal=int(data["n_train_normal"]),
            n_test_normal=int(data["n_test_normal"]),
            n_test_anomalous=int(data["n_test_anomalous"]),
            image_size=int(data["image_size"]),
            defect_mix={k: float(v) for k, v in data["defect_mix"].items()},
            seed=int(data["seed"]),
        )


@dataclass
class PairedSample:
    """
    One aligned RGB image and depth map with pixel ground truth.

    rgb is H x W x 3 float32, depth H x W x 1 float32, gt_mask H x W uint8.
    """

    id: str
    class_name: str
    rgb: np.ndarray
    depth: np.ndarray
    gt_mask: np.ndarray
    label: int
    defect_type: str | None = None
    rgb_delta: float = 0.0
    depth_delta: float = 0.0

    @property
    def image_size(self) -> int:
        return int(self.rgb.shape[0])

    def validate(self) -> None:
        """
        Checks the sample invariants.

        Raises:
            ValueError: If shapes disagree, values leave [0, 1], or the mask
                        contradicts the label.
        """
        h, w = self.gt_mask.shape
        if self.rgb.shape != (h, w, 3) or self.depth.shape != (h, w, 1):
            raise ValueError(f"sample {self.id}: rgb/depth/gt_mask shapes disagree")
        for name, array in (("rgb", self.rgb), ("depth", self.depth)):
            if not np.isfinite(array).all() or array.min() < 0 or array.max() > 1:
                raise ValueError(f"sample {self.id}: {name} values must be finite and in [0, 1]")
        if bool(self.gt_mask.any()) != bool(self.label):
            raise ValueError(f"sample {self.id}: gt_mask must be all-zero iff label is 0")


@dataclass(frozen=True)
class SampleRecord:
    """Manifest entry of one stored sample."""

    id: str
    split: str
    class_name: str
    label: int
    defect_type: str | None
    rgb_delta: float
    depth_delta: float

    def file_names(self) -> dict[str, str]:
        return {
            "rgb": f"samples/{self.id}.rgb.bin",
            "depth": f"samples/{self.id}.depth.bin",
            "mask": f"samples/{self.id}.mask.bin",
        }

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["files"] = self.file_names()
        return data


# --- Normal appearance recipes ---


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="ij")


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency field with amplitude ~0.04."""
    yy, xx = _grid(size)
    field_ = np.zeros((size, size))
    for _ in range(2):
        fy, fx = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += 0.02 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field_


def _smooth_noise(size: int, rng: np.random.Generator, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return noise / (np.abs(noise).max() + 1e-12)


def _tile(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = _grid(size)
    period = 4 + rng.integers(0, 2)
    checker = (np.floor(yy * period) + np.floor(xx * period)) % 2
    base = np.array([0.72, 0.66, 0.56]) + rng.uniform(-0.03, 0.03, size=3)
    rgb = base + 0.08 * (checker[..., None] - 0.5)
    groove = np.minimum(np.abs((yy * period) % 1 - 0.5), np.abs((xx * period) % 1 - 0.5))
    depth = 0.55 - 0.06 * (groove > 0.44)
    return rgb, depth


def _foam(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    texture = _smooth_noise(size, rng, sigma=size / 24)
    base = np.array([0.36, 0.56, 0.38]) + rng.uniform(-0.03, 0.03, size=3)
    rgb = base + 0.08 * texture[..., None]
    depth = 0.5 + 0.06 * _smooth_noise(size, rng, sigma=size / 16)
    return rgb, depth


def _cable(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = _grid(size)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * 6 * (xx + yy) + phase)
    base = np.array([0.70, 0.46, 0.28]) + rng.uniform(-0.03, 0.03, size=3)
    rgb = base + 0.07 * stripes[..., None]
    depth = 0.3 + 0.35 * np.sqrt(np.clip(1 - (2 * xx - 1) ** 2, 0, 1))
    return rgb, depth


def _plate(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = _grid(size)
    cy, cx = 0.5 + rng.uniform(-0.05, 0.05, size=2)
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    rings = np.cos(2 * np.pi * 8 * np.sqrt(r2))
    base = np.array([0.55, 0.60, 0.70]) + rng.uniform(-0.03, 0.03, size=3)
    rgb = base + 0.06 * rings[..., None]
    depth = 0.35 + 0.3 * np.clip(1 - 2 * r2, 0, 1)
    return rgb, depth


CLASS_RECIPES: dict[str, Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]] = {
    "tile": _tile,
    "foam": _foam,
    "cable": _cable,
    "plate": _plate,
}


def make_normal_sample(
    sample_id: str, class_name: str, size: int, rng: np.random.Generator
) -> PairedSample:
    """
    Renders one defect-free sample of a class.

    Args:
        sample_id (str): Identifier of the sample.
        class_name (str): One of CLASS_RECIPES.
        size (int): Image side length in pixels.
        rng (np.random.Generator): The sample's own random stream.

    Returns:
        PairedSample: A normal sample (label 0, empty mask).
    """
    rgb, depth = CLASS_RECIPES[class_name](size, rng)
    rgb = rgb + _background(size, rng)[..., None]
    depth = depth + 0.5 * _background(size, rng)
    rgb = rgb + rng.normal(0.0, NOISE_SIGMA, size=rgb.shape)
    depth = depth + rng.normal(0.0, NOISE_SIGMA, size=depth.shape)
    return PairedSample(
        id=sample_id,
        class_name=class_name,
        rgb=np.clip(rgb, 0, 1).astype(np.float32),
        depth=np.clip(depth, 0, 1).astype(np.float32)[..., None],
        gt_mask=np.zeros((size, size), dtype=np.uint8),
        label=0,
    )


# --- Defect injection ---


def _ellipse_region(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    a, b = rng.uniform(0.04, 0.18, size=2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polyline_region(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_points = int(rng.integers(2, 5))
    points = [rng.uniform(0.15, 0.85, size=2) * size]
    for _ in range(n_points - 1):
        step = rng.normal(0, 0.15 * size, size=2)
        points.append(np.clip(points[-1] + step, 0, size - 1))
    thickness = rng.uniform(1.0, 2.5)
    distance = np.full((size, size), np.inf)
    for p, q in zip(points[:-1], points[1:]):
        d = q - p
        length2 = float(d @ d) or 1e-12
        t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / length2, 0, 1)
        distance = np.minimum(
            distance, np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))
        )
    return distance <= thickness


def _bump_profile(region: np.ndarray) -> np.ndarray:
    """Gaussian bump over the region with a pedestal, so every region pixel moves."""
    ys, xs = np.nonzero(region)
    cy, cx = ys.mean(), xs.mean()
    spread = max(float(np.sqrt(region.sum() / np.pi)), 1.0)
    yy, xx = np.mgrid[0 : region.shape[0], 0 : region.shape[1]].astype(np.float64)
    gauss = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spread**2))
    return np.where(region, 0.4 + 0.6 * gauss, 0.0)


def inject_defect(
    sample: PairedSample, defect_type: DefectType | str, rng: np.random.Generator
) -> PairedSample:
    """
    Turns a normal sample into an anomalous one.

    Colour defects shift the RGB values of the region towards the far side of the
    unit interval; geometric defects add a Gaussian bump or dent to the depth map.
    The ground-truth mask is exactly the set of pixels whose values changed.

    Args:
        sample (PairedSample): A normal sample.
        defect_type (DefectType | str): Which channels to perturb.
        rng (np.random.Generator): Random stream; identical state gives identical output.

    Returns:
        PairedSample: A new sample with label 1 and the defect recorded.

    Raises:
        ValueError: If the input sample is not normal.
        RuntimeError: If no region of admissible area is found within the retry cap.
    """
    defect_type = DefectType(defect_type)
    if sample.label != 0 or sample.gt_mask.any():
        raise ValueError(f"sample {sample.id}: defects can only be injected into normal samples")

    size = sample.image_size
    total = size * size
    perturb_rgb = defect_type in (DefectType.RGB_ONLY, DefectType.COMBINED)
    perturb_depth = defect_type in (DefectType.DEPTH_ONLY, DefectType.COMBINED)

    for _ in range(MAX_DEFECT_RETRIES):
        region = (
            _ellipse_region(size, rng) if rng.random() < 0.6 else _polyline_region(size, rng)
        )
        if not MIN_DEFECT_AREA <= region.sum() / total <= MAX_DEFECT_AREA:
            continue

        rgb, depth = sample.rgb, sample.depth
        if perturb_rgb:
            old = sample.rgb.astype(np.float64)
            direction = np.where(old[region].mean(axis=0) < 0.5, 1.0, -1.0)
            magnitude = rng.uniform(0.2, 0.35, size=3)
            profile = _bump_profile(region)[..., None]
            rgb = np.clip(old + profile * direction * magnitude, 0, 1).astype(np.float32)
        if perturb_depth:
            old = sample.depth.astype(np.float64)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            amplitude = rng.uniform(0.1, 0.2)
            profile = _bump_profile(region)[..., None]
            depth = np.clip(old + sign * amplitude * profile, 0, 1).astype(np.float32)

        changed_rgb = (rgb != sample.rgb).any(axis=-1)
        changed_depth = (depth != sample.depth).any(axis=-1)
        gt = changed_rgb | changed_depth
        if not MIN_DEFECT_AREA <= gt.sum() / total <= MAX_DEFECT_AREA:
            continue

        rgb_delta = (
            float(np.abs(rgb.astype(np.float64) - sample.rgb)[gt].mean()) if gt.any() else 0.0
        )
        depth_delta = (
            float(np.abs(depth.astype(np.float64) - sample.depth)[gt].mean())
            if gt.any()
            else 0.0
        )
        return replace(
            sample,
            rgb=rgb,
            depth=depth,
            gt_mask=gt.astype(np.uint8),
            label=1,
            defect_type=defect_type.value,
            rgb_delta=rgb_delta,
            depth_delta=depth_delta,
        )

    raise RuntimeError(
        f"sample {sample.id}: no defect region with area in "
        f"[{MIN_DEFECT_AREA:.1%}, {MAX_DEFECT_AREA:.0%}] after {MAX_DEFECT_RETRIES} attempts"
    )


@dataclass(frozen=True)
class PseudoDefect:
    """
    A training sample, possibly with an injected defect.

    rgb_mask and depth_mask (H x W bool) mark the pixels each modality changed;
    both are all-False for a sample left normal.
    """

    sample: PairedSample
    rgb_mask: np.ndarray
    depth_mask: np.ndarray

    @property
    def defective(self) -> bool:
        return bool(self.rgb_mask.any() or self.depth_mask.any())


def synthesize_defects(
    samples: Sequence[PairedSample], rate: float, rng: np.random.Generator
) -> list[PseudoDefect]:
    """
    Replaces each normal sample by an injected-defect copy with probability rate.

    The defect type is drawn uniformly. One uniform draw is taken per sample
    whatever the rate, so the stream advances identically for every rate.

    Raises:
        ValueError: If rate is outside [0, 1] or a sample is not normal.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"Pseudo-defect rate must be in [0, 1], got {rate}")
    types = list(DefectType)
    out = []
    for sample in samples:
        if rng.random() >= rate:
            empty = np.zeros(sample.gt_mask.shape, dtype=bool)
            out.append(PseudoDefect(sample, empty, empty))
            continue
        defect = inject_defect(sample, types[int(rng.integers(len(types)))], rng)
        out.append(
            PseudoDefect(
                defect,
                (defect.rgb != sample.rgb).any(axis=-1),
                (defect.depth != sample.depth).any(axis=-1),
            )
        )
    return out


# --- Dataset handle ---


class SyntheticDataset:
    """
    Handle on a dataset directory: manifest.json plus one raw tensor file per
    sample and channel. Sample tensors are read lazily; the handle is read-only
    and safe to share between threads.
    """

    def __init__(self, root: Path, spec: DatasetSpec, records: list[SampleRecord]):
        self.root = root
        self.spec = spec
        self.records = records
        self._by_id = {r.id: r for r in records}

    @property
    def image_size(self) -> int:
        return self.spec.image_size

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.spec.classes

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str, class_name: str | None = None) -> list[SampleRecord]:
        """
        Records of one split in manifest order.

        Args:
            name (str): "train" or "test".
            class_name (str | None, optional): Restrict to one class.

        Returns:
            list[SampleRecord]: The matching records.
        """
        return [
            r
            for r in self.records
            if r.split == name and (class_name is None or r.class_name == class_name)
        ]

    def record(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise KeyError(f"Unknown sample id: {sample_id}") from None

    def load(self, sample_id: str) -> PairedSample:
        """
        Reads one sample's tensors.

        Args:
            sample_id (str): The sample id.

        Returns:
            PairedSample: The stored sample.
        """
        record = self.record(sample_id)
        files = record.file_names()
        return PairedSample(
            id=record.id,
            class_name=record.class_name,
            rgb=read_tensor(self.root / files["rgb"]),
            depth=read_tensor(self.root / files["depth"]),
            gt_mask=read_tensor(self.root / files["mask"]),
            label=record.label,
            defect_type=record.defect_type,
            rgb_delta=record.rgb_delta,
            depth_delta=record.depth_delta,
        )

    def samples(self, split: str) -> Iterator[PairedSample]:
        for record in self.split(split):
            yield self.load(record.id)

    def manifest(self) -> dict[str, Any]:
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "spec": self.spec.to_dict(),
            "samples": [r.to_dict() for r in self.records],
        }

    def export(self, path: str | Path) -> "SyntheticDataset":
        """
        Re-serialises the dataset to another directory (bit-identical to the source).

        Args:
            path (str | Path): Destination directory.

        Returns:
            SyntheticDataset: Handle on the copy.
        """
        samples = {r.id: self.load(r.id) for r in self.records}
        return _write_dataset(Path(path), self.spec, self.records, samples)


def _write_dataset(
    target: Path,
    spec: DatasetSpec,
    records: list[SampleRecord],
    samples: dict[str, PairedSample],
) -> SyntheticDataset:
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    except OSError as e:
        raise OSError(f"Cannot write dataset to '{target}': {e}") from e

    (staging / "samples").mkdir()
    for record in records:
        sample = samples[record.id]
        files = record.file_names()
        (staging / files["rgb"]).write_bytes(encode_tensor(sample.rgb))
        (staging / files["depth"]).write_bytes(encode_tensor(sample.depth))
        (staging / files["mask"]).write_bytes(encode_tensor(sample.gt_mask))
    dataset = SyntheticDataset(target, spec, records)
    (staging / "manifest.json").write_text(dumps_manifest(dataset.manifest()), encoding="utf-8")
    publish_directory(staging, target)
    return dataset


def allocate_defects(spec: DatasetSpec, class_name: str) -> list[DefectType]:
    """
    Exact-count defect types for one class's anomalous test samples.

    Counts follow defect_mix by largest remainder; the order is a seeded shuffle.

    Args:
        spec (DatasetSpec): The dataset recipe.
        class_name (str): The class being planned.

    Returns:
        list[DefectType]: One defect type per anomalous test sample.
    """
    n = spec.n_test_anomalous
    names = sorted(spec.defect_mix)
    quotas = [spec.defect_mix[name] * n for name in names]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(names)), key=lambda i: (-(quotas[i] - counts[i]), names[i]))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    types = [DefectType(name) for name, c in zip(names, counts) for _ in range(c)]
    rng = np.random.default_rng(derive_seed(spec.seed, "defects", class_name))
    return [types[i] for i in rng.permutation(len(types))]


def _plan(spec: DatasetSpec) -> list[tuple[str, str, int, DefectType | None]]:
    plan: list[tuple[str, str, int, DefectType | None]] = []
    for class_name in spec.classes:
        for i in range(spec.n_train_normal):
            plan.append(("train", class_name, i, None))
        for i in range(spec.n_test_normal):
            plan.append(("test", class_name, i, None))
        for j, defect in enumerate(allocate_defects(spec, class_name)):
            plan.append(("test", class_name, spec.n_test_normal + j, defect))
    return plan


def _render(spec: DatasetSpec, entry: tuple[str, str, int, DefectType | None]) -> PairedSample:
    split, class_name, index, defect = entry
    sample_id = f"{split}_{class_name}_{index:03d}"
    rng = np.random.default_rng(derive_seed(spec.seed, split, class_name, index))
    sample = make_normal_sample(sample_id, class_name, spec.image_size, rng)
    if defect is not None:
        sample = inject_defect(sample, defect, rng)
    return sample


def generate_dataset(
    spec: DatasetSpec,
    out_dir: str | Path,
    workers: int = 1,
    context: RunContext | None = None,
) -> SyntheticDataset:
    """
    Generates and persists a synthetic paired RGB/depth corpus.

    Every sample draws from its own stream derived from (seed, split, class, index),
    so the content is independent of worker count and scheduling.

    Args:
        spec (DatasetSpec): The dataset recipe.
        out_dir (str | Path): Destination directory (replaced if it exists).
        workers (int, optional): Number of generator threads. Defaults to 1.
        context (RunContext | None, optional): Logging context.

    Returns:
        SyntheticDataset: Handle on the written dataset.

    Raises:
        ValueError: If the spec is invalid.
        OSError: If the output directory is not writable.
    """
    context = context or RunContext({"id": "000000", "cell": "generate"})
    spec.validate()
    plan = _plan(spec)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(lambda e: _render(spec, e), plan))
    else:
        rendered = [_render(spec, e) for e in plan]

    records = [
        SampleRecord(
            id=s.id,
            split=entry[0],
            class_name=s.class_name,
            label=s.label,
            defect_type=s.defect_type,
            rgb_delta=s.rgb_delta,
            depth_delta=s.depth_delta,
        )
        for entry, s in zip(plan, rendered)
    ]
    dataset = _write_dataset(
        Path(out_dir), spec, records, {s.id: s for s in rendered}
    )
    logger.info(
        flm(
            f"Generated {len(records)} samples for {len(spec.classes)} classes at {out_dir}",
            context.ident,
            context.verbose,
        )
    )
    if spec.n_test_anomalous == 0 or spec.n_test_normal == 0:
        logger.warning(
            flm(
                "Test split holds a single label; image-level AUROC is undefined for it.",
                context.ident,
                context.verbose,
            )
        )
    return dataset


def load_dataset(path: str | Path) -> SyntheticDataset:
    """
    Opens a dataset directory and checks it against its manifest.

    Args:
        path (str | Path): The dataset directory.

    Returns:
        SyntheticDataset: A lazy handle on the dataset.

    Raises:
        FileNotFoundError: If the manifest or any listed tensor file is missing
                           (the message names the sample id).
        CorruptFileError: If the manifest is malformed.
        ValueError: If a tensor header disagrees with the manifest's image size.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("format") != DATASET_FORMAT:
            raise CorruptFileError(f"{manifest_path}: not a {DATASET_FORMAT} manifest")
        spec = DatasetSpec.from_dict(manifest["spec"])
        records = [
            SampleRecord(
                id=item["id"],
                split=item["split"],
                class_name=item["class_name"],
                label=int(item["label"]),
                defect_type=item["defect_type"],
                rgb_delta=float(item["rgb_delta"]),
                depth_delta=float(item["depth_delta"]),
            )
            for item in manifest["samples"]
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CorruptFileError(f"{manifest_path}: {e}") from e

    size = spec.image_size
    expected = {"rgb": (size, size, 3), "depth": (size, size, 1), "mask": (size, size)}
    for record in records:
        for channel, name in record.file_names().items():
            file_path = root / name
            if not file_path.is_file():
                raise FileNotFoundError(
                    f"sample {record.id}: missing {channel} tensor file {file_path}"
                )
            shape = read_tensor_shape(file_path)
            if shape != expected[channel]:
                raise ValueError(
                    f"sample {record.id}: {channel} tensor has shape {shape}, "
                    f"manifest implies {expected[channel]}"
                )
    return SyntheticDataset(root, spec, records)
