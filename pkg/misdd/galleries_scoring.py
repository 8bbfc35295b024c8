from .context import RunContext
from .data_synth import PairedSample
from .logger import logger, format_log_message as flm
from .missing_config import MissingLevel, MissingSchedule, ModalityIndicator
from .model import MisddModel
from .safeguards import require_unit_interval, require_unit_norm
from .tensor_io import TensorRecord, load_checkpoint, save_checkpoint, write_tensor
from .text_branch import TEMPERATURE, TextEmbeddingPair
from .vision_encoder import VisualFeatures
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from PIL import Image
import numpy as np
import torch
import torch.nn.functional as F

GALLERY_BATCH: int = 32


class GalleryKind(str, Enum):
    RGB = "rgb"
    THREE_D = "3d"
    TEXT = "text"


@dataclass
class Gallery:
    """
    Stored unit-norm feature rows of one kind.

    Visual galleries hold pooled features in `entries` and, per exported layer,
    patch-token features in `tokens`. The text gallery holds two rows per class,
    normal then abnormal, in `labels` order.
    """

    kind: GalleryKind
    entries: torch.Tensor
    tokens: dict[int, torch.Tensor] = field(default_factory=dict)
    labels: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return self.entries.shape[0] == 0

    def __len__(self) -> int:
        return int(self.entries.shape[0])


@dataclass
class GallerySet:
    rgb: Gallery
    depth: Gallery
    text: Gallery

    def visual(self, branch: str) -> Gallery:
        return self.rgb if branch == "rgb" else self.depth

    def text_pair(self, class_name: str) -> TextEmbeddingPair:
        """
        Raises:
            ValueError: If the text gallery has no entry for the class.
        """
        if class_name not in self.text.labels:
            raise ValueError(f"Text gallery has no entry for class '{class_name}'")
        row = 2 * self.text.labels.index(class_name)
        return TextEmbeddingPair(self.text.entries[row], self.text.entries[row + 1])


@dataclass
class ScorePair:
    """Image-level score and H x W pixel map, both in [0, 1]."""

    s_im: float
    s_px: np.ndarray


def build_galleries(
    model: MisddModel,
    samples: Sequence[PairedSample],
    schedule: MissingSchedule,
    context: RunContext | None = None,
) -> GallerySet:
    """
    Encodes the normal training samples and stores the features of present modalities.

    Args:
        model (MisddModel): The trained model.
        samples (Sequence[PairedSample]): Training normals, in schedule order.
        schedule (MissingSchedule): Their availability.
        context (RunContext | None, optional): Logging context.

    Returns:
        GallerySet: RGB, 3D and text galleries; a modality with no present
        sample yields an empty gallery and a warning.
    """
    context = context or RunContext({"id": "000000", "cell": "galleries"})
    if len(samples) != schedule.n:
        raise ValueError(f"Schedule covers {schedule.n} samples, got {len(samples)}")
    pooled: dict[str, list[torch.Tensor]] = {"rgb": [], "3d": []}
    tokens: dict[str, dict[int, list[torch.Tensor]]] = {"rgb": {}, "3d": {}}
    with torch.no_grad():
        for start in range(0, len(samples), GALLERY_BATCH):
            batch = list(samples[start : start + GALLERY_BATCH])
            inds = list(schedule.assignments[start : start + GALLERY_BATCH])
            features = model.encode_samples(batch, inds, schedule.level)
            for branch, flags in (
                ("rgb", [i.m_rgb for i in inds]),
                ("3d", [i.m_3d for i in inds]),
            ):
                present = torch.tensor(flags, dtype=torch.bool)
                pooled[branch].append(features[branch].pooled[present])
                for layer, t in features[branch].per_layer.items():
                    tokens[branch].setdefault(layer, []).append(t[present].reshape(-1, t.shape[-1]))

        classes = sorted({s.class_name for s in samples})
        text_rows = []
        for class_name in classes:
            pair = model.text_pair(class_name, context)
            text_rows += [pair.normal, pair.abnormal]

    width = model.encoder.config.embed_dim
    galleries = {}
    for branch, kind in (("rgb", GalleryKind.RGB), ("3d", GalleryKind.THREE_D)):
        entries = (
            torch.cat(pooled[branch]) if pooled[branch] else torch.zeros(0, width)
        )
        galleries[branch] = Gallery(
            kind,
            entries,
            {layer: torch.cat(parts) for layer, parts in tokens[branch].items()},
        )
        if galleries[branch].empty:
            logger.warning(
                flm(
                    f"No training sample has the {branch} modality; its gallery is empty.",
                    context.ident,
                    context.verbose,
                )
            )
    text = Gallery(GalleryKind.TEXT, torch.stack(text_rows), labels=tuple(classes))
    logger.info(
        flm(
            f"Galleries: {len(galleries['rgb'])} rgb, {len(galleries['3d'])} 3d, "
            f"{len(classes)} text classes",
            context.ident,
            context.verbose,
        )
    )
    return GallerySet(galleries["rgb"], galleries["3d"], text)


def image_score(
    f_pooled: torch.Tensor, text_pair: TextEmbeddingPair, temperature: float = TEMPERATURE
) -> torch.Tensor:
    """
    Abnormal probability of a unit-norm feature against the (normal, abnormal) text rows.

    Args:
        f_pooled (torch.Tensor): (..., e) unit-norm features.
        text_pair (TextEmbeddingPair): The class's text embeddings.
        temperature (float, optional): Softmax temperature.

    Returns:
        torch.Tensor: (...) probabilities in [0, 1].

    Raises:
        ValueError: If a feature is not unit-norm.
    """
    require_unit_norm(f_pooled, "visual feature")
    rows = text_pair.stack().to(f_pooled.dtype)
    logits = f_pooled @ rows.T / temperature
    return torch.softmax(logits, dim=-1)[..., 1]


def pixel_map(
    per_layer: dict[int, torch.Tensor],
    text_pair: TextEmbeddingPair,
    image_size: int,
    layers: Sequence[int] | None = None,
    temperature: float = TEMPERATURE,
) -> torch.Tensor:
    """
    Token-level abnormal probabilities averaged over layers and upsampled.

    Args:
        per_layer (dict[int, torch.Tensor]): Layer -> (B, n, e) or (n, e) unit-norm tokens.
        text_pair (TextEmbeddingPair): The class's text embeddings.
        image_size (int): Output resolution H = W.
        layers (Sequence[int] | None, optional): Layers that must be present;
            defaults to every given layer.
        temperature (float, optional): Softmax temperature.

    Returns:
        torch.Tensor: (B, H, W) or (H, W) map in [0, 1].

    Raises:
        ValueError: If a required layer is missing or the token count is not square.
    """
    layers = sorted(per_layer) if layers is None else list(layers)
    missing = [layer for layer in layers if layer not in per_layer]
    if not layers or missing:
        raise ValueError(f"Missing layer features for pixel map: {missing or 'none given'}")
    probabilities = torch.stack(
        [image_score(per_layer[layer], text_pair, temperature) for layer in layers]
    ).mean(dim=0)
    return _upsample(probabilities, image_size)


def _upsample(token_scores: torch.Tensor, image_size: int) -> torch.Tensor:
    squeeze = token_scores.dim() == 1
    if squeeze:
        token_scores = token_scores.unsqueeze(0)
    n = token_scores.shape[-1]
    grid = int(round(n**0.5))
    if grid * grid != n:
        raise ValueError(f"{n} tokens do not form a square patch grid")
    grid_map = token_scores.reshape(-1, 1, grid, grid)
    upsampled = F.interpolate(
        grid_map, size=(image_size, image_size), mode="bilinear", align_corners=False
    )[:, 0].clamp(0.0, 1.0)
    return upsampled[0] if squeeze else upsampled


def harmonic_fuse(
    i_score: torch.Tensor | float, p_map: torch.Tensor
) -> torch.Tensor:
    """
    Elementwise harmonic mean 2ab / (a + b), with H(0, b) = H(a, 0) = 0.

    The image score broadcasts over the map.

    Raises:
        ValueError: If an input leaves [0, 1].
    """
    a = torch.as_tensor(i_score, dtype=p_map.dtype)
    require_unit_interval(a, "image score")
    require_unit_interval(p_map, "pixel map")
    total = a + p_map
    safe = torch.where(total > 0, total, torch.ones_like(total))
    return torch.where(total > 0, 2 * a * p_map / safe, torch.zeros_like(total))


def memory_bank_score(f_tokens: torch.Tensor, gallery: torch.Tensor) -> torch.Tensor:
    """
    Per-token 1 - max cosine similarity to gallery rows, clamped to [0, 1].

    Args:
        f_tokens (torch.Tensor): (..., n, e) unit-norm tokens.
        gallery (torch.Tensor): (m, e) unit-norm gallery rows.

    Raises:
        ValueError: If the gallery is empty.
    """
    if gallery.shape[0] == 0:
        raise ValueError("Memory bank gallery is empty")
    similarity = f_tokens @ gallery.to(f_tokens.dtype).T
    return (1.0 - similarity.amax(dim=-1)).clamp(0.0, 1.0)


def _branch_maps(
    features: VisualFeatures,
    pair: TextEmbeddingPair,
    image_size: int,
    gallery: Gallery | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    i_score = image_score(features.pooled, pair)
    p_map = pixel_map(features.per_layer, pair, image_size)
    if gallery is not None and gallery.tokens:
        memory = torch.stack(
            [
                memory_bank_score(t, gallery.tokens[layer])
                for layer, t in sorted(features.per_layer.items())
            ]
        ).mean(dim=0)
        p_map = torch.maximum(p_map, _upsample(memory, image_size))
    fused = harmonic_fuse(i_score.view(-1, 1, 1), p_map)
    return i_score, fused


def detect_batch(
    model: MisddModel,
    samples: Sequence[PairedSample],
    galleries: GallerySet,
    indicators: Sequence[ModalityIndicator],
    level: MissingLevel | str = MissingLevel.INPUT,
    memory_bank: bool = False,
) -> list[ScorePair]:
    """
    Scores a batch of samples of any classes.

    Both branches are always evaluated on their (possibly dummy) inputs;
    S_im is the branch maximum of the image scores and S_px the elementwise
    branch maximum of the harmonic-fused maps.

    Raises:
        ValueError: If a sample's class has no text gallery entry, or the memory
                    bank is requested with an empty visual gallery.
    """
    pairs = [galleries.text_pair(s.class_name) for s in samples]
    size = model.image_size
    with torch.no_grad():
        features = model.encode_samples(samples, indicators, level)
        per_branch = {}
        for branch in ("rgb", "3d"):
            gallery = None
            if memory_bank:
                gallery = galleries.visual(branch)
                if gallery.empty:
                    raise ValueError(f"Memory bank requested but the {branch} gallery is empty")
            scores, maps = [], []
            for i, pair in enumerate(pairs):
                single = VisualFeatures(
                    {layer: t[i : i + 1] for layer, t in features[branch].per_layer.items()},
                    features[branch].pooled[i : i + 1],
                )
                i_score, fused = _branch_maps(single, pair, size, gallery)
                scores.append(i_score[0])
                maps.append(fused[0])
            per_branch[branch] = (torch.stack(scores), torch.stack(maps))

    s_im = torch.maximum(per_branch["rgb"][0], per_branch["3d"][0])
    s_px = torch.maximum(per_branch["rgb"][1], per_branch["3d"][1])
    return [
        ScorePair(float(s_im[i]), s_px[i].cpu().numpy().astype(np.float32))
        for i in range(len(samples))
    ]


def detect(
    sample: PairedSample,
    model: MisddModel,
    galleries: GallerySet,
    ind: ModalityIndicator,
    level: MissingLevel | str = MissingLevel.INPUT,
    memory_bank: bool = False,
) -> ScorePair:
    """Scores one sample; see detect_batch."""
    return detect_batch(model, [sample], galleries, [ind], level, memory_bank)[0]


def _gallery_records(gallery: Gallery, name: str) -> list[TensorRecord]:
    records = [TensorRecord(f"gallery/{name}", gallery.entries.detach().cpu().numpy())]
    for layer, tokens in sorted(gallery.tokens.items()):
        records.append(
            TensorRecord(f"gallery/{name}/layer{layer}", tokens.detach().cpu().numpy())
        )
    return records


def save_galleries(path: str | Path, galleries: GallerySet) -> Path:
    """Writes the galleries as a checkpoint container."""
    records = (
        _gallery_records(galleries.rgb, "rgb")
        + _gallery_records(galleries.depth, "3d")
        + _gallery_records(galleries.text, "text")
    )
    meta = {
        "text_labels": list(galleries.text.labels),
        "layers": {
            "rgb": sorted(galleries.rgb.tokens),
            "3d": sorted(galleries.depth.tokens),
        },
    }
    return save_checkpoint(path, records, meta)


def load_galleries(path: str | Path) -> GallerySet:
    """
    Reads galleries written by save_galleries.

    Raises:
        FileNotFoundError: If the container does not exist.
        CorruptFileError: If it is malformed.
    """
    records, meta = load_checkpoint(path)
    arrays = {r.name: torch.from_numpy(r.array) for r in records}

    def visual(name: str, kind: GalleryKind) -> Gallery:
        return Gallery(
            kind,
            arrays[f"gallery/{name}"],
            {int(layer): arrays[f"gallery/{name}/layer{layer}"] for layer in meta["layers"][name]},
        )

    return GallerySet(
        visual("rgb", GalleryKind.RGB),
        visual("3d", GalleryKind.THREE_D),
        Gallery(
            GalleryKind.TEXT, arrays["gallery/text"], labels=tuple(meta["text_labels"])
        ),
    )


def export_heatmap(
    out_dir: str | Path, sample: PairedSample, score: ScorePair, ind: ModalityIndicator
) -> list[Path]:
    """
    Writes a sample's pixel map as grayscale PNG, as an overlay on the available
    modality, and as a raw tensor file.

    Returns:
        list[Path]: The written files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    heat = np.clip(score.s_px, 0.0, 1.0)
    gray = (heat * 255).round().astype(np.uint8)
    base = (
        sample.rgb
        if ind.m_rgb
        else np.repeat(sample.depth, 3, axis=2)
    )
    red = np.zeros_like(base)
    red[..., 0] = 1.0
    alpha = 0.5 * heat[..., None]
    overlay = ((1 - alpha) * base + alpha * red).clip(0, 1)

    paths = [
        out / f"{sample.id}.png",
        out / f"{sample.id}.overlay.png",
        out / f"{sample.id}.score.bin",
    ]
    Image.fromarray(gray).save(paths[0])
    Image.fromarray((overlay * 255).round().astype(np.uint8)).save(paths[1])
    write_tensor(paths[2], heat.astype(np.float32))
    return paths
