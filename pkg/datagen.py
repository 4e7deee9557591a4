"""
Synthetic Glass Dataset Generation
Mask-conditioned generation jobs, pluggable generation backends, pair validation,
scale-tagged manifests and feature-distribution comparison
"""

import base64
import hashlib
import io
import json
import logging
import os
import time
import zlib
from abc import ABC, abstractmethod
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from sklearn.manifold import TSNE

from api_models import DatagenConfig, EncoderConfig, Provenance, ScaleTag
from encoder import ViTEncoder, build_encoder, encode
from errors import BackendError, ConfigError, DataError, LeakageError, ParameterError

logger = logging.getLogger(__name__)

PLACEHOLDER = "<object>"
NUM_TEMPLATES = 23
MANIFEST_VERSION = 1
MASK_SUFFIXES = (".png", ".bmp")

# Fixed dataset sizes per scale, not exact multiples of the 1x count
SCALE_COUNTS: Dict[ScaleTag, int] = {
    ScaleTag.X1: 3912,
    ScaleTag.X5: 23467,
    ScaleTag.X10: 46933,
    ScaleTag.X20: 93865,
}


# ---------------------------------------------------------------------------
# Prompt bank
# ---------------------------------------------------------------------------

class PromptBank:
    """23 prompt templates, each holding the <object> placeholder exactly once"""

    def __init__(self, templates: Sequence[str], object_string: str = "transparent glasses"):
        templates = list(templates)
        if len(templates) != NUM_TEMPLATES:
            raise ConfigError(f"Prompt bank needs exactly {NUM_TEMPLATES} templates, got {len(templates)}")
        for template in templates:
            if template.count(PLACEHOLDER) != 1:
                raise ConfigError(f"Template must contain {PLACEHOLDER} exactly once: '{template}'")
        if not object_string:
            raise ConfigError("object_string must not be empty")
        self.templates = templates
        self.object_string = object_string

    @classmethod
    def from_file(cls, path: Union[str, Path], object_string: Optional[str] = None) -> "PromptBank":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Prompt bank not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Prompt bank {path} is not valid JSON: {e}") from e
        templates = raw["templates"] if isinstance(raw, dict) else raw
        if object_string is None and isinstance(raw, dict):
            object_string = raw.get("object_string")
        return cls(templates, object_string or "transparent glasses")

    def __len__(self) -> int:
        return len(self.templates)

    def prompt(self, index: int) -> str:
        return self.templates[index % len(self.templates)].replace(PLACEHOLDER, self.object_string)


# ---------------------------------------------------------------------------
# Masks and jobs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskRecord:
    mask_id: str
    path: str
    split: str = "train"


@dataclass(frozen=True)
class GenerationJob:
    job_id: str
    mask_id: str
    mask_path: str
    replica: int
    template_index: int
    prompt: str
    seed: int
    target_size: int


def load_mask_set(directory: Union[str, Path], split: str = "train") -> List[MaskRecord]:
    """Every mask bitmap in a directory, sorted by file name"""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Mask directory not found: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in MASK_SUFFIXES)
    if not paths:
        raise DataError(f"No mask files in {directory}")
    return [MaskRecord(mask_id=p.stem, path=str(p), split=split) for p in paths]


def job_seed(mask_id: str, replica: int) -> int:
    """uint64 seed derived from (mask_id, replica)"""
    digest = hashlib.sha256(f"{mask_id}:{replica}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def job_count(scale_tag: ScaleTag, count: Optional[int] = None) -> int:
    return count if count is not None else SCALE_COUNTS[ScaleTag(scale_tag)]


def build_jobs(mask_set: Sequence[MaskRecord], bank: PromptBank, scale_tag: ScaleTag = ScaleTag.X1,
               count: Optional[int] = None, target_size: int = 384, single_prompt: bool = False,
               validation_ids: Iterable[str] = ()) -> List[GenerationJob]:
    """
    Cycle the training masks round-robin until the scale's job count is reached.

    The replica index counts how often a mask has been used; the prompt is
    template (seed mod 23), or template 0 in single-prompt mode.
    """
    if not mask_set:
        raise DataError("Mask set is empty")
    validation_ids = set(validation_ids)
    leaked = [m.mask_id for m in mask_set if m.split != "train" or m.mask_id in validation_ids]
    if leaked:
        raise LeakageError(f"Validation-split masks cannot condition generation: {', '.join(leaked[:10])}")

    total = job_count(scale_tag, count)
    jobs = []
    for i in range(total):
        record = mask_set[i % len(mask_set)]
        replica = i // len(mask_set)
        seed = job_seed(record.mask_id, replica)
        template_index = 0 if single_prompt else seed % len(bank)
        jobs.append(GenerationJob(
            job_id=f"{record.mask_id}_r{replica}",
            mask_id=record.mask_id,
            mask_path=record.path,
            replica=replica,
            template_index=template_index,
            prompt=bank.prompt(template_index),
            seed=seed,
            target_size=target_size,
        ))
    logger.info("Built %d generation jobs from %d masks (scale %s)", len(jobs), len(mask_set),
                ScaleTag(scale_tag).value)
    return jobs


# ---------------------------------------------------------------------------
# Bitmaps
# ---------------------------------------------------------------------------

def load_mask(path: Union[str, Path]) -> np.ndarray:
    """Single-channel mask file -> H x W uint8 in {0,1}"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Mask file not found: {path}")
    with Image.open(path) as img:
        array = np.asarray(img.convert("L"))
    return (array >= 128).astype(np.uint8)


def load_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Image file not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_mask(mask: np.ndarray, path: Union[str, Path]) -> None:
    """Store a binary mask as an 8-bit PNG with values {0,255}"""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def save_image(image: np.ndarray, path: Union[str, Path]) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def encode_png(array: np.ndarray) -> str:
    """uint8 H x W or H x W x 3 array -> base64 PNG"""
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_png(payload: str, mode: Optional[str] = None) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(base64.b64decode(payload)))
        if mode:
            img = img.convert(mode)
        return np.asarray(img)
    except Exception as e:
        raise DataError(f"Payload is not a valid base64 PNG: {e}") from e


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    img = Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L")
    return (np.asarray(img.resize((size, size), Image.NEAREST)) >= 128).astype(np.uint8)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class GenerationBackend(ABC):
    """Turns (mask, prompt, seed) into a size x size RGB image"""

    model_version: str = "unknown"

    @abstractmethod
    def generate(self, mask: np.ndarray, prompt: str, seed: int, size: int) -> np.ndarray:
        ...


class ProceduralBackend(GenerationBackend):
    """
    Deterministic stand-in for a diffusion service.

    Random-gradient background, the mask region tinted at alpha 0.25-0.5, and a
    bright specular streak across the glass.
    """

    model_version = "procedural-stub-1"

    def generate(self, mask: np.ndarray, prompt: str, seed: int, size: int) -> np.ndarray:
        mask = resize_mask(np.asarray(mask), size).astype(bool)
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(prompt.encode("utf-8"))])

        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xs + np.sin(angle) * ys
        ramp = (ramp - ramp.min()) / max(float(ramp.max() - ramp.min()), 1e-12)
        start, end = rng.uniform(0, 255, size=3), rng.uniform(0, 255, size=3)
        image = start[None, None, :] * (1 - ramp[..., None]) + end[None, None, :] * ramp[..., None]

        tint = rng.uniform(0, 255, size=3)
        alpha = rng.uniform(0.25, 0.5)
        image[mask] = (1 - alpha) * image[mask] + alpha * tint

        # specular streak: a thin diagonal band clipped to the glass
        offset = rng.uniform(-0.5, 0.5)
        width = rng.uniform(0.02, 0.06)
        streak = np.abs(xs - ys - offset) < width
        image[mask & streak] = 0.3 * image[mask & streak] + 0.7 * 255.0

        return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def make_backend(cfg: DatagenConfig) -> GenerationBackend:
    if cfg.backend == "stub":
        return ProceduralBackend()
    if cfg.backend == "remote":
        if not cfg.backend_url:
            raise ConfigError("backend=remote needs backend_url (or GEM_BACKEND_URL)")
        from api_client import DiffusionServiceClient
        return DiffusionServiceClient(cfg.backend_url, timeout=cfg.timeout)
    raise ConfigError(f"Unknown generation backend '{cfg.backend}'")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_pair(image: np.ndarray, mask: np.ndarray, max_fg_fraction: float = 0.95) -> List[str]:
    """Violations of an image/mask pair; an empty list means the pair is ok"""
    image = np.asarray(image)
    mask = np.asarray(mask)
    violations = []
    if image.shape[:2] != mask.shape[:2] or mask.ndim != 2:
        violations.append(f"dimension mismatch: image {image.shape[:2]}, mask {mask.shape}")
    values = np.unique(mask)
    binary = set(values.tolist()) <= {0, 1} or set(values.tolist()) <= {0, 255}
    if not binary:
        violations.append("non-binary mask values")
    if mask.size:
        fraction = float(np.count_nonzero(mask)) / mask.size
        if not 0.0 < fraction < max_fg_fraction:
            violations.append(f"foreground fraction {fraction:.3f} outside (0, {max_fg_fraction})")
    return violations


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    provenance: Provenance
    prompt: Optional[str] = None
    seed: Optional[int] = None

    def record(self) -> Dict:
        return {
            "type": "entry",
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "provenance": Provenance(self.provenance).value,
            "prompt": self.prompt,
            "seed": self.seed,
        }


@dataclass
class FailureRecord:
    job_id: str
    reason: str

    def record(self) -> Dict:
        return {"type": "failure", "job_id": self.job_id, "reason": self.reason}


@dataclass
class DatasetManifest:
    """
    Line-delimited JSON: one header, then entries and failure records.

    Entry paths are relative to the manifest's directory.
    """
    scale_tag: Optional[ScaleTag] = None
    model_version: Optional[str] = None
    entries: List[ManifestEntry] = field(default_factory=list)
    failures: List[FailureRecord] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def count(self) -> int:
        return len(self.entries)

    def header(self) -> Dict:
        return {
            "type": "header",
            "manifest_version": MANIFEST_VERSION,
            "scale_tag": ScaleTag(self.scale_tag).value if self.scale_tag else None,
            "model_version": self.model_version,
            "count": self.count,
        }

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(self.header()) + "\n")
            for entry in self.entries:
                f.write(json.dumps(entry.record()) + "\n")
            for failure in self.failures:
                f.write(json.dumps(failure.record()) + "\n")
        self.root = path.parent
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"Manifest not found: {path}")
        manifest = cls(root=path.parent)
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    kind = record.pop("type")
                    if kind == "header":
                        if record.get("manifest_version") != MANIFEST_VERSION:
                            raise DataError(f"Unsupported manifest version {record.get('manifest_version')}")
                        manifest.scale_tag = ScaleTag(record["scale_tag"]) if record.get("scale_tag") else None
                        manifest.model_version = record.get("model_version")
                    elif kind == "entry":
                        record["provenance"] = Provenance(record["provenance"])
                        manifest.entries.append(ManifestEntry(**record))
                    elif kind == "failure":
                        manifest.failures.append(FailureRecord(**record))
                    else:
                        raise DataError(f"Unknown record type '{kind}'")
                except DataError:
                    raise
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise DataError(f"Malformed manifest record at {path}:{line_no}: {e}") from e
        return manifest

    def validate_files(self) -> List[Tuple[ManifestEntry, List[str]]]:
        """Re-validate every entry; returns the entries that fail with their violations"""
        problems = []
        for entry in self.entries:
            try:
                violations = validate_pair(load_image(self.resolve(entry.image_path)),
                                           load_mask(self.resolve(entry.mask_path)))
            except DataError as e:
                violations = [str(e)]
            if violations:
                problems.append((entry, violations))
        return problems


def manifest_from_directories(images_dir: Union[str, Path], masks_dir: Union[str, Path],
                              provenance: Provenance = Provenance.REAL,
                              root: Optional[Union[str, Path]] = None) -> DatasetManifest:
    """
    Pair images with same-stem masks (e.g. a real training split).

    Paths are stored relative to root, the directory the manifest will be
    written to. It defaults to the common parent of both folders.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    masks = {m.mask_id: Path(m.path) for m in load_mask_set(masks_dir)}
    if root is None:
        root = Path(*[a for a, b in zip(images_dir.resolve().parts, masks_dir.resolve().parts) if a == b])
    root = Path(root).resolve()
    entries = []
    for image_path in sorted(images_dir.iterdir()):
        if image_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp") or image_path.stem not in masks:
            continue
        entries.append(ManifestEntry(
            image_path=os.path.relpath(image_path.resolve(), root),
            mask_path=os.path.relpath(masks[image_path.stem].resolve(), root),
            provenance=provenance,
        ))
    if not entries:
        raise DataError(f"No image/mask pairs found in {images_dir} and {masks_dir}")
    return DatasetManifest(entries=entries, root=root)


# ---------------------------------------------------------------------------
# Generation run
# ---------------------------------------------------------------------------

@dataclass
class GenerationResult:
    manifest: DatasetManifest
    manifest_path: Path

    @property
    def entries(self) -> List[ManifestEntry]:
        return self.manifest.entries

    @property
    def failures(self) -> List[FailureRecord]:
        return self.manifest.failures


class ManifestWriter:
    """
    Appends entry and failure records to ``manifest.jsonl.partial`` as jobs
    finish, then writes the final manifest (header first, records in job order).

    Only the small per-job records stay in memory. An interrupted run leaves
    the partial file behind, listing every pair already on disk.
    """

    def __init__(self, output_dir: Path, scale_tag: Optional[ScaleTag], model_version: Optional[str]):
        self.path = output_dir / "manifest.jsonl"
        self.partial_path = output_dir / "manifest.jsonl.partial"
        self.manifest = DatasetManifest(scale_tag=scale_tag, model_version=model_version, root=output_dir)
        self.records: Dict[int, Union[ManifestEntry, FailureRecord]] = {}
        self._file = open(self.partial_path, "w", encoding="utf-8")

    def add(self, index: int, record: Union[ManifestEntry, FailureRecord]):
        self.records[index] = record
        self._file.write(json.dumps(record.record()) + "\n")
        self._file.flush()

    def abort(self):
        self._file.close()
        logger.error("Generation interrupted; %d finished jobs listed in %s", len(self.records), self.partial_path)

    def close(self) -> Path:
        self._file.close()
        for i in sorted(self.records):
            record = self.records[i]
            if isinstance(record, FailureRecord):
                self.manifest.failures.append(record)
            else:
                self.manifest.entries.append(record)
        self.manifest.write(self.path)
        self.partial_path.unlink()
        return self.path


def _generate_with_retry(job: GenerationJob, backend: GenerationBackend, retries: int,
                         backoff: float) -> Tuple[np.ndarray, np.ndarray]:
    mask = resize_mask(load_mask(job.mask_path), job.target_size)
    attempt = 0
    while True:
        try:
            image = backend.generate(mask, job.prompt, job.seed, job.target_size)
            return np.asarray(image), mask
        except BackendError as e:
            if attempt >= retries:
                raise
            delay = backoff * (2 ** attempt)
            logger.warning("Job %s failed (%s); retry %d/%d in %.2fs", job.job_id, e, attempt + 1, retries, delay)
            time.sleep(delay)
            attempt += 1


def _write_pair(job: GenerationJob, image: np.ndarray, mask: np.ndarray,
                output_dir: Path) -> Union[ManifestEntry, FailureRecord]:
    violations = validate_pair(image, mask)
    if violations:
        logger.warning("Job %s produced an invalid pair: %s", job.job_id, "; ".join(violations))
        return FailureRecord(job.job_id, "; ".join(violations))
    image_rel = f"images/{job.job_id}.png"
    mask_rel = f"masks/{job.job_id}.png"
    save_image(image, output_dir / image_rel)
    save_mask(mask, output_dir / mask_rel)
    return ManifestEntry(image_rel, mask_rel, Provenance.SYNTHETIC, job.prompt, job.seed)


def run_generation(jobs: Sequence[GenerationJob], backend: GenerationBackend, output_dir: Union[str, Path],
                   scale_tag: Optional[ScaleTag] = None, parallelism: int = 4, retries: int = 3,
                   backoff: float = 0.5) -> GenerationResult:
    """
    Generate one image per job and write images/, masks/ and manifest.jsonl.

    Jobs run on a thread pool with at most ``2 * parallelism`` in flight. Each
    pair is validated and written by this thread as soon as its job finishes.
    A job that still fails after its retries, raises anything else, or whose
    pair fails validation becomes a failure record.
    """
    output_dir = Path(output_dir)
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    (output_dir / "masks").mkdir(parents=True, exist_ok=True)

    writer = ManifestWriter(output_dir, scale_tag, backend.model_version)
    pending = iter(enumerate(jobs))
    window = 2 * parallelism
    try:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            in_flight: Dict[Future, int] = {}

            def submit_next():
                for i, job in pending:
                    in_flight[pool.submit(_generate_with_retry, job, backend, retries, backoff)] = i
                    return

            for _ in range(window):
                submit_next()
            while in_flight:
                done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
                for future in done:
                    i = in_flight.pop(future)
                    job = jobs[i]
                    try:
                        image, mask = future.result()
                        writer.add(i, _write_pair(job, image, mask, output_dir))
                    except (BackendError, DataError) as e:
                        logger.error("Job %s failed: %s", job.job_id, e)
                        writer.add(i, FailureRecord(job.job_id, str(e)))
                    except Exception as e:
                        logger.exception("Job %s raised an unexpected error", job.job_id)
                        writer.add(i, FailureRecord(job.job_id, f"{type(e).__name__}: {e}"))
                    submit_next()
    except BaseException:
        writer.abort()
        raise

    manifest_path = writer.close()
    manifest = writer.manifest
    logger.info("Generated %d pairs, %d failures -> %s", manifest.count, len(manifest.failures), manifest_path)
    return GenerationResult(manifest=manifest, manifest_path=manifest_path)


# ---------------------------------------------------------------------------
# Distribution comparison
# ---------------------------------------------------------------------------

class ImageEmbedder(Protocol):
    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """n RGB images -> n x D features"""


class EncoderEmbedder:
    """Mean-pooled features of the model's own image encoder (offline fallback)"""

    def __init__(self, encoder_cfg: EncoderConfig, encoder: Optional[ViTEncoder] = None, seed: int = 0):
        self.cfg = encoder_cfg
        self.encoder = encoder if encoder is not None else build_encoder(encoder_cfg, seed=seed)

    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        size = self.cfg.image_size
        features = []
        for image in images:
            resized = np.asarray(Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((size, size), Image.BILINEAR))
            fmap = encode(resized.astype(np.float32) / 255.0, self.cfg, encoder=self.encoder)
            features.append(fmap.mean(dim=(-2, -1)).squeeze(0).numpy())
        return np.stack(features).astype(np.float64)


class ThumbnailEmbedder:
    """Flattened low-resolution thumbnails"""

    def __init__(self, size: int = 16):
        self.size = size

    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([
            np.asarray(Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((self.size, self.size),
                                                                               Image.BILINEAR),
                       dtype=np.float64).ravel() / 255.0
            for image in images
        ])


@dataclass
class DistributionComparison:
    points: np.ndarray  # n x 2
    labels: List[str]
    plot_path: Optional[Path] = None
    points_path: Optional[Path] = None

    def group(self, label: str) -> np.ndarray:
        return self.points[[i for i, l in enumerate(self.labels) if l == label]]

    def to_dict(self) -> Dict:
        return {"points": self.points.tolist(), "labels": self.labels}


def reduce_embeddings(embeddings: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    """t-SNE to 2-D; perplexity must be below the number of points"""
    n = embeddings.shape[0]
    if perplexity >= n:
        raise ParameterError(
            f"t-SNE perplexity {perplexity} needs more than {perplexity:g} points, got {n}; "
            f"lower the perplexity or add images"
        )
    tsne = TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca")
    return tsne.fit_transform(embeddings.astype(np.float64))


def compare_distributions(manifests: Sequence[DatasetManifest], embedder: ImageEmbedder,
                          labels: Optional[Sequence[str]] = None, perplexity: float = 30.0, seed: int = 0,
                          output_dir: Optional[Union[str, Path]] = None,
                          plot: Optional[Callable[..., Path]] = None) -> DistributionComparison:
    """Embed every image of >= 2 manifests and reduce them jointly to labelled 2-D points"""
    if len(manifests) < 2:
        raise ParameterError("Distribution comparison needs at least two manifests")
    labels = list(labels) if labels else [f"dataset_{i}" for i in range(len(manifests))]
    if len(labels) != len(manifests):
        raise ParameterError(f"{len(labels)} labels for {len(manifests)} manifests")

    features, point_labels = [], []
    for manifest, label in zip(manifests, labels):
        if manifest.count == 0:
            raise DataError(f"Manifest '{label}' has no entries")
        images = [load_image(manifest.resolve(e.image_path)) for e in manifest.entries]
        features.append(np.asarray(embedder.embed(images), dtype=np.float64))
        point_labels.extend([label] * len(images))

    points = reduce_embeddings(np.concatenate(features), perplexity, seed)
    result = DistributionComparison(points=points, labels=point_labels)
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        result.points_path = output_dir / "tsne_points.json"
        result.points_path.write_text(json.dumps(result.to_dict()), encoding="utf-8")
        if plot is None:
            from visualizer import plot_tsne
            plot = plot_tsne
        result.plot_path = plot(points, point_labels, output_dir / "tsne.png")
    logger.info("Reduced %d embeddings from %d datasets", len(point_labels), len(manifests))
    return result
