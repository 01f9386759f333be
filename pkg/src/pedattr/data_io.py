"""Binary tensor containers, dataset files, synthetic data, embedding cache.

Container layout (all integers little-endian): 4-byte magic ("VLMW" for
weights, "VLME" for embeddings/images), u32 version, u32 entry count, then
per entry: u16 name length, UTF-8 name, u8 ndim, u32 per dimension, and the
payload as 32-bit floats in row-major order.

Synthetic images are base noise plus constant fills over patch-aligned
rectangles; every label is recomputable from its region's mean intensity,
which keeps the generator honest and the tasks separable.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AttributeSpec, ModelConfig
from .encoders import EncoderWeights, build_vocab, save_vocab, text_forward, tokenize, vision_forward
from .errors import CacheInvalidError, ConfigError, DataFormatError
from .tensor import Prng, derive_seeds, seeded_uniform

MAGIC_WEIGHTS = b"VLMW"
MAGIC_EMBED = b"VLME"
CONTAINER_VERSION = 1
_MAGICS = (MAGIC_WEIGHTS, MAGIC_EMBED)


# --------------------------------------------------------------------------
# Tensor container
# --------------------------------------------------------------------------

def save_container(path: str | Path, entries: list[tuple[str, np.ndarray]],
                   magic: bytes) -> None:
    if magic not in _MAGICS:
        raise DataFormatError(f"unknown container magic {magic!r}")
    seen = set()
    blob = bytearray()
    blob += magic
    blob += struct.pack("<II", CONTAINER_VERSION, len(entries))
    for name, arr in entries:
        if name in seen:
            raise DataFormatError(f"duplicate entry name '{name}'")
        seen.add(name)
        arr = np.asarray(arr, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_container(path: str | Path,
                   expected_magic: bytes | None = None) -> tuple[bytes, dict[str, np.ndarray]]:
    """Parse a container; returns (magic, name -> float64 array, file order)."""
    data = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise DataFormatError(
                f"{path}: truncated while reading {what} at byte offset {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    magic = take(4, "magic")
    if magic not in _MAGICS:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(
            f"{path}: expected magic {expected_magic!r}, found {magic!r} at byte offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CONTAINER_VERSION:
        raise DataFormatError(
            f"{path}: unsupported version {version} at byte offset 4")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        name = take(name_len, f"entry {i} name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"entry '{name}' ndim"))
        dims = [struct.unpack("<I", take(4, f"entry '{name}' dims"))[0]
                for _ in range(ndim)]
        n_vals = 1
        for dim in dims:
            n_vals *= dim
        payload = take(4 * n_vals, f"entry '{name}' payload")
        if name in entries:
            raise DataFormatError(f"{path}: duplicate entry name '{name}'")
        entries[name] = (np.frombuffer(payload, dtype="<f4")
                         .astype(np.float64).reshape(dims))
    if off != len(data):
        raise DataFormatError(
            f"{path}: {len(data) - off} trailing bytes at byte offset {off}")
    return magic, entries


# --------------------------------------------------------------------------
# Dataset on disk
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    image: str                    # relative path to a VLME file holding "image"
    labels: dict[str, int]


@dataclass
class Dataset:
    root: Path
    specs: list[AttributeSpec]
    records: list[AnnotationRecord]

    def load_image(self, record: AnnotationRecord) -> np.ndarray:
        _, entries = load_container(self.root / record.image, MAGIC_EMBED)
        if "image" not in entries:
            raise DataFormatError(f"{record.image}: no 'image' entry")
        return entries["image"]

    def labels_matrix(self) -> np.ndarray:
        """samples x attributes class indices, in prompt order."""
        return np.array([[r.labels[s.name] for s in self.specs]
                         for r in self.records], dtype=np.int64)


def load_prompts(path: str | Path) -> list[AttributeSpec]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise DataFormatError(f"{path}: expected a JSON array of attribute specs")
    specs = []
    for i, item in enumerate(raw):
        if set(item) != {"name", "prompt", "num_classes"}:
            raise DataFormatError(f"{path}: entry {i} must have exactly "
                                  "name/prompt/num_classes")
        specs.append(AttributeSpec(item["name"], item["prompt"],
                                   int(item["num_classes"])))
    return specs


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    prompts = root / "prompts.json"
    annotations = root / "annotations.jsonl"
    if not prompts.is_file() or not annotations.is_file():
        raise DataFormatError(
            f"dataset directory {root} needs prompts.json and annotations.jsonl")
    specs = load_prompts(prompts)
    records = []
    for line_no, line in enumerate(annotations.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(
                f"{annotations}: line {line_no} invalid JSON: {exc}") from None
        if set(raw) != {"id", "image", "labels"}:
            raise DataFormatError(
                f"{annotations}: line {line_no} must have exactly id/image/labels")
        labels = {str(k): int(v) for k, v in raw["labels"].items()}
        for spec in specs:
            if spec.name not in labels:
                raise DataFormatError(
                    f"{annotations}: line {line_no} missing label '{spec.name}'")
            if not 0 <= labels[spec.name] < spec.num_classes:
                raise DataFormatError(
                    f"{annotations}: line {line_no} label '{spec.name}' = "
                    f"{labels[spec.name]} outside [0, {spec.num_classes})")
        records.append(AnnotationRecord(str(raw["id"]), str(raw["image"]), labels))
    return Dataset(root=root, specs=specs, records=records)


# --------------------------------------------------------------------------
# Synthetic dataset generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionAttribute:
    """Attribute driven by the mean intensity of a patch-aligned rectangle."""
    name: str
    prompt: str
    num_classes: int
    region: tuple[int, int, int, int]      # top, left, height, width (pixels)
    threshold: float = 0.5                 # binary attributes only

    def decision_boundaries(self) -> list[float]:
        if self.num_classes == 2:
            return [self.threshold] if 0.0 < self.threshold < 1.0 else []
        return [k / self.num_classes for k in range(1, self.num_classes)]

    def label_for_mean(self, mean: float) -> int:
        if self.num_classes == 2:
            return 1 if mean > self.threshold else 0
        return min(self.num_classes - 1, max(0, int(mean * self.num_classes)))


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int
    image_hw: int
    patch_size: int
    seed: int
    attributes: tuple[RegionAttribute, ...]
    margin: float = 0.05                   # fills keep this far from boundaries

    def validate(self) -> None:
        if self.num_samples < 0:
            raise ConfigError(f"num_samples must be >= 0, got {self.num_samples}")
        if self.image_hw <= 0 or self.patch_size <= 0 or self.image_hw % self.patch_size:
            raise ConfigError(
                f"image_hw {self.image_hw} must be a positive multiple of "
                f"patch_size {self.patch_size}")
        if not 0.0 <= self.margin < 0.5:
            raise ConfigError(f"margin must lie in [0, 0.5), got {self.margin}")
        if not self.attributes:
            raise ConfigError("synthetic spec needs at least one attribute")
        boxes = []
        for attr in self.attributes:
            AttributeSpec(attr.name, attr.prompt, attr.num_classes)
            top, left, height, width = attr.region
            if height <= 0 or width <= 0:
                raise ConfigError(f"region of '{attr.name}' is empty: {attr.region}")
            for value in (top, left, height, width):
                if value % self.patch_size != 0:
                    raise ConfigError(
                        f"region of '{attr.name}' {attr.region} is not aligned to "
                        f"patch size {self.patch_size}")
            if top < 0 or left < 0 or top + height > self.image_hw or left + width > self.image_hw:
                raise ConfigError(
                    f"region of '{attr.name}' {attr.region} exceeds image "
                    f"bounds {self.image_hw}x{self.image_hw}")
            boxes.append((attr.name, top, left, top + height, left + width))
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                if a[1] < b[3] and b[1] < a[3] and a[2] < b[4] and b[2] < a[4]:
                    raise ConfigError(f"region overlap between '{a[0]}' and '{b[0]}'")

    def attribute_specs(self) -> list[AttributeSpec]:
        return [AttributeSpec(a.name, a.prompt, a.num_classes) for a in self.attributes]


def synthetic_spec_from_dict(raw: dict) -> SyntheticSpec:
    allowed = {"num_samples", "image_hw", "patch_size", "seed", "margin", "attributes"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in synthetic spec: {', '.join(unknown)}")
    attrs = []
    for i, item in enumerate(raw.get("attributes", ())):
        item_allowed = {"name", "prompt", "num_classes", "region", "threshold"}
        unknown = sorted(set(item) - item_allowed)
        if unknown:
            raise ConfigError(
                f"unknown key(s) in synthetic attribute {i}: {', '.join(unknown)}")
        try:
            attrs.append(RegionAttribute(
                name=item["name"], prompt=item["prompt"],
                num_classes=int(item["num_classes"]),
                region=tuple(int(v) for v in item["region"]),
                threshold=float(item.get("threshold", 0.5))))
        except KeyError as exc:
            raise ConfigError(f"synthetic attribute {i} missing key {exc}") from None
        if len(attrs[-1].region) != 4:
            raise ConfigError(
                f"region of '{attrs[-1].name}' must be [top, left, height, width]")
    try:
        spec = SyntheticSpec(
            num_samples=int(raw["num_samples"]), image_hw=int(raw["image_hw"]),
            patch_size=int(raw["patch_size"]), seed=int(raw["seed"]),
            margin=float(raw.get("margin", 0.05)), attributes=tuple(attrs))
    except KeyError as exc:
        raise ConfigError(f"synthetic spec missing key {exc}") from None
    spec.validate()
    return spec


def load_synthetic_spec(path: str | Path) -> SyntheticSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"synthetic spec file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return synthetic_spec_from_dict(raw)


def _seeded_uniform_image(hw: int, seed: int) -> np.ndarray:
    return seeded_uniform((hw, hw, 3), seed)


def _draw_fill(prng: Prng, attr: RegionAttribute, margin: float) -> float:
    boundaries = attr.decision_boundaries()
    for _ in range(10000):
        u = prng.uniform()
        if all(abs(u - b) > margin for b in boundaries):
            return u
    raise ConfigError(
        f"cannot draw a fill for '{attr.name}': margin {margin} excludes "
        f"nearly every intensity")


def region_mean(image: np.ndarray, region: tuple[int, int, int, int]) -> float:
    top, left, height, width = region
    return float(np.mean(image[top:top + height, left:left + width, :]))


def recover_label(image: np.ndarray, attr: RegionAttribute) -> int:
    """Re-derive an attribute label from an image by the generating rule."""
    return attr.label_for_mean(region_mean(image, attr.region))


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Dataset:
    """Write images/, annotations.jsonl, prompts.json, and vocab.txt.

    Byte-identical output for identical (spec, out_dir) contents.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    sample_seeds = derive_seeds(spec.seed, max(1, spec.num_samples))
    lines = []
    for i in range(spec.num_samples):
        noise_seed, fill_seed = derive_seeds(sample_seeds[i], 2)
        image = _seeded_uniform_image(spec.image_hw, noise_seed)
        fill_prng = Prng(fill_seed)
        labels = {}
        for attr in spec.attributes:
            fill = _draw_fill(fill_prng, attr, spec.margin)
            top, left, height, width = attr.region
            image[top:top + height, left:left + width, :] = fill
            # The label is derived from the stored (float32) intensity so the
            # on-disk image stays the single source of truth.
            labels[attr.name] = attr.label_for_mean(float(np.float32(fill)))
        sample_id = f"sample_{i:04d}"
        rel_path = f"images/{sample_id}.vlme"
        save_container(out_dir / rel_path, [("image", image)], MAGIC_EMBED)
        lines.append(json.dumps({"id": sample_id, "image": rel_path,
                                 "labels": labels}))
    (out_dir / "annotations.jsonl").write_text("".join(l + "\n" for l in lines))
    prompt_payload = [{"name": a.name, "prompt": a.prompt, "num_classes": a.num_classes}
                      for a in spec.attributes]
    (out_dir / "prompts.json").write_text(json.dumps(prompt_payload, indent=2) + "\n")
    save_vocab(build_vocab([a.prompt for a in spec.attributes]), out_dir / "vocab.txt")
    return load_dataset(out_dir)


# --------------------------------------------------------------------------
# Embedding cache
# --------------------------------------------------------------------------

def _quantize32(arr: np.ndarray) -> np.ndarray:
    """Round to float32 precision, kept as float64 for downstream math.

    Encoder outputs cross the frozen/trainable boundary at storage precision
    so training from a cache is bitwise identical to training from images.
    """
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


@dataclass
class EmbeddedSample:
    sample_id: str
    f_img: np.ndarray            # n_patches x d_model
    cls_embed: np.ndarray        # d_model
    labels: list[int]            # attribute order = prompts.json order


@dataclass
class EmbeddedDataset:
    specs: list[AttributeSpec]
    text_features: list[np.ndarray]    # per attribute, T_i x d_model
    samples: list[EmbeddedSample] = field(default_factory=list)

    def labels_matrix(self) -> np.ndarray:
        return np.array([s.labels for s in self.samples], dtype=np.int64)


def embed_dataset(dataset: Dataset, weights: EncoderWeights, cfg: ModelConfig,
                  vocab: dict[str, int]) -> EmbeddedDataset:
    """Run the frozen encoders over every sample and prompt."""
    _check_specs_match(dataset.specs, cfg)
    text_features = []
    for spec in dataset.specs:
        ids = tokenize(spec.prompt, vocab, cfg.max_tokens)
        text_features.append(_quantize32(text_forward(ids, weights, cfg)))
    embedded = EmbeddedDataset(specs=list(dataset.specs), text_features=text_features)
    for record in dataset.records:
        image = dataset.load_image(record)
        cls_embed, f_img = vision_forward(image, weights, cfg)
        embedded.samples.append(EmbeddedSample(
            sample_id=record.sample_id,
            f_img=_quantize32(f_img),
            cls_embed=_quantize32(cls_embed),
            labels=[record.labels[s.name] for s in dataset.specs]))
    return embedded


def _check_specs_match(specs: list[AttributeSpec], cfg: ModelConfig) -> None:
    if tuple(specs) != tuple(cfg.attributes):
        raise ConfigError(
            "dataset prompts.json and model config disagree on attributes: "
            f"{[s.name for s in specs]} vs {[a.name for a in cfg.attributes]}")


def save_embed_cache(embedded: EmbeddedDataset, path: str | Path) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    for i, ft in enumerate(embedded.text_features):
        entries.append((f"text.{i}.f_text", ft))
    for sample in embedded.samples:
        entries.append((f"sample.{sample.sample_id}.f_img", sample.f_img))
        entries.append((f"sample.{sample.sample_id}.cls", sample.cls_embed))
    save_container(path, entries, MAGIC_EMBED)


def embed_cache(dataset: Dataset, weights: EncoderWeights, cfg: ModelConfig,
                vocab: dict[str, int], out_path: str | Path) -> EmbeddedDataset:
    """Embed a dataset and persist the result as a VLME cache file."""
    embedded = embed_dataset(dataset, weights, cfg, vocab)
    save_embed_cache(embedded, out_path)
    return embedded


def load_embed_cache(path: str | Path, dataset: Dataset,
                     cfg: ModelConfig) -> EmbeddedDataset:
    """Load cached embeddings; labels still come from the dataset annotations."""
    _check_specs_match(dataset.specs, cfg)
    _, entries = load_container(path, MAGIC_EMBED)
    text_features = []
    for i in range(len(dataset.specs)):
        key = f"text.{i}.f_text"
        if key not in entries:
            raise CacheInvalidError(f"{path}: missing entry '{key}'")
        ft = entries[key]
        if ft.ndim != 2 or ft.shape[1] != cfg.d_model or not 1 <= ft.shape[0] <= cfg.max_tokens:
            raise CacheInvalidError(
                f"{path}: entry '{key}' shape {ft.shape} incompatible with "
                f"d_model={cfg.d_model}, max_tokens={cfg.max_tokens}")
        text_features.append(ft)
    embedded = EmbeddedDataset(specs=list(dataset.specs), text_features=text_features)
    for record in dataset.records:
        img_key = f"sample.{record.sample_id}.f_img"
        cls_key = f"sample.{record.sample_id}.cls"
        if img_key not in entries or cls_key not in entries:
            raise CacheInvalidError(f"{path}: missing entries for sample "
                                    f"'{record.sample_id}'")
        f_img, cls_embed = entries[img_key], entries[cls_key]
        if f_img.shape != (cfg.n_patches, cfg.d_model):
            raise CacheInvalidError(
                f"{path}: entry '{img_key}' shape {f_img.shape} incompatible "
                f"with (n_patches={cfg.n_patches}, d_model={cfg.d_model})")
        if cls_embed.shape != (cfg.d_model,):
            raise CacheInvalidError(
                f"{path}: entry '{cls_key}' shape {cls_embed.shape} incompatible "
                f"with d_model={cfg.d_model}")
        embedded.samples.append(EmbeddedSample(
            sample_id=record.sample_id, f_img=f_img, cls_embed=cls_embed,
            labels=[record.labels[s.name] for s in dataset.specs]))
    return embedded


def load_dataset_vocab(dataset: Dataset, override: str | Path | None = None) -> dict[str, int]:
    """Vocab resolution: explicit path, else dataset vocab.txt, else derived."""
    from .encoders import load_vocab
    if override:
        return load_vocab(override)
    candidate = dataset.root / "vocab.txt"
    if candidate.is_file():
        return load_vocab(candidate)
    return build_vocab([s.prompt for s in dataset.specs])
