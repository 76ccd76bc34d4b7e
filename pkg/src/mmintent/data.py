"""Synthetic three-modality intent data with long-tail and noise knobs.

Every class owns a latent anchor direction.  An instance draws a latent code
near its class anchor; text tokens are sampled from a softmax over vocabulary
embeddings scored against that code, while visual and acoustic frames are
fixed random projections of the code plus Gaussian noise.  All modalities of
one instance therefore share structure that contrastive alignment can find.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

PAD_ID = 0
SPLITS = ("train", "val", "test")
MAGIC = b"MMIDSET\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI8I")
METADATA_FILE = "metadata.json"


class DataFormatError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class DatasetSpec:
    num_classes: int = 20
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 1000
    zipf_s: float = 0.0
    # text noise is the probability that a token is replaced by a uniform draw
    noise_text: float = 0.1
    noise_visual: float = 0.5
    noise_acoustic: float = 0.5
    instance_std: float = 0.3
    latent_dim: int = 16
    d_visual: int = 16
    d_acoustic: int = 12
    vocab_size: int = 200
    text_len: int = 12
    av_len: int = 10
    min_text_len: int = 4
    min_av_len: int = 3
    token_sharpness: float = 2.0
    stratify: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")
        if not 0.0 <= self.noise_text <= 1.0:
            raise ValueError("noise_text is a replacement probability in [0, 1]")
        if min(self.noise_visual, self.noise_acoustic, self.instance_std) < 0:
            raise ValueError("noise levels must be >= 0")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (id 0 is padding)")
        if not 1 <= self.min_text_len <= self.text_len or not 1 <= self.min_av_len <= self.av_len:
            raise ValueError("sequence length bounds are inconsistent")

    @classmethod
    def from_dict(cls, values: dict) -> "DatasetSpec":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown dataset spec keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kind = known[key].type
            if kind == "bool" and isinstance(raw, str):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif kind == "bool":
                kwargs[key] = bool(raw)
            elif kind == "int":
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        spec = cls(**kwargs)
        spec.validate()
        return spec


# both presets share the text-heavy layout; they differ in class balance and noise only
_TEXT_HEAVY = dict(instance_std=0.5, token_sharpness=5.0, text_len=16, min_text_len=8)
PRESETS: Dict[str, DatasetSpec] = {
    "clean": DatasetSpec(zipf_s=0.0, noise_text=0.05, noise_visual=1.0, noise_acoustic=1.0, **_TEXT_HEAVY),
    "noisy-longtail": DatasetSpec(zipf_s=1.2, noise_text=0.3, noise_visual=6.0, noise_acoustic=6.0, **_TEXT_HEAVY),
}


@dataclass
class MultimodalBatch:
    """Token sequences for all three modalities plus intent labels.

    ``text`` holds token ids [B, L_t] with 0 as padding; ``visual`` and
    ``acoustic`` hold frames [B, L, d].  Valid lengths are stored per
    instance and the boolean masks are derived from them.
    """

    text: np.ndarray
    text_len: np.ndarray
    visual: np.ndarray
    visual_len: np.ndarray
    acoustic: np.ndarray
    acoustic_len: np.ndarray
    labels: np.ndarray
    num_classes: int
    vocab_size: int
    _masks: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def _mask(self, key: str, lengths: np.ndarray, width: int) -> np.ndarray:
        if key not in self._masks:
            self._masks[key] = np.arange(width)[None, :] < lengths[:, None]
        return self._masks[key]

    @property
    def text_mask(self) -> np.ndarray:
        return self._mask("text", self.text_len, self.text.shape[1])

    @property
    def visual_mask(self) -> np.ndarray:
        return self._mask("visual", self.visual_len, self.visual.shape[1])

    @property
    def acoustic_mask(self) -> np.ndarray:
        return self._mask("acoustic", self.acoustic_len, self.acoustic.shape[1])

    def subset(self, index) -> "MultimodalBatch":
        index = np.asarray(index)
        return MultimodalBatch(
            text=self.text[index], text_len=self.text_len[index],
            visual=self.visual[index], visual_len=self.visual_len[index],
            acoustic=self.acoustic[index], acoustic_len=self.acoustic_len[index],
            labels=self.labels[index], num_classes=self.num_classes, vocab_size=self.vocab_size,
        )

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start:start + batch_size])

    def equals(self, other: "MultimodalBatch") -> bool:
        return (self.num_classes == other.num_classes and self.vocab_size == other.vocab_size
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("text", "text_len", "visual", "visual_len",
                                  "acoustic", "acoustic_len", "labels")))


def zipf_probabilities(num_classes: int, s: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, num_classes + 1) ** s
    return weights / weights.sum()


def allocate_counts(n: int, probs: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` samples to classes.

    Ties in the remainder go to the lower class index, so a nonincreasing
    ``probs`` always yields nonincreasing counts.
    """
    quotas = n * probs
    counts = np.floor(quotas).astype(np.int64)
    remainder = n - counts.sum()
    order = np.lexsort((np.arange(len(probs)), -(quotas - counts)))
    counts[order[:remainder]] += 1
    return counts


@dataclass
class _World:
    anchors: np.ndarray
    proj_visual: np.ndarray
    proj_acoustic: np.ndarray
    vocab_embed: np.ndarray


def _make_world(spec: DatasetSpec, rng: np.random.Generator) -> _World:
    k = spec.latent_dim
    return _World(
        anchors=rng.standard_normal((spec.num_classes, k)),
        proj_visual=rng.standard_normal((k, spec.d_visual)) / np.sqrt(k),
        proj_acoustic=rng.standard_normal((k, spec.d_acoustic)) / np.sqrt(k),
        vocab_embed=rng.standard_normal((spec.vocab_size - 1, k)) / np.sqrt(k),
    )


def _make_split(spec: DatasetSpec, world: _World, n: int, rng: np.random.Generator) -> MultimodalBatch:
    C = spec.num_classes
    if spec.stratify and n < C:
        raise StratificationError(f"split of {n} samples cannot be stratified over {C} classes")
    counts = allocate_counts(n, zipf_probabilities(C, spec.zipf_s))
    labels = rng.permutation(np.repeat(np.arange(C), counts))

    latent = world.anchors[labels] + spec.instance_std * rng.standard_normal((n, spec.latent_dim))

    text_len = rng.integers(spec.min_text_len, spec.text_len + 1, size=n)
    logits = spec.token_sharpness * latent @ world.vocab_embed.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((n, spec.text_len))
    words = np.minimum((u[:, :, None] > cdf[:, None, :]).sum(axis=2), spec.vocab_size - 2) + 1
    replace = rng.random((n, spec.text_len)) < spec.noise_text
    random_words = rng.integers(1, spec.vocab_size, size=(n, spec.text_len))
    text = np.where(replace, random_words, words)
    text = np.where(np.arange(spec.text_len)[None, :] < text_len[:, None], text, PAD_ID)

    av_len = rng.integers(spec.min_av_len, spec.av_len + 1, size=n)
    av_mask = (np.arange(spec.av_len)[None, :] < av_len[:, None])[:, :, None]
    visual = (latent @ world.proj_visual)[:, None, :] + spec.noise_visual * rng.standard_normal(
        (n, spec.av_len, spec.d_visual))
    acoustic = (latent @ world.proj_acoustic)[:, None, :] + spec.noise_acoustic * rng.standard_normal(
        (n, spec.av_len, spec.d_acoustic))

    return MultimodalBatch(
        text=text.astype(np.int64), text_len=text_len.astype(np.int64),
        visual=np.where(av_mask, visual, 0.0), visual_len=av_len.astype(np.int64),
        acoustic=np.where(av_mask, acoustic, 0.0), acoustic_len=av_len.copy().astype(np.int64),
        labels=labels.astype(np.int64), num_classes=C, vocab_size=spec.vocab_size,
    )


def generate(spec: DatasetSpec) -> Dict[str, MultimodalBatch]:
    """Generate disjoint train/val/test splits from one seeded stream."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    world = _make_world(spec, rng)
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    return {name: _make_split(spec, world, sizes[name], rng) for name in SPLITS}


# ---------------------------------------------------------------------------
# binary format


def _arrays(batch: MultimodalBatch):
    return [
        batch.text.astype("<i4"), batch.text_len.astype("<i4"),
        batch.visual.astype("<f8"), batch.visual_len.astype("<i4"),
        batch.acoustic.astype("<f8"), batch.acoustic_len.astype("<i4"),
        batch.labels.astype("<i4"),
    ]


def encode_split(batch: MultimodalBatch) -> bytes:
    n, lt = batch.text.shape
    _, lv, dv = batch.visual.shape
    _, la, da = batch.acoustic.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, lt, lv, la, dv, da, batch.num_classes, batch.vocab_size)
    return header + b"".join(a.tobytes() for a in _arrays(batch))


def decode_split(raw: bytes) -> MultimodalBatch:
    if len(raw) < _HEADER.size:
        raise DataFormatError("truncated header")
    magic, version, n, lt, lv, la, dv, da, C, vocab = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {version}")
    layout = [("<i4", (n, lt)), ("<i4", (n,)), ("<f8", (n, lv, dv)), ("<i4", (n,)),
              ("<f8", (n, la, da)), ("<i4", (n,)), ("<i4", (n,))]
    expected = _HEADER.size + sum(np.dtype(t).itemsize * int(np.prod(s)) for t, s in layout)
    if len(raw) != expected:
        raise DataFormatError(f"payload is {len(raw)} bytes, expected {expected}")
    offset = _HEADER.size
    out = []
    for dtype, shape in layout:
        count = int(np.prod(shape))
        out.append(np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape))
        offset += count * np.dtype(dtype).itemsize
    text, text_len, visual, visual_len, acoustic, acoustic_len, labels = out
    return MultimodalBatch(
        text=text.astype(np.int64), text_len=text_len.astype(np.int64),
        visual=visual.astype(np.float64), visual_len=visual_len.astype(np.int64),
        acoustic=acoustic.astype(np.float64), acoustic_len=acoustic_len.astype(np.int64),
        labels=labels.astype(np.int64), num_classes=C, vocab_size=vocab,
    )


def save_split(batch: MultimodalBatch, path) -> None:
    Path(path).write_bytes(encode_split(batch))


def load_split(path) -> MultimodalBatch:
    return decode_split(Path(path).read_bytes())


def save_dataset(splits: Dict[str, MultimodalBatch], spec: Optional[DatasetSpec], directory) -> Dict[str, Path]:
    """Write one binary file per split plus a JSON metadata sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, batch in splits.items():
        paths[name] = directory / f"{name}.bin"
        save_split(batch, paths[name])
    meta = {
        "format_version": FORMAT_VERSION,
        "splits": {name: p.name for name, p in paths.items()},
        "spec": dataclasses.asdict(spec) if spec is not None else None,
    }
    (directory / METADATA_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def load_dataset(directory):
    """Return ``(spec_or_None, {split: batch})`` from a dataset directory."""
    directory = Path(directory)
    meta_path = directory / METADATA_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"no {METADATA_FILE} in {directory}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported metadata version {meta.get('format_version')}")
    spec = DatasetSpec(**meta["spec"]) if meta.get("spec") else None
    splits = {name: load_split(directory / fname) for name, fname in meta["splits"].items()}
    return spec, splits
