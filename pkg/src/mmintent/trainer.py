"""Training loop, AdamW, checkpoints and the loss-ablation grid."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import MultimodalBatch
from .losses import LOSS_TERMS, total_loss
from .metrics import classification_report, silhouette
from .model import IntentModel, ModelConfig

logger = logging.getLogger(__name__)

ABLATION_MASKS: Tuple[Tuple[str, ...], ...] = (
    ("cls",),
    ("cls", "contrastive"),
    ("cls", "proto"),
    ("cls", "contrastive", "proto"),
)
METRIC_NAMES = ("ACC", "WF1", "WP", "R")


class ConfigError(ValueError):
    pass


class TrainingNumericError(ad.NumericError):
    pass


def mask_label(mask: Sequence[str]) -> str:
    return "+".join(t for t in LOSS_TERMS if t in mask)


def parse_mask(text: str) -> Tuple[str, ...]:
    parts = [p.strip() for p in text.replace(",", "+").split("+") if p.strip()]
    unknown = set(parts) - set(LOSS_TERMS)
    if unknown or not parts:
        raise ConfigError(f"invalid loss mask {text!r}; terms are {LOSS_TERMS}")
    return tuple(t for t in LOSS_TERMS if t in parts)


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Every encoder is trained from scratch, so the default learning rate
    is far larger than typical fine-tuning rates.
    """

    lr: float = 1e-3
    weight_decay: float = 0.2
    batch_size: int = 32
    tau: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    seeds: Tuple[int, ...] = (0,)
    mask: Tuple[str, ...] = LOSS_TERMS
    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_coarse_layers: int = 2
    p_mask: float = 0.15
    proto_views: str = "fused"
    coarse_kv: str = "literal"
    eval_batch_size: int = 256
    workers: int = 1

    DOC = {
        "lr": "AdamW learning rate",
        "weight_decay": "decoupled weight decay coefficient",
        "batch_size": "training mini-batch size",
        "tau": "temperature for all contrastive softmaxes",
        "max_epochs": "upper bound on training epochs",
        "patience": "epochs without validation-WF1 improvement before stopping",
        "seeds": "comma-separated seeds (ablation grid / default train seed = first)",
        "mask": "enabled loss terms joined by '+': cls, contrastive, proto",
        "d_model": "shared model dimension",
        "n_heads": "attention heads per block",
        "n_enc_layers": "self-attention blocks per modality encoder",
        "n_coarse_layers": "cross-attention blocks in the coarse encoder",
        "p_mask": "token masking probability for the masked text view",
        "proto_views": "fused | per-view-mean",
        "coarse_kv": "literal (K=visual, V=acoustic) | symmetric",
        "eval_batch_size": "batch size for evaluation passes",
        "workers": "parallel processes for the ablation grid",
    }

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.proto_views not in ("fused", "per-view-mean"):
            raise ConfigError(f"unknown proto_views {self.proto_views!r}")
        if self.coarse_kv not in ("literal", "symmetric"):
            raise ConfigError(f"unknown coarse_kv {self.coarse_kv!r}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError("p_mask must lie in [0, 1]")
        parse_mask("+".join(self.mask))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["seeds"] = list(self.seeds)
        out["mask"] = list(self.mask)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        values["seeds"] = tuple(int(s) for s in values.get("seeds", (0,)))
        values["mask"] = tuple(values.get("mask", LOSS_TERMS))
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "seeds":
                value = ",".join(str(s) for s in value)
            elif f.name == "mask":
                value = mask_label(value)
            lines.append(f"# {self.DOC[f.name]}\n{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment; unknown keys are fatal."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                if key == "seeds":
                    values[key] = tuple(int(s) for s in value.split(",") if s.strip())
                elif key == "mask":
                    values[key] = parse_mask(value)
                elif types[key] == "int":
                    values[key] = int(value)
                elif types[key] == "float":
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def model_config(self, data: MultimodalBatch) -> ModelConfig:
        return ModelConfig(
            num_classes=data.num_classes, vocab_size=data.vocab_size,
            d_visual=data.visual.shape[2], d_acoustic=data.acoustic.shape[2],
            d_model=self.d_model, n_heads=self.n_heads, n_enc_layers=self.n_enc_layers,
            n_coarse_layers=self.n_coarse_layers, p_mask=self.p_mask, coarse_kv=self.coarse_kv,
        )


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, lr: float, weight_decay: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingNumericError(f"non-finite gradient in parameter {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MMICKPT\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIQ")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    meta: dict

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        prefix = prefix + "/"
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def save(self, path) -> None:
        entries, chunks, offset = [], [], 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        header = json.dumps({"meta": self.meta, "arrays": entries}, sort_keys=True).encode()
        Path(path).write_bytes(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(header))
                               + header + b"".join(chunks))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if len(raw) < _CKPT_HEADER.size:
            raise CheckpointFormatError("truncated checkpoint")
        magic, version, hlen = _CKPT_HEADER.unpack_from(raw)
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad magic bytes {magic!r}")
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        start = _CKPT_HEADER.size
        try:
            header = json.loads(raw[start:start + hlen])
        except ValueError as exc:
            raise CheckpointFormatError(f"corrupt header: {exc}") from None
        base = start + hlen
        arrays = {}
        for e in header["arrays"]:
            count = int(np.prod(e["shape"]))
            end = base + e["offset"] + 8 * count
            if end > len(raw):
                raise CheckpointFormatError(f"truncated payload for {e['name']}")
            arrays[e["name"]] = np.frombuffer(raw, "<f8", count, base + e["offset"]).reshape(e["shape"]).copy()
        return cls(arrays=arrays, meta=header["meta"])


def build_model(checkpoint: Checkpoint, which: str = "best") -> IntentModel:
    """Rebuild a model from a checkpoint's stored config and parameters."""
    model = IntentModel(ModelConfig(**checkpoint.meta["model_config"]), np.random.default_rng(0))
    model.load_state_dict(checkpoint.group(which))
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Predictions:
    logits: np.ndarray
    h_f: np.ndarray
    fine_weights: np.ndarray
    coarse_weights: np.ndarray

    @property
    def preds(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def predict(model: IntentModel, data: MultimodalBatch, batch_size: int = 256) -> Predictions:
    parts = []
    with ad.no_grad():
        for batch in data.batches(batch_size):
            out = model(batch)
            parts.append((out.logits.data, out.fusion.h_f.data,
                          out.fusion.fine_weights.data, out.fusion.attn_stats.data))
    if not parts:
        raise ConfigError("cannot evaluate an empty split")
    return Predictions(*(np.concatenate(cols, axis=0) for cols in zip(*parts)))


def evaluate(model: IntentModel, data: MultimodalBatch, batch_size: int = 256) -> Dict[str, float]:
    p = predict(model, data, batch_size)
    return classification_report(p.preds, data.labels, data.num_classes)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: List[dict]
    steps: List[dict] = field(default_factory=list)

    @property
    def best_val_wf1(self) -> float:
        return self.best.meta["best_val_wf1"]


def _rng_streams(seed: int):
    init, masking, shuffle = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(masking), np.random.default_rng(shuffle))


def train(config: TrainConfig, splits: Dict[str, MultimodalBatch], seed: Optional[int] = None,
          resume: Optional[Checkpoint] = None, step_log=None) -> TrainResult:
    """Train with early stopping on validation WF1.

    Stops once ``patience`` consecutive epochs pass without a strict
    improvement (so ``patience=0`` runs exactly one epoch) or at
    ``max_epochs``.  ``resume`` continues from a ``last`` checkpoint and
    reproduces the uninterrupted run bit for bit.  ``step_log``, if given, is
    called with each step's record (epoch, step, loss scalars).
    """
    config.validate()
    train_set, val_set = splits.get("train"), splits.get("val")
    if train_set is None or val_set is None or len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training needs non-empty train and val splits")
    seed = config.seeds[0] if seed is None else seed
    init_rng, mask_rng, shuffle_rng = _rng_streams(seed)
    model = IntentModel(config.model_config(train_set), init_rng)
    opt = AdamW(config.lr, config.weight_decay)
    masked_view = "contrastive" in config.mask or config.proto_views == "per-view-mean"

    epoch, best_wf1, best_epoch, bad_epochs = 0, -np.inf, 0, 0
    best_state = model.state_dict()
    history: List[dict] = []
    if resume is not None:
        model.load_state_dict(resume.group("param"))
        best_state = resume.group("best")
        opt.m, opt.v = resume.group("adam_m"), resume.group("adam_v")
        meta = resume.meta
        opt.t = meta["adam_t"]
        epoch, best_wf1 = meta["epoch"], meta["best_val_wf1"]
        best_epoch, bad_epochs = meta["best_epoch"], meta["bad_epochs"]
        history = list(meta["history"])
        mask_rng.bit_generator.state = meta["rng"]["masking"]
        shuffle_rng.bit_generator.state = meta["rng"]["shuffle"]

    named = list(model.named_parameters())
    steps: List[dict] = []
    stopped = resume is not None and (bad_epochs >= config.patience and epoch > 0)
    while not stopped and epoch < config.max_epochs:
        epoch += 1
        order = shuffle_rng.permutation(len(train_set))
        sums = dict.fromkeys(("l_cls", "l_proto", "l_contrastive", "total"), 0.0)
        n_batches = 0
        for step, batch in enumerate(train_set.batches(config.batch_size, order), 1):
            try:
                out = model(batch, masked_view=masked_view, mask_rng=mask_rng)
                losses = total_loss(out.logits, batch.labels, out.bundle, out.fusion, config.tau,
                                    config.mask, config.proto_views)
                losses.check_identities(1e-12)
                model.zero_grad()
                ad.backward(losses.total)
                opt.step(named)
            except ad.NumericError as exc:
                raise TrainingNumericError(f"epoch {epoch} step {step}: {exc}") from exc
            record = {"epoch": epoch, "step": step, **losses.values()}
            steps.append(record)
            if step_log is not None:
                step_log(record)
            for k in sums:
                sums[k] += record[k]
            n_batches += 1
        val = evaluate(model, val_set, config.eval_batch_size)
        improved = val["WF1"] > best_wf1
        if improved:
            best_wf1, best_epoch, bad_epochs = val["WF1"], epoch, 0
            best_state = model.state_dict()
        else:
            bad_epochs += 1
        history.append({"epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
                        **{f"val_{k}": v for k, v in val.items()}})
        logger.info("epoch %d loss %.4f val WF1 %.4f", epoch, history[-1]["total"], val["WF1"])
        if bad_epochs >= config.patience:
            stopped = True

    meta = {
        "train_config": config.to_dict(),
        "model_config": model.config.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "best_epoch": best_epoch,
        "best_val_wf1": best_wf1,
        "bad_epochs": bad_epochs,
        "adam_t": opt.t,
        "history": history,
        "rng": {"masking": mask_rng.bit_generator.state, "shuffle": shuffle_rng.bit_generator.state},
    }
    arrays = {f"best/{k}": v for k, v in best_state.items()}
    best = Checkpoint(arrays=dict(arrays), meta=meta)
    arrays.update({f"param/{k}": v for k, v in model.state_dict().items()})
    arrays.update({f"adam_m/{k}": v.copy() for k, v in opt.m.items()})
    arrays.update({f"adam_v/{k}": v.copy() for k, v in opt.v.items()})
    last = Checkpoint(arrays=arrays, meta=meta)
    return TrainResult(best=best, last=last, history=history, steps=steps)


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class CellResult:
    mask: Tuple[str, ...]
    seed: int
    metrics: Dict[str, float]
    silhouette: float
    coarse_median: float
    epochs: int
    best_val_wf1: float


def run_cell(config: TrainConfig, splits: Dict[str, MultimodalBatch], mask: Sequence[str], seed: int,
             split: str = "test") -> CellResult:
    """Train one (mask, seed) cell and score its best checkpoint on ``split``."""
    cfg = config.replace(mask=tuple(mask), seeds=(seed,))
    result = train(cfg, splits, seed=seed)
    model = build_model(result.best)
    data = splits[split]
    p = predict(model, data, cfg.eval_batch_size)
    return CellResult(
        mask=tuple(mask), seed=seed,
        metrics=classification_report(p.preds, data.labels, data.num_classes),
        silhouette=silhouette(p.h_f, data.labels),
        coarse_median=float(np.median(p.coarse_weights[:, 1])),
        epochs=result.best.meta["epoch"], best_val_wf1=result.best_val_wf1,
    )


def _run_cell_args(args):
    return run_cell(*args)


def run_ablation_grid(config: TrainConfig, splits: Dict[str, MultimodalBatch],
                      masks: Sequence[Sequence[str]] = ABLATION_MASKS) -> List[CellResult]:
    """Every mask x seed cell, ordered mask-major as in the ablation table."""
    config.validate()
    jobs = [(config, splits, tuple(mask), seed) for mask in masks for seed in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_run_cell_args, jobs))
    return [run_cell(*job) for job in jobs]


def summarize(cells: Sequence[CellResult]) -> List[dict]:
    """Seed-averaged mean and (population) std per mask, in first-seen mask order."""
    rows, order = {}, []
    for cell in cells:
        key = mask_label(cell.mask)
        if key not in rows:
            rows[key] = []
            order.append(key)
        rows[key].append(cell)
    out = []
    for key in order:
        group = rows[key]
        row = {"mask": key, "n_seeds": len(group)}
        for m in METRIC_NAMES:
            values = np.array([c.metrics[m] for c in group])
            row[f"{m}_mean"] = float(values.mean())
            row[f"{m}_std"] = float(values.std())
        out.append(row)
    return out
