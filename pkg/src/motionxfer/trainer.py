"""Training: initialization, multi-video training and few-shot fine-tuning.

Randomness comes from one ``numpy.random.Generator`` owned by the trainer
(batch composition, person order); its state travels with checkpoints so a
resumed run replays the uninterrupted one exactly. Network initialization is
seeded separately from the model configs.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from . import losses as L
from . import renderer, tensorio
from .evalkit import masked_l1
from .geometry import GeometryConfig, GeometryGenerator, SourceFeatures, part_scores
from .synthworld import Dataset
from .texture import TextureConfig, TextureGenerator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "motionxfer-checkpoint/1"


class TrainingError(RuntimeError):
    """A stage diverged or was misconfigured."""


class CheckpointError(ValueError):
    """A checkpoint does not fit the model it is loaded into."""


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StageSchedule:
    epochs: int
    halve_at: tuple[int, ...]
    batch: int
    steps: int = 0  # steps per epoch; 0 means one pass over the training frames

    def __post_init__(self) -> None:
        object.__setattr__(self, "halve_at", tuple(int(e) for e in self.halve_at))
        if self.epochs < 0 or self.batch < 1 or self.steps < 0:
            raise ValueError(f"invalid stage schedule {self}")

    def lr(self, base: float, epoch: int) -> float:
        return base * 0.5 ** sum(1 for e in self.halve_at if epoch >= e)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    adam_eps: float = 1e-8
    init_geometry: StageSchedule = StageSchedule(10, (5,), 16)
    init_texture: StageSchedule = StageSchedule(10, (5,), 8)
    multivideo: StageSchedule = StageSchedule(15, (5, 10), 10)
    b_train: int = 4
    val_frames: int = 20
    grad_clip: float = 10.0
    weights: L.LossWeights = L.LossWeights()
    perceptual: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.b_train < 1:
            raise ValueError("b_train must be >= 1")

    @classmethod
    def desk(cls, **kw: Any) -> "TrainConfig":
        base = cls(
            lr=1e-3,
            init_geometry=StageSchedule(4, (2,), 8),
            init_texture=StageSchedule(4, (2,), 8, steps=500),
            multivideo=StageSchedule(3, (1, 2), 5),
        )
        return replace(base, **kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "TrainConfig":
        d = dict(d)
        for key in ("init_geometry", "init_texture", "multivideo"):
            if key in d and isinstance(d[key], Mapping):
                d[key] = StageSchedule(**d[key])
        if "weights" in d and isinstance(d["weights"], Mapping):
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


@dataclass(frozen=True)
class FinetuneConfig:
    geometry_steps: int = 40
    embedding_steps: int = 300
    lr_geometry: float = 2e-4
    lr_embedding: float = 5e-3
    sources: int = 20
    batch: int = 6
    perceptual: bool = True  # feature term in the image loss
    seed: int = 0

    def __post_init__(self) -> None:
        if self.geometry_steps < 0 or self.embedding_steps < 0:
            raise ValueError("fine-tuning steps must be >= 0")
        if self.sources < 1 or self.batch < 1:
            raise ValueError("sources and batch must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.5, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}; step aborted")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


def clip_grad_norm(grads: Mapping[str, Tensor | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return total


class Optimizer:
    """Adam over a fixed, named parameter set."""

    def __init__(self, params: Mapping[str, Tensor], betas: tuple[float, float], eps: float) -> None:
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, clip: float = 0.0) -> float:
        grads = {k: p.grad for k, p in self.params.items()}
        norm = clip_grad_norm(grads, clip)
        adam_step(self.params, grads, self.state, lr, self.betas, self.eps)
        return norm

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for k in self.params:
            if k in self.state.m:
                out[f"{prefix}.m.{k}"] = self.state.m[k]
                out[f"{prefix}.v.{k}"] = self.state.v[k]
        return out

    def load(self, prefix: str, tensors: Mapping[str, np.ndarray], step: int) -> None:
        self.state = AdamState(step=step)
        for k, p in self.params.items():
            mk, vk = f"{prefix}.m.{k}", f"{prefix}.v.{k}"
            if mk in tensors:
                self.state.m[k] = torch.from_numpy(tensors[mk].copy()).to(p.dtype)
                self.state.v[k] = torch.from_numpy(tensors[vk].copy()).to(p.dtype)


# --------------------------------------------------------------------------
# model bundle


class Model:
    """Both generators plus the frozen perceptual feature extractor."""

    def __init__(self, geometry: GeometryConfig, texture: TextureConfig, seed: int = 0) -> None:
        if geometry.n_parts != texture.n_parts:
            raise ValueError(f"geometry has {geometry.n_parts} parts, texture {texture.n_parts}")
        self.geometry_cfg = geometry
        self.texture_cfg = texture
        self.seed = seed
        self.geometry = GeometryGenerator(geometry, seed=seed)
        self.texture = TextureGenerator(texture, seed=seed + 1)
        self.fx = L.FeatureExtractor(seed=seed + 2)

    @property
    def n_parts(self) -> int:
        return self.geometry_cfg.n_parts

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"geometry.{k}": p for k, p in self.geometry.named_parameters()}
        out.update({f"texture.{k}": p for k, p in self.texture.named_parameters()})
        return out

    def config_json(self) -> dict:
        return {"geometry": self.geometry_cfg.to_json(), "texture": self.texture_cfg.to_json(), "seed": self.seed}

    @classmethod
    def from_config_json(cls, d: Mapping[str, Any]) -> "Model":
        return cls(GeometryConfig(**d["geometry"]), TextureConfig(**d["texture"]), int(d.get("seed", 0)))

    def load_parameters(self, tensors: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name!r}")
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr))

    def parameter_hash(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# batches


def masked_images(batch: Mapping[str, Tensor]) -> Tensor:
    return batch["image"] * batch["mask"].unsqueeze(1)


def sample_person_batch(
    dataset: Dataset,
    person: str,
    n_targets: int,
    n_sources: int,
    rng: np.random.Generator,
    pool: Sequence[int] | None = None,
    targets: Sequence[int] | None = None,
) -> tuple[dict[str, Tensor], dict[str, Tensor], np.ndarray, np.ndarray]:
    """Targets and a disjoint source set, all frames of one person.

    Returns (target batch, source batch, target indices, source indices).
    """
    pool = np.arange(dataset.n_frames(person)) if pool is None else np.asarray(pool)
    if targets is None:
        if len(pool) < n_targets + n_sources:
            raise TrainingError(
                f"{person} has {len(pool)} usable frames, need {n_targets} targets + {n_sources} sources"
            )
        pick = rng.choice(len(pool), n_targets + n_sources, replace=False)
        tgt, src = pool[pick[:n_targets]], pool[pick[n_targets:]]
    else:
        tgt = np.asarray(targets)
        rest = np.setdiff1d(pool, tgt)
        if len(rest) < n_sources:
            raise TrainingError(f"{person}: only {len(rest)} frames left for {n_sources} sources")
        src = rest[rng.choice(len(rest), n_sources, replace=False)]
    return dataset.get(person, tgt), dataset.get(person, src), tgt, src


def split_frames(dataset: Dataset, person: str, val_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Training and validation frame indices; validation is the tail of the sequence."""
    n = dataset.n_frames(person)
    v = min(val_frames, max(n - 2, 0))
    return np.arange(n - v), np.arange(n - v, n)


# --------------------------------------------------------------------------
# background


def merge_background(images: Tensor, masks: Tensor, max_iter: int = 10_000) -> Tensor:
    """Median of the visible background over frames, holes filled by diffusion.

    images: (b, 3, H, W); masks: (b, H, W) foreground. Pixels never seen as
    background are filled iteratively with the mean of their already-known
    4-neighbours.
    """
    imgs = images.detach().cpu().double().numpy()
    bg = masks.detach().cpu().numpy() < 0.5
    obs = np.where(bg[:, None], imgs, np.nan)
    known = bg.any(axis=0)
    out = np.zeros(imgs.shape[1:])
    if known.any():
        out[:, known] = np.nanmedian(obs[:, :, known], axis=0)
    if not known.any():
        return torch.from_numpy(out).to(images.dtype)
    for _ in range(max_iter):
        if known.all():
            break
        pad_v = np.pad(out, ((0, 0), (1, 1), (1, 1)))
        pad_k = np.pad(known, 1).astype(float)
        acc = np.zeros_like(out)
        cnt = np.zeros(known.shape)
        for dy, dx in ((0, 1), (2, 1), (1, 0), (1, 2)):
            k = pad_k[dy:dy + known.shape[0], dx:dx + known.shape[1]]
            acc += pad_v[:, dy:dy + known.shape[0], dx:dx + known.shape[1]] * k
            cnt += k
        grow = (~known) & (cnt > 0)
        out[:, grow] = acc[:, grow] / cnt[grow]
        known = known | grow
    return torch.from_numpy(out).to(images.dtype)


# --------------------------------------------------------------------------
# trainer


@dataclass
class Progress:
    stage: str = "none"  # none | init | multivideo
    epoch: int = 0  # epochs completed within the stage
    step: int = 0


class Trainer:
    def __init__(
        self,
        dataset: Dataset,
        model: Model,
        cfg: TrainConfig,
        log_path: str | Path | None = None,
    ) -> None:
        if dataset.n_parts != model.n_parts:
            raise ValueError(f"dataset has {dataset.n_parts} parts, model {model.n_parts}")
        self.dataset = dataset
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.progress = Progress()
        self.log_path = Path(log_path) if log_path else None
        self.extra_meta: dict[str, Any] = {}  # echoed into every checkpoint
        self.persons = dataset.person_ids("train")
        self.splits = {p: split_frames(dataset, p, cfg.val_frames) for p in self.persons}
        self._new_optimizers()

    def _new_optimizers(self) -> None:
        c = self.cfg
        geo = {f"geometry.{k}": p for k, p in self.model.geometry.named_parameters()}
        tex = {f"texture.{k}": p for k, p in self.model.texture.named_parameters()}
        self.opt_geometry = Optimizer(geo, c.betas, c.adam_eps)
        self.opt_texture = Optimizer(tex, c.betas, c.adam_eps)

    # ---- logging

    def _log(self, record: dict) -> None:
        record = {k: (round(v, 8) if isinstance(v, float) else v) for k, v in record.items()}
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        log.info("%s", record)

    # ---- batching

    def _epoch_batches(self, batch: int) -> list[tuple[str, np.ndarray]]:
        """Single-person target chunks covering every training frame once, person order shuffled."""
        chunks = []
        for p in self.persons:
            train_idx, _ = self.splits[p]
            order = train_idx[self.rng.permutation(len(train_idx))]
            chunks.extend((p, order[i:i + batch]) for i in range(0, len(order), batch))
        perm = self.rng.permutation(len(chunks))
        return [chunks[i] for i in perm]

    def _sources(self, person: str, targets: np.ndarray, b: int) -> np.ndarray:
        train_idx, _ = self.splits[person]
        rest = np.setdiff1d(train_idx, targets)
        return rest[self.rng.choice(len(rest), min(b, len(rest)), replace=False)]

    # ---- stage 1

    def init_geometry_step(self, person: str, targets: np.ndarray, lr: float) -> dict[str, float]:
        m = self.model
        src_idx = self._sources(person, targets, self.cfg.b_train)
        tgt = self.dataset.get(person, targets)
        src = self.dataset.get(person, src_idx)
        self.opt_geometry.zero_grad()
        feats = m.geometry.encode_sources(masked_images(src), src["stickman"])
        C, logits = m.geometry(tgt["stickman"], feats)
        L_C, L_S = L.loss_init_geometry(C, logits, tgt["uv"], tgt["part_scores"])
        loss = L_C + L_S
        if not torch.isfinite(loss):
            raise TrainingError(f"initialization loss diverged ({loss.item()})")
        loss.backward()
        self.opt_geometry.step(lr, self.cfg.grad_clip)
        return {"L_C": L_C.item(), "L_S": L_S.item()}

    def init_texture_step(self, person: str, lr: float) -> dict[str, float]:
        m = self.model
        train_idx, _ = self.splits[person]
        b = int(self.rng.integers(1, self.cfg.init_texture.batch + 1))
        idx = train_idx[self.rng.choice(len(train_idx), b, replace=False)]
        batch = self.dataset.get(person, idx)
        self.opt_texture.zero_grad()
        T = m.texture(batch["partial_atlas"])
        L_T = L.loss_init_texture(T, batch["partial_atlas"], batch["partial_visibility"])
        if not torch.isfinite(L_T):
            raise TrainingError(f"texture initialization loss diverged ({L_T.item()})")
        L_T.backward()
        self.opt_texture.step(lr, self.cfg.grad_clip)
        return {"L_T": L_T.item()}

    def stage_init(self, epochs: int | None = None, on_epoch: Callable[["Trainer"], None] | None = None) -> None:
        sched_g, sched_t = self.cfg.init_geometry, self.cfg.init_texture
        total = sched_g.epochs if epochs is None else epochs
        if self.progress.stage != "init":
            self.progress = Progress(stage="init")
        while self.progress.epoch < total:
            e = self.progress.epoch
            t0 = time.perf_counter()
            lr_g, lr_t = sched_g.lr(self.cfg.lr, e), sched_t.lr(self.cfg.lr, e)
            sums: dict[str, float] = {}
            batches = self._epoch_batches(sched_g.batch)
            for person, targets in batches:
                for k, v in self.init_geometry_step(person, targets, lr_g).items():
                    sums[k] = sums.get(k, 0.0) + v
                self.progress.step += 1
            n_tex = sched_t.steps or max(1, sum(len(self.splits[p][0]) for p in self.persons) // sched_t.batch)
            for _ in range(n_tex):
                person = self.persons[int(self.rng.integers(len(self.persons)))]
                for k, v in self.init_texture_step(person, lr_t).items():
                    sums[k] = sums.get(k, 0.0) + v
            self.progress.epoch += 1
            rec = {"stage": "init", "epoch": self.progress.epoch, "step": self.progress.step, "lr": lr_g,
                   "L_C": sums["L_C"] / len(batches), "L_S": sums["L_S"] / len(batches), "L_T": sums["L_T"] / n_tex}
            rec.update({f"val_{k}": v for k, v in self.validate().items()})
            rec["wall"] = time.perf_counter() - t0
            self._log(rec)
            if on_epoch is not None:
                on_epoch(self)

    # ---- stage 2

    def multivideo_step(self, person: str, targets: np.ndarray, lr: float) -> dict[str, float]:
        m = self.model
        src_idx = self._sources(person, targets, self.cfg.b_train)
        tgt = self.dataset.get(person, targets)
        src = self.dataset.get(person, src_idx)
        self.opt_geometry.zero_grad()
        self.opt_texture.zero_grad()
        T = m.texture(src["partial_atlas"])
        feats = m.geometry.encode_sources(masked_images(src), src["stickman"])
        C, logits = m.geometry(tgt["stickman"], feats)
        S = part_scores(logits)
        fg = renderer.compose(renderer.render_parts(T, C), S)
        terms = L.multivideo_terms(fg, S, C, T, tgt, src["partial_atlas"], src["partial_visibility"],
                                   m.fx if self.cfg.perceptual else None)
        report = L.total_loss(terms, self.cfg.weights)
        report.total.backward()
        self.opt_geometry.step(lr, self.cfg.grad_clip)
        self.opt_texture.step(lr, self.cfg.grad_clip)
        return report.values()

    def stage_multivideo(self, epochs: int | None = None, on_epoch: Callable[["Trainer"], None] | None = None) -> None:
        sched = self.cfg.multivideo
        total = sched.epochs if epochs is None else epochs
        if self.progress.stage != "multivideo":
            self.progress = Progress(stage="multivideo", step=self.progress.step)
            self._new_optimizers()
        while self.progress.epoch < total:
            e = self.progress.epoch
            t0 = time.perf_counter()
            lr = sched.lr(self.cfg.lr, e)
            sums: dict[str, float] = {}
            batches = self._epoch_batches(sched.batch)
            for person, targets in batches:
                for k, v in self.multivideo_step(person, targets, lr).items():
                    sums[k] = sums.get(k, 0.0) + v
                self.progress.step += 1
            self.progress.epoch += 1
            rec = {"stage": "multivideo", "epoch": self.progress.epoch, "step": self.progress.step, "lr": lr}
            rec.update({k: v / len(batches) for k, v in sums.items()})
            rec.update({f"val_{k}": v for k, v in self.validate().items()})
            rec["wall"] = time.perf_counter() - t0
            self._log(rec)
            if on_epoch is not None:
                on_epoch(self)

    # ---- validation

    def validation_sources(self, person: str) -> np.ndarray:
        train_idx, _ = self.splits[person]
        pick = np.linspace(0, len(train_idx) - 1, self.cfg.b_train).round().astype(int)
        return train_idx[pick]

    @torch.no_grad()
    def validate(self) -> dict[str, float]:
        """Held-out frames of the training persons: part accuracy, UV deviation, reconstruction."""
        m = self.model
        acc, dev, recon, l_t = [], [], [], []
        for p in self.persons:
            _, val_idx = self.splits[p]
            if len(val_idx) == 0:
                continue
            src = self.dataset.get(p, self.validation_sources(p))
            tgt = self.dataset.get(p, val_idx)
            feats = m.geometry.encode_sources(masked_images(src), src["stickman"])
            C, logits = m.geometry(tgt["stickman"], feats)
            S = part_scores(logits)
            T = m.texture(src["partial_atlas"])
            acc.append(float((S.argmax(1) == tgt["labels"]).double().mean()))
            dev.append(float(L.reg_coord(C, S, tgt["uv"], tgt["part_scores"])))
            bg = background_of(self.dataset, p)
            img = renderer.render(T, C, S, bg)
            recon.append(masked_l1(img, tgt["image"], tgt["mask"]))
            l_t.append(float(L.loss_init_texture(T, tgt["partial_atlas"], tgt["partial_visibility"])))
        return {
            "part_accuracy": float(np.mean(acc)),
            "coord_deviation": float(np.mean(dev)),
            "recon_l1": float(np.mean(recon)),
            "texture_l1": float(np.mean(l_t)),
        }

    # ---- checkpoints

    def checkpoint_tensors(self) -> dict[str, Tensor]:
        out = dict(self.model.named_parameters())
        out.update(self.opt_geometry.tensors("adam.geometry"))
        out.update(self.opt_texture.tensors("adam.texture"))
        return out

    def checkpoint_meta(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "model": self.model.config_json(),
            "train": self.cfg.to_json(),
            "world": asdict(self.dataset.world),
            "progress": asdict(self.progress),
            "adam_steps": {"geometry": self.opt_geometry.state.step, "texture": self.opt_texture.state.step},
            "rng": self.rng.bit_generator.state,
            **self.extra_meta,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(tensorio.encode_checkpoint(self.checkpoint_tensors(), self.checkpoint_meta()))
        return path

    def restore(self, path: str | Path) -> None:
        tensors, meta = load_checkpoint_file(path)
        if meta["model"] != self.model.config_json():
            raise CheckpointError("checkpoint model config differs from the trainer's model")
        self.model.load_parameters(tensors)
        self._new_optimizers()
        steps = meta.get("adam_steps", {})
        self.opt_geometry.load("adam.geometry", tensors, int(steps.get("geometry", 0)))
        self.opt_texture.load("adam.texture", tensors, int(steps.get("texture", 0)))
        self.progress = Progress(**meta["progress"])
        self.rng.bit_generator.state = meta["rng"]


def background_of(dataset: Dataset, person: str) -> Tensor:
    from .synthworld import background_image

    return torch.from_numpy(background_image(dataset.persons[person], dataset.world)).float()


def load_checkpoint_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = tensorio.decode_checkpoint(Path(path).read_bytes(), path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise tensorio.CorruptFileError(f"{path}: not a motionxfer checkpoint ({meta.get('format')!r})")
    return tensors, meta


def load_model(path: str | Path, expect: Model | None = None) -> tuple[Model, dict]:
    """Model from a checkpoint; with ``expect`` the shapes are validated against that model."""
    tensors, meta = load_checkpoint_file(path)
    model = expect if expect is not None else Model.from_config_json(meta["model"])
    model.load_parameters(tensors)
    return model, meta


# --------------------------------------------------------------------------
# few-shot personalization


@dataclass
class PersonalState:
    """Everything needed to render one person in new poses."""

    geometry: GeometryGenerator
    texture: TextureGenerator
    embedding: Tensor
    background: Tensor
    source_images: Tensor  # foreground-masked
    source_poses: Tensor
    history: list[dict] = field(default_factory=list)

    def atlas(self) -> Tensor:
        return self.texture.decode(self.embedding)

    def source_features(self) -> SourceFeatures:
        return self.geometry.encode_sources(self.source_images, self.source_poses)


def personalize(model: Model, sources: Mapping[str, Tensor]) -> PersonalState:
    """Un-tuned personal state: averaged source embeddings and merged background."""
    with torch.no_grad():
        t = model.texture.encode(sources["partial_atlas"]).mean(dim=0)
        B = merge_background(sources["image"], sources["mask"]).float()
    return PersonalState(
        geometry=copy.deepcopy(model.geometry),
        texture=model.texture,
        embedding=t.clone(),
        background=B,
        source_images=masked_images(sources),
        source_poses=sources["stickman"],
    )


def _eval_test_loss(state: PersonalState, sources: Mapping[str, Tensor], w: L.LossWeights,
                    fx: L.FeatureExtractor | None) -> float:
    with torch.no_grad():
        feats = state.source_features()
        C, logits = state.geometry(sources["stickman"], feats)
        S = part_scores(logits)
        I_hat = renderer.render(state.atlas(), C, S, state.background)
        rep = L.test_loss(I_hat, sources["image"], S, C, sources["part_scores"], sources["uv"], sources["mask"], w, fx)
    return float(rep.total)


def finetune_fewshot(
    model: Model,
    sources: Mapping[str, Tensor],
    cfg: FinetuneConfig,
    weights: L.LossWeights = L.LossWeights(),
    betas: tuple[float, float] = (0.5, 0.999),
) -> PersonalState:
    """Personalize to an unseen person from ``sources`` (all frames of that person).

    Phase 1 tunes the geometry generator (copy) on the test objective; phase 2
    tunes the texture embedding and background with geometry frozen. The
    texture decoder weights are never modified. On divergence the best state
    seen so far is returned.
    """
    fx = model.fx if cfg.perceptual else None
    state = personalize(model, sources)
    rng = np.random.default_rng(cfg.seed)
    b = sources["image"].shape[0]
    for p in model.texture.parameters():
        p.requires_grad_(False)
    try:
        initial = _eval_test_loss(state, sources, weights, fx)
        state.history.append({"phase": "start", "step": 0, "L_test": initial})

        geo_params = dict(state.geometry.named_parameters())
        opt = Optimizer(geo_params, betas, 1e-8)
        with torch.no_grad():
            T_fixed = state.atlas()
        best = (initial, copy.deepcopy(state.geometry.state_dict()))
        for step in range(cfg.geometry_steps):
            idx = torch.as_tensor(rng.choice(b, min(cfg.batch, b), replace=False))
            tgt = {k: v[idx] for k, v in sources.items()}
            opt.zero_grad()
            feats = state.source_features()
            C, logits = state.geometry(tgt["stickman"], feats)
            S = part_scores(logits)
            I_hat = renderer.render(T_fixed, C, S, state.background)
            rep = L.test_loss(I_hat, tgt["image"], S, C, tgt["part_scores"], tgt["uv"], tgt["mask"], weights, fx)
            if not torch.isfinite(rep.total):
                break
            rep.total.backward()
            try:
                opt.step(cfg.lr_geometry, clip=10.0)
            except TrainingError:
                break
            state.history.append({"phase": "geometry", "step": step + 1, "L_batch": rep.total.item()})
        after_geo = _eval_test_loss(state, sources, weights, fx)
        if not math.isfinite(after_geo) or after_geo > best[0]:
            state.geometry.load_state_dict(best[1])
        for p in state.geometry.parameters():
            p.requires_grad_(False)

        with torch.no_grad():
            feats = state.source_features()
            C_all, logits_all = state.geometry(sources["stickman"], feats)
            S_all = part_scores(logits_all)
        t = state.embedding.clone().requires_grad_(True)
        B = state.background.clone().requires_grad_(True)
        opt_tb = Optimizer({"embedding": t, "background": B}, betas, 1e-8)
        start_tb = (t.detach().clone(), B.detach().clone())
        for step in range(cfg.embedding_steps):
            idx = torch.as_tensor(rng.choice(b, min(cfg.batch, b), replace=False))
            opt_tb.zero_grad()
            T = model.texture.decode(t)
            # B learns only from pixels a source shows as background; elsewhere
            # its gradient would soak up the foreground residual.
            seen = (sources["mask"][idx] < 0.5).unsqueeze(1)
            I_hat = renderer.render(T, C_all[idx], S_all[idx], torch.where(seen, B, B.detach()))
            rep = L.test_loss(I_hat, sources["image"][idx], S_all[idx], C_all[idx], sources["part_scores"][idx],
                              sources["uv"][idx], sources["mask"][idx], weights, fx)
            if not torch.isfinite(rep.total):
                break
            rep.total.backward()
            try:
                opt_tb.step(cfg.lr_embedding)
            except TrainingError:
                break
            state.history.append({"phase": "embedding", "step": step + 1, "L_batch": rep.total.item()})
        if cfg.embedding_steps:
            state.embedding = t.detach()
            state.background = B.detach()
        final = _eval_test_loss(state, sources, weights, fx)
        if not math.isfinite(final):
            state.embedding, state.background = start_tb
            final = _eval_test_loss(state, sources, weights, fx)
        state.history.append({"phase": "end", "step": cfg.geometry_steps + cfg.embedding_steps, "L_test": final})
    finally:
        for p in model.texture.parameters():
            p.requires_grad_(True)
    for p in state.geometry.parameters():
        p.requires_grad_(True)
    return state


@torch.no_grad()
def transfer(state: PersonalState, stickmen: Tensor, chunk: int = 16) -> tuple[Tensor, Tensor, Tensor]:
    """Render the personalized model in each target pose.

    Returns (images (F, 3, H, W), scores (F, n+1, H, W), UV maps (F, 2n, H, W)).
    """
    if stickmen.shape[0] == 0:
        n = state.texture.cfg.n_parts
        h, w = state.background.shape[-2:]
        return torch.zeros(0, 3, h, w), torch.zeros(0, n + 1, h, w), torch.zeros(0, 2 * n, h, w)
    feats = state.source_features()
    T = state.atlas()
    imgs, scores, uvs = [], [], []
    for i in range(0, stickmen.shape[0], chunk):
        C, logits = state.geometry(stickmen[i:i + chunk], feats)
        S = part_scores(logits)
        imgs.append(renderer.render(T, C, S, state.background))
        scores.append(S)
        uvs.append(C)
    return torch.cat(imgs), torch.cat(scores), torch.cat(uvs)


def save_personal_state(path: str | Path, state: PersonalState, model_meta: Mapping[str, Any],
                        extra: Mapping[str, Any] | None = None) -> Path:
    tensors: dict[str, Tensor] = {f"geometry.{k}": v for k, v in state.geometry.state_dict().items()}
    tensors["embedding"] = state.embedding
    tensors["background"] = state.background
    tensors["source_images"] = state.source_images
    tensors["source_poses"] = state.source_poses
    meta = {"format": CHECKPOINT_FORMAT, "kind": "personal", "model": dict(model_meta), **(extra or {})}
    Path(path).write_bytes(tensorio.encode_checkpoint(tensors, meta))
    return Path(path)


def load_personal_state(path: str | Path, model: Model) -> PersonalState:
    tensors, meta = load_checkpoint_file(path)
    if meta.get("kind") != "personal":
        raise CheckpointError(f"{path} is not a personalized state")
    geo = copy.deepcopy(model.geometry)
    sd = {k[len("geometry."):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("geometry.")}
    geo.load_state_dict(sd)
    return PersonalState(
        geometry=geo,
        texture=model.texture,
        embedding=torch.from_numpy(tensors["embedding"].copy()),
        background=torch.from_numpy(tensors["background"].copy()),
        source_images=torch.from_numpy(tensors["source_images"].copy()),
        source_poses=torch.from_numpy(tensors["source_poses"].copy()),
    )
