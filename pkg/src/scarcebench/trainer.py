"""Weighted multi-head training: loss composition, plans and the stage loop.

A :class:`TrainingPlan` is an ordered list of stages.  MTL is one stage
with every head; curriculum (CL) adds one head per stage and continues from
the previous stage's parameters; the rotation-pretrain preset trains the
rotation head alone before the classification stages.  Every stage
restarts the cosine schedule.

All randomness is keyed: the data order of an epoch comes from
``(train seed, stage, epoch)`` and the edits of a head at a step from
``(train seed, stage, epoch, step, head)``, so a run resumed from a
checkpoint replays exactly the stream an uninterrupted run would see.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml

from .backbone import FeatureMap
from .data import Batch, RegionDataset, iter_batches
from .datamodel import ALL_HEADS, IMAGE_HEADS, derive_seed, keyed_rng
from .heads import cls_loss, patch_location_edit, rotation_edit
from .model import ModelConfig, RegionModel, model_from_descriptor

DEFAULT_WEIGHTS = {
    "attribute": 25.0,
    "hierarchy": 1.0,
    "scene": 0.2,
    "part": 25.0,
    "bbox": 5.0,
    "seg_region": 0.5,
    "seg_fcn": 0.5,
    "stuff": 0.5,
    "rotation": 10.0,
    "patch_location": 1.0,
}
DIVERGENCE_LIMIT = 1e6
METRIC_COLUMNS = ("step", "stage", "head", "loss", "lr", "acc")
PROBE_KEY = 999_999
PLAN_MODES = ("mtl", "cl", "rotation_pretrain", "custom")


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, head: str, value: float):
        super().__init__(f"non-finite loss {value} in head {head!r}")
        self.head = head


class ConfigError(ValueError):
    pass


class MissingConfigKey(ConfigError):
    def __init__(self, key: str):
        super().__init__(f"missing required config key {key!r}")
        self.key = key


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SupervisionConfig:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def weight(self, head: str) -> float:
        if head == "cls":
            return 1.0
        return float(self.weights[head])

    def with_weights(self, **overrides) -> "SupervisionConfig":
        return SupervisionConfig({**self.weights, **overrides})


@dataclass(frozen=True)
class Stage:
    heads: tuple[str, ...]
    epochs: int = 1
    lr: float = 0.1
    steps: int | None = None  # overrides epochs when set
    schedule: str = "cosine"

    def __post_init__(self):
        unknown = [h for h in self.heads if h not in ALL_HEADS]
        if unknown:
            raise ConfigError(f"unknown heads {unknown}; known: {list(ALL_HEADS)}")
        if len(set(self.heads)) != len(self.heads):
            raise ConfigError(f"duplicate heads in stage {self.heads}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class TrainingPlan:
    stages: tuple[Stage, ...]
    batch_size: int = 8
    short_edge: int = 800
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    mode: str = "custom"
    workers: int = 0
    grad_clip: float | None = 5.0  # max global gradient norm; None disables

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a plan needs at least one stage")
        if self.mode not in PLAN_MODES:
            raise ConfigError(f"plan mode must be one of {PLAN_MODES}")
        if self.mode != "rotation_pretrain" and "cls" not in self.stages[0].heads:
            raise ConfigError("the first stage must train cls")

    @property
    def heads(self) -> tuple[str, ...]:
        seen: list[str] = []
        for s in self.stages:
            seen += [h for h in s.heads if h not in seen]
        return tuple(seen)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [{**asdict(s), "heads": list(s.heads)} for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingPlan":
        d = dict(d)
        d["stages"] = tuple(Stage(**{**s, "heads": tuple(s["heads"])}) for s in d["stages"])
        return cls(**d)


def mtl_plan(heads=(), epochs: int = 6, lr: float = 0.1, **kw) -> TrainingPlan:
    active = ("cls", *[h for h in heads if h != "cls"])
    return TrainingPlan((Stage(active, epochs, lr, kw.pop("steps", None)),), mode="mtl", **kw)


def cl_plan(order=(), epochs: int = 6, lr: float = 0.1, **kw) -> TrainingPlan:
    """``[cls] -> [cls, order[0]] -> [cls, order[0], order[1]] ...``"""
    steps = kw.pop("steps", None)
    active = ["cls"]
    stages = [Stage(tuple(active), epochs, lr, steps)]
    for h in order:
        if h == "cls":
            continue
        active.append(h)
        stages.append(Stage(tuple(active), epochs, lr, steps))
    return TrainingPlan(tuple(stages), mode="cl", **kw)


def rotation_pretrain_plan(heads=(), epochs: int = 6, lr: float = 0.1, **kw) -> TrainingPlan:
    steps = kw.pop("steps", None)
    active = ("cls", *[h for h in heads if h not in ("cls", "rotation")])
    return TrainingPlan((Stage(("rotation",), epochs, lr, steps), Stage(active, epochs, lr, steps)), mode="rotation_pretrain", **kw)


PRESETS = {"mtl": mtl_plan, "cl": cl_plan, "rotation_pretrain": rotation_pretrain_plan}


def parse_stages(text: str, epochs: int, lr: float, **kw) -> TrainingPlan:
    """``"cls;cls,seg_fcn;cls,seg_fcn,attribute"`` -> explicit stages."""
    stages = tuple(Stage(tuple(h.strip() for h in part.split(",") if h.strip()), epochs, lr) for part in text.split(";") if part.strip())
    return TrainingPlan(stages, mode="custom", **kw)


REQUIRED_KEYS = ("model", "plan", "plan.mode", "plan.heads", "plan.epochs", "plan.lr", "plan.batch_size", "plan.seed")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    plan: TrainingPlan
    supervision: SupervisionConfig

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "plan": self.plan.to_dict(), "weights": dict(sorted(self.supervision.weights.items()))}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _lookup(doc: dict, dotted: str):
    cur = doc
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise MissingConfigKey(dotted)
        cur = cur[part]
    return cur


def config_from_dict(doc: dict, overrides: dict | None = None) -> TrainConfig:
    """Build a config from a parsed YAML document.

    Documented keys::

        model:   {extractor: {arch, channels, strides, norm, width},
                  dim, pool_size, mask_size, mode, crop_size, stuff_combined}
        plan:    {mode: mtl|cl|rotation_pretrain, heads: [...], epochs, lr,
                  batch_size, seed, short_edge, steps, momentum,
                  weight_decay, workers, grad_clip,
                  stages: "cls;cls,seg_fcn"}
        weights: {head: weight, ...}   # merged over the defaults

    ``overrides`` replaces ``plan`` entries (used for CLI flags); required
    keys may come from either.
    """
    _lookup(doc, "model")
    plan_doc = {**(_lookup(doc, "plan") or {}), **{k: v for k, v in (overrides or {}).items() if v is not None}}
    for key in REQUIRED_KEYS:
        _lookup({**doc, "plan": plan_doc}, key)
    model = ModelConfig.from_dict(doc["model"] or {})
    kw = {k: plan_doc[k] for k in ("batch_size", "seed", "short_edge", "momentum", "weight_decay", "workers", "grad_clip") if k in plan_doc}
    kw["batch_size"], kw["seed"] = int(kw["batch_size"]), int(kw["seed"])
    epochs, lr = int(plan_doc["epochs"]), float(plan_doc["lr"])
    if plan_doc.get("stages"):
        plan = parse_stages(plan_doc["stages"], epochs, lr, **kw)
    else:
        mode = plan_doc["mode"]
        if mode not in PRESETS:
            raise ConfigError(f"plan.mode must be one of {sorted(PRESETS)}, got {mode!r}")
        heads = plan_doc["heads"]
        if isinstance(heads, str):
            heads = [h for h in heads.split(",") if h]
        plan = PRESETS[mode](tuple(heads), epochs, lr, steps=plan_doc.get("steps"), **kw)
    weights = {**DEFAULT_WEIGHTS, **(doc.get("weights") or {})}
    return TrainConfig(model, plan, SupervisionConfig(weights))


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, overrides)


# ---------------------------------------------------------------------------
# losses


def head_losses(model: RegionModel, batch: Batch, heads, rng_for) -> tuple[dict, torch.Tensor | None]:
    """Raw per-head losses, each summed over its units and divided by the batch size.

    ``rng_for(head)`` returns the generator for a head's edits.  Also
    returns the cls logits (or ``None``) for accuracy bookkeeping.
    """
    B = len(batch.samples)
    heads = list(heads)
    raw: dict[str, torch.Tensor] = {}
    cls_logits = None
    needs_map = any(h not in ("rotation", "patch_location") for h in heads)
    fmap = feats = None
    if needs_map:
        fmap = model.features(batch.images, batch.sizes) if model.config.mode == "region" or any(h in IMAGE_HEADS for h in heads) else None
        if any(h not in IMAGE_HEADS + ("rotation", "patch_location") for h in heads):
            feats = model.regions(fmap, batch, with_mask_crops="seg_region" in heads)
    for name in heads:
        head = model.heads[name]
        if name == "cls":
            cls_logits = head(feats)
            loss = cls_loss(cls_logits, batch.labels)
        elif name == "attribute":
            loss = head.loss(feats, batch.cat("attributes"), batch.cat("attribute_ok"))
        elif name == "part":
            loss = head.loss(feats, batch.cat("parts"), batch.cat("part_ok"))
        elif name == "hierarchy":
            loss = head.loss(feats, batch.cat("hierarchy"), batch.cat("hierarchy_ok"))
        elif name == "bbox":
            loss = head.loss(feats, batch.boxes[:, 1:], batch.tights, batch.cat("bbox_ok"))
        elif name == "seg_region":
            loss = head.loss(feats, batch.cat("masks").to(feats.vectors.dtype), batch.cat("mask_ok"))
        elif name in ("seg_fcn", "stuff"):
            logits = head(fmap)
            loss = logits.sum() * 0.0
            for b, s in enumerate(batch.samples):
                target = s.fcn if name == "seg_fcn" else s.stuff
                h, w = target.shape
                term, _ = head.loss_one(logits[b, :, :h, :w], target)
                loss = loss + term
        elif name == "scene":
            loss = head.loss(fmap, torch.tensor([s.scene for s in batch.samples]))
        elif name == "rotation":
            loss = _rotation_loss(model, head, batch, rng_for(name))
        elif name == "patch_location":
            loss = _patch_loss(model, head, batch, rng_for(name))
        else:
            raise ValueError(f"unknown head {name!r}")
        raw[name] = loss / B
    return raw, cls_logits


def _grouped(items):
    """Group ``(tensor, label)`` pairs by tensor shape, in first-seen order."""
    groups: dict[tuple, list] = {}
    for item in items:
        groups.setdefault(tuple(item[0].shape), []).append(item)
    return list(groups.values())


def _rotation_loss(model, head, batch, rng):
    edits = [rotation_edit(s.image.to(batch.images.dtype), int(rng.integers(4))) for s in batch.samples]
    total = 0.0
    for group in _grouped(edits):
        fmap = model.features(torch.stack([g[0] for g in group]))
        total = total + head.loss(fmap, torch.tensor([g[1] for g in group]))
    return total


def _patch_loss(model, head, batch, rng):
    edits = []
    for s in batch.samples:
        center, neighbor, label = patch_location_edit(s.image.to(batch.images.dtype), rng)
        edits.append((torch.stack([center, neighbor]), label))
    total = 0.0
    for group in _grouped(edits):
        fm = model.features(torch.cat([g[0] for g in group]))
        center = FeatureMap(fm.tensor[0::2], fm.stride)
        neighbor = FeatureMap(fm.tensor[1::2], fm.stride)
        total = total + head.loss(center, neighbor, torch.tensor([g[1] for g in group]))
    return total


def combine_losses(raw: dict, config: SupervisionConfig, heads=None) -> tuple[torch.Tensor, dict]:
    """``L_cls + sum_s w_s L_s`` over ``heads`` (default: all of ``raw``).

    Returns ``(total, breakdown)`` where ``breakdown[head] = w_head * L_head``
    and the total is the sum of the breakdown.
    """
    heads = list(raw) if heads is None else list(heads)
    breakdown = {}
    total = None
    for name in heads:
        value = raw[name]
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)
        # float64 accumulation keeps the total equal to the breakdown sum
        term = config.weight(name) * (value.double() if torch.is_tensor(value) else torch.tensor(v, dtype=torch.float64))
        breakdown[name] = term
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no active heads")
    return total, breakdown


def total_loss(model, batch, config: SupervisionConfig, stage: Stage, rng_for):
    raw, logits = head_losses(model, batch, stage.heads, rng_for)
    total, breakdown = combine_losses(raw, config, stage.heads)
    return total, breakdown, raw, logits


def cosine_lr(lr0: float, t: int, T: int) -> float:
    if T <= 0:
        raise ValueError("schedule length must be positive")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


# ---------------------------------------------------------------------------
# metrics and checkpoints


class MetricsLog:
    """CSV of (step, stage, head, loss, lr, acc) with ``#`` provenance lines."""

    def __init__(self, path=None, header: dict | None = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="", encoding="utf-8") as fh:
                for k, v in (header or {}).items():
                    fh.write(f"# {k}: {v}\n")
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def add(self, step, stage, head, loss, lr, acc="") -> None:
        row = {"step": step, "stage": stage, "head": head, "loss": loss, "lr": lr, "acc": acc}
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([row[c] for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def save_checkpoint(path, model, optimizer, position: dict, config: TrainConfig, header: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "descriptor": model.descriptor(),
            "state": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "position": position,
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "header": header or {},
        },
        path,
    )


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(ckpt: dict) -> RegionModel:
    model = model_from_descriptor(ckpt["descriptor"])
    model.load_state_dict(ckpt["state"])
    return model


def build_model(config: ModelConfig, vocab, seed: int) -> RegionModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RegionModel(config, vocab)


# ---------------------------------------------------------------------------
# loops


@dataclass
class StageLog:
    index: int
    heads: tuple[str, ...]
    new_heads: tuple[str, ...]
    steps: int
    initial_probe: float  # new heads weighted 0
    final_probe: float
    losses: list[float] = field(default_factory=list)


def _head_seed(train_seed: int, stage_index: int, head: str) -> int:
    return int(keyed_rng(train_seed, stage_index, ALL_HEADS.index(head)).integers(2**62))


def probe_loss(model, dataset, plan: TrainingPlan, config: SupervisionConfig, heads, zero_heads=()) -> float:
    """Eval-mode total loss on the first batch with a fixed edit stream."""
    train_seed = derive_seed(plan.seed, "train")
    idx = list(range(min(plan.batch_size, len(dataset))))
    batch = next(iter_batches(dataset, idx, plan.batch_size, dtype=_dtype(model)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            raw, _ = head_losses(model, batch, heads, lambda h: keyed_rng(train_seed, PROBE_KEY, ALL_HEADS.index(h)))
            cfg = config.with_weights(**{h: 0.0 for h in zero_heads if h != "cls"})
            total, _ = combine_losses(raw, cfg, heads)
    finally:
        model.train(was_training)
    return float(total)


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def accuracy(model, dataset: RegionDataset, batch_size: int = 8) -> float:
    """Top-1 cls accuracy over every region of ``dataset`` (eval mode)."""
    was_training = model.training
    model.eval()
    hits = total = 0
    try:
        for batch in iter_batches(dataset, range(len(dataset)), batch_size, dtype=_dtype(model)):
            fmap = model.features(batch.images, batch.sizes) if model.config.mode == "region" else None
            pred = model.heads["cls"](model.regions(fmap, batch)).argmax(dim=1)
            hits += int((pred == batch.labels).sum())
            total += len(batch.labels)
    finally:
        model.train(was_training)
    return 100.0 * hits / max(total, 1)


def stage_length(stage: Stage, n_items: int, batch_size: int) -> tuple[int, int, int]:
    """``(steps_per_epoch, epochs, total_steps)`` for a stage."""
    per_epoch = math.ceil(n_items / batch_size)
    if per_epoch == 0:
        raise ValueError("no training images")
    if stage.steps is not None:
        return per_epoch, math.ceil(stage.steps / per_epoch), int(stage.steps)
    return per_epoch, stage.epochs, stage.epochs * per_epoch


def run_stage(
    model: RegionModel,
    stage: Stage,
    stage_index: int,
    dataset: RegionDataset,
    config: TrainConfig,
    log: MetricsLog | None = None,
    val_dataset: RegionDataset | None = None,
    checkpoint_dir=None,
    header: dict | None = None,
    resume: dict | None = None,
    previous_heads=(),
) -> StageLog:
    plan, sup = config.plan, config.supervision
    train_seed = derive_seed(plan.seed, "train")
    for h in stage.heads:
        model.add_head(h, _head_seed(train_seed, stage_index, h))
    new_heads = tuple(h for h in stage.heads if h not in previous_heads)
    initial = probe_loss(model, dataset, plan, sup, stage.heads, zero_heads=new_heads) if previous_heads else float("nan")

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=stage.lr, momentum=plan.momentum, weight_decay=plan.weight_decay)
    per_epoch, epochs, T = stage_length(stage, len(dataset), plan.batch_size)
    start_epoch = 0
    if resume is not None:
        start_epoch = resume["position"]["epoch"] + 1
        if resume.get("optimizer") is not None:
            opt.load_state_dict(resume["optimizer"])
    stage_log = StageLog(stage_index, stage.heads, new_heads, T, initial, float("nan"))
    dtype = _dtype(model)
    model.train()
    for epoch in range(start_epoch, epochs):
        order = keyed_rng(train_seed, stage_index, epoch).permutation(len(dataset))
        for j, batch in enumerate(iter_batches(dataset, order, plan.batch_size, plan.workers, dtype)):
            t = epoch * per_epoch + j
            if t >= T:
                break
            lr = cosine_lr(stage.lr, t, T) if stage.schedule == "cosine" else stage.lr
            for g in opt.param_groups:
                g["lr"] = lr

            def rng_for(h, _e=epoch, _t=t):
                return keyed_rng(train_seed, stage_index, _e, _t, ALL_HEADS.index(h))

            total, breakdown, raw, logits = total_loss(model, batch, sup, stage, rng_for)
            value = float(total.detach())
            acc = float((logits.argmax(dim=1) == batch.labels).double().mean() * 100) if logits is not None else ""
            if log is not None:
                for name in stage.heads:
                    log.add(t, stage_index, name, float(raw[name].detach()), lr)
                log.add(t, stage_index, "total", value, lr, acc)
            stage_log.losses.append(value)
            if value > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"stage {stage_index} step {t}: loss {value:.4g} exceeds {DIVERGENCE_LIMIT:g}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if plan.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, plan.grad_clip)
            opt.step()
        if log is not None and val_dataset is not None and len(val_dataset):
            log.add((epoch + 1) * per_epoch - 1, stage_index, "base_val", "", "", accuracy(model, val_dataset, plan.batch_size))
        if checkpoint_dir is not None:
            position = {"stage": stage_index, "epoch": epoch, "step": min((epoch + 1) * per_epoch, T)}
            save_checkpoint(Path(checkpoint_dir) / f"stage{stage_index}_epoch{epoch}.pt", model, opt, position, config, header)
    stage_log.final_probe = probe_loss(model, dataset, plan, sup, stage.heads)
    return stage_log


def run_plan(
    model: RegionModel,
    dataset: RegionDataset,
    config: TrainConfig,
    log: MetricsLog | None = None,
    val_dataset: RegionDataset | None = None,
    checkpoint_dir=None,
    header: dict | None = None,
    resume: dict | None = None,
) -> list[StageLog]:
    """Run every stage in order.

    To continue an interrupted run, build ``model`` with
    :func:`model_from_checkpoint` and pass the same checkpoint as ``resume``.
    """
    logs = []
    start = 0
    if resume is not None:
        if resume["config_hash"] != config.hash():
            raise ConfigError("checkpoint was written under a different config")
        start = resume["position"]["stage"]
    for i, stage in enumerate(config.plan.stages):
        if i < start:
            continue
        previous = config.plan.stages[i - 1].heads if i > 0 else ()
        stage_resume = resume if resume is not None and i == start else None
        logs.append(run_stage(model, stage, i, dataset, config, log, val_dataset, checkpoint_dir, header, stage_resume, previous))
    return logs
