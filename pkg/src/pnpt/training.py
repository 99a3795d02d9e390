"""End-to-end multi-class training, checkpointing and resumption."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .archive import load_archive, save_archive
from .backbone import Backbone, extract_features, load_backbone, preprocess
from .config import TrainConfig
from .data import DatasetError, train_samples
from .features import FeatureSet
from .model import PNPTModel, backbone_spec
from .objective import reconstruction_loss
from .pool import NormalityPool, build_pool, compute_global_coding, retrieve_indices

log = logging.getLogger(__name__)


class ConfigMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict
    pool_hash: str
    epoch: int = 0  # completed epochs
    step: int = 0  # global optimizer steps taken
    step_in_epoch: int = 0
    rng_state: torch.Tensor | None = None
    loss_log: list[tuple[int, int, float]] = field(default_factory=list)
    backbone_state: dict[str, torch.Tensor] | None = None  # only when the backbone is trained

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.train.epochs

    def build_model(self) -> PNPTModel:
        model = PNPTModel(self.config)
        model.load_state_dict(self.model_state)
        return model.eval()

    def save(self, path) -> None:
        tensors = {f"model.{k}": v for k, v in self.model_state.items()}
        opt_state = self.optimizer_state.get("state", {})
        for idx, slots in opt_state.items():
            for key, value in slots.items():
                tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value)
        if self.rng_state is not None:
            tensors["rng.noise"] = self.rng_state
        for k, v in (self.backbone_state or {}).items():
            tensors[f"backbone.{k}"] = v
        meta = {
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "pool_hash": self.pool_hash,
            "epoch": self.epoch,
            "step": self.step,
            "step_in_epoch": self.step_in_epoch,
            "param_groups": self.optimizer_state.get("param_groups", []),
            "loss_log": [list(r) for r in self.loss_log],
        }
        save_archive(path, tensors, kind="checkpoint", meta=meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = load_archive(path, kind="checkpoint")
        model_state, backbone_state, opt_state = {}, {}, {}
        rng = None
        for name, t in tensors.items():
            head, _, rest = name.partition(".")
            if head == "model":
                model_state[rest] = t
            elif head == "backbone":
                backbone_state[rest] = t
            elif head == "optim":
                idx, _, key = rest.partition(".")
                opt_state.setdefault(int(idx), {})[key] = t
            elif head == "rng":
                rng = t
        return cls(
            config=TrainConfig.from_dict(meta["config"]),
            model_state=model_state,
            optimizer_state={"state": dict(sorted(opt_state.items())), "param_groups": meta["param_groups"]},
            pool_hash=meta["pool_hash"],
            epoch=meta["epoch"],
            step=meta["step"],
            step_in_epoch=meta["step_in_epoch"],
            rng_state=rng,
            loss_log=[(int(s), int(e), float(l)) for s, e, l in meta["loss_log"]],
            backbone_state=backbone_state or None,
        )


def num_workers() -> int:
    """Image-loading threads, from ``PNPT_NUM_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("PNPT_NUM_WORKERS", "1")))
    except ValueError:
        raise ValueError(f"PNPT_NUM_WORKERS must be an integer, got {os.environ['PNPT_NUM_WORKERS']!r}") from None


def load_images(samples, input_size: int) -> torch.Tensor:
    paths = [s.path for s in samples]
    workers = num_workers()
    if workers == 1 or len(paths) < 2:
        return torch.stack([preprocess(p, input_size) for p in paths])
    # map() keeps input order, so batches stay seed-deterministic
    with ThreadPoolExecutor(workers) as ex:
        return torch.stack(list(ex.map(lambda p: preprocess(p, input_size), paths)))


def extract_all(backbone: Backbone, images: torch.Tensor, batch_size: int = 16) -> FeatureSet:
    return FeatureSet.cat([extract_features(backbone, images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def build_dataset_pool(config: TrainConfig, dataset_root, backbone: Backbone | None = None) -> NormalityPool:
    """Pool over every class in ``dataset_root/<class>/train/good``."""
    backbone = backbone or load_backbone(backbone_spec(config))
    size = config.backbone.input_size
    samples = train_samples(dataset_root)
    return build_pool(((s.class_id, preprocess(s.path, size)) for s in samples), backbone,
                      metric=config.pool.metric, normalize_codings=config.pool.normalize_codings)


def check_pool(pool: NormalityPool | None, classes: list[str], backbone: Backbone) -> None:
    if pool is None:
        return
    if sorted(pool.classes) != sorted(classes):
        raise DatasetError(f"dataset classes {sorted(classes)} do not match pool classes {sorted(pool.classes)}")
    if pool.backbone_hash and pool.backbone_hash != backbone.spec.digest():
        raise ConfigMismatchError("the pool was built with a different backbone configuration")


def _epoch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed * 100_003 + epoch)
    return torch.randperm(n, generator=g)


def _write_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss"])
        for step, epoch, loss in rows:
            w.writerow([step, epoch, repr(loss)])


class TrainingData:
    """Normalized training images, their frozen features and retrieved prior indices."""

    def __init__(self, images: torch.Tensor, class_ids: list[str], pool: NormalityPool | None, backbone: Backbone):
        if len(images) == 0:
            raise DatasetError("no training images")
        check_pool(pool, sorted(set(class_ids)), backbone)
        self.images = images
        self.features = extract_all(backbone, images)
        self.prior_index = None
        if pool is not None:
            self.prior_index = retrieve_indices(compute_global_coding(self.features), pool)

    @classmethod
    def from_root(cls, cfg: TrainConfig, dataset_root, pool: NormalityPool | None, backbone: Backbone):
        samples = train_samples(dataset_root)
        return cls(load_images(samples, cfg.backbone.input_size), [s.class_id for s in samples], pool, backbone)

    def __len__(self):
        return len(self.images)


def train(config: TrainConfig, dataset_root, pool: NormalityPool | None, *, max_steps: int | None = None,
          checkpoint_path=None, log_csv=None, start: Checkpoint | None = None,
          data: TrainingData | None = None, device: str | torch.device = "cpu") -> Checkpoint:
    """Train a reconstruction model on the normal images under ``dataset_root``.

    ``max_steps`` stops after that many global steps (resumable); ``start``
    continues from an existing checkpoint.
    """
    cfg = config.validate()
    tc = cfg.train
    dual = not cfg.ablation.disable_pool
    if dual and pool is None:
        raise ValueError("a pool is required unless ablation.disable_pool is set")
    spec = backbone_spec(cfg)
    backbone = load_backbone(spec)
    if start is not None and start.backbone_state:
        backbone.trunk.load_state_dict(start.backbone_state)
    data = data or TrainingData.from_root(cfg, dataset_root, pool if dual else None, backbone)
    if not dual:
        pool = None

    device = torch.device(device)
    model = PNPTModel(cfg, spec)
    if start is not None:
        model.load_state_dict(start.model_state)
    model.to(device)
    backbone.to(device)
    params = list(model.parameters())
    if not cfg.backbone.freeze:
        for p in backbone.trunk.parameters():
            p.requires_grad_(True)
        params += list(backbone.trunk.parameters())
    opt = torch.optim.AdamW(params, lr=tc.learning_rate, weight_decay=tc.weight_decay)
    noise_gen = torch.Generator().manual_seed(tc.seed + 1)

    ckpt = start or Checkpoint(cfg, {}, {}, pool.digest() if pool is not None else "")
    if start is not None:
        opt.load_state_dict(start.optimizer_state)
        if start.rng_state is not None:
            noise_gen.set_state(start.rng_state)
    loss_log = list(ckpt.loss_log)
    epoch, step, step_in_epoch = ckpt.epoch, ckpt.step, ckpt.step_in_epoch

    def snapshot() -> Checkpoint:
        return Checkpoint(
            config=cfg,
            model_state={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
            optimizer_state=_clone_optimizer_state(opt.state_dict()),
            pool_hash=ckpt.pool_hash,
            epoch=epoch, step=step, step_in_epoch=step_in_epoch,
            rng_state=noise_gen.get_state(),
            loss_log=list(loss_log),
            backbone_state=None if cfg.backbone.freeze else
            {k: v.detach().clone() for k, v in backbone.trunk.state_dict().items()},
        )

    n = len(data)
    batches_per_epoch = math.ceil(n / tc.batch_size)
    model.train()
    stop = False
    while epoch < tc.epochs and not stop:
        order = _epoch_order(n, tc.seed, epoch)
        while step_in_epoch < batches_per_epoch:
            if max_steps is not None and step >= max_steps:
                stop = True
                break
            idx = order[step_in_epoch * tc.batch_size:(step_in_epoch + 1) * tc.batch_size]
            if cfg.backbone.freeze:
                f_self = data.features.select(idx).to(device)
            else:
                f_self = FeatureSet(backbone(data.images[idx].to(device)))
            f_prior = pool.prior(data.prior_index[idx]).to(device) if dual else None
            recon_prior, recon_self = model(f_self, f_prior, training=True, generator=noise_gen)
            loss = reconstruction_loss(model.select(f_self), recon_prior, recon_self)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
            opt.step()
            loss_log.append((step, epoch, float(loss.item())))
            step += 1
            step_in_epoch += 1
            if checkpoint_path and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                snapshot().save(checkpoint_path)
        else:
            epoch += 1
            step_in_epoch = 0
            log.info("epoch %d/%d loss %.5f", epoch, tc.epochs, loss_log[-1][2] if loss_log else float("nan"))

    model.eval()
    result = snapshot()
    if checkpoint_path:
        result.save(checkpoint_path)
    if log_csv:
        _write_log(log_csv, result.loss_log)
    return result


def resume(checkpoint: Checkpoint, dataset_root, pool: NormalityPool | None, *, config: TrainConfig | None = None,
           **kwargs) -> Checkpoint:
    if config is not None and config.digest() != checkpoint.config.digest():
        raise ConfigMismatchError(
            f"config hash {config.digest()} does not match checkpoint config hash {checkpoint.config.digest()}"
        )
    if checkpoint.finished:
        return checkpoint
    if pool is not None and checkpoint.pool_hash and pool.digest() != checkpoint.pool_hash:
        raise ConfigMismatchError("the pool differs from the one used to create the checkpoint")
    return train(checkpoint.config, dataset_root, pool, start=checkpoint, **kwargs)


def _clone_optimizer_state(state: dict) -> dict:
    return {
        "state": {k: {kk: (vv.detach().cpu().clone() if torch.is_tensor(vv) else vv) for kk, vv in v.items()}
                  for k, v in state["state"].items()},
        "param_groups": json.loads(json.dumps(state["param_groups"])),
    }
