"""Training loop, one-cycle schedule and checkpointing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import os

import numpy as np
import torch

from .config import ConfigError, TrainConfig, config_hash
from .data.manifest import DatasetManifest
from .data.sample import SampleTensors, to_tensors
from .layers import NonFiniteError
from .metrics import sequence_loss, valid_mask
from .model import ThermalStereoNet, build_model

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointMismatchError(ConfigError):
    pass


DEVICE_ENV = "THERMOSTEREO_DEVICE"


def get_device() -> torch.device:
    """Device from ``$THERMOSTEREO_DEVICE`` (default ``cpu``)."""
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def one_cycle_lr(step: float, total_steps: int, max_lr: float, warmup_frac: float = 0.05,
                 floor_div: float = 25.0) -> float:
    """Linear warmup from ``max_lr / floor_div`` to ``max_lr`` over the first
    ``warmup_frac`` of training, then cosine decay back to ``max_lr / floor_div``."""
    floor = max_lr / floor_div
    warm = warmup_frac * total_steps
    if step <= warm:
        return floor + (max_lr - floor) * step / warm
    t = min((step - warm) / max(total_steps - warm, 1e-12), 1.0)
    return floor + (max_lr - floor) * 0.5 * (1 + math.cos(math.pi * t))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig, total_steps: int):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.max_lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: one_cycle_lr(s, total_steps, 1.0, cfg.warmup_frac, cfg.lr_floor_div))
    return opt, sched


# --------------------------------------------------------------------------- data


class TrainSet:
    """In-memory padded tensors for a manifest.

    ``supervision`` picks the target: ``"sparse"`` (``disp_path``), ``"dense"``
    (``dense_disp_path``) or ``"labels"`` (a pseudo-label store, full-validity
    masks). Samples without a target are dropped and counted.
    """

    def __init__(self, items: list[SampleTensors], n_skipped: int = 0):
        if not items:
            raise ValueError("training set is empty")
        shapes = {tuple(it.left.shape) for it in items}
        if len(shapes) != 1:
            raise ValueError(f"training samples must share one padded shape, got {sorted(shapes)}")
        self.items = items
        self.n_skipped = n_skipped
        self.left = torch.stack([it.left for it in items])
        self.right = torch.stack([it.right for it in items])
        self.gt = torch.stack([it.gt for it in items])
        self.valid = torch.stack([it.valid for it in items])
        self.ids = [it.id for it in items]

    def __len__(self):
        return len(self.items)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, supervision: str = "sparse", labels=None,
                      mix_sparse: bool = False) -> "TrainSet":
        items, skipped = [], 0
        for i in range(len(manifest)):
            s = manifest.load_sample(i, dense=supervision == "dense")
            if supervision == "labels":
                sparse = s.gt
                s.gt = labels.get(s.id) if labels is not None else None
                if s.gt is not None and mix_sparse and sparse is not None:
                    s.gt.data = np.where(sparse.valid, sparse.data, s.gt.data).astype(np.float32)
            if s.gt is None:
                skipped += 1
                continue
            items.append(to_tensors(s))
        if skipped:
            log.warning("%d of %d samples have no %s target and were skipped", skipped, len(manifest), supervision)
        return cls(items, skipped)

    def batch(self, idx):
        idx = torch.as_tensor(idx)
        return self.left[idx], self.right[idx], self.gt[idx], self.valid[idx]


def batch_indices(n: int, batch_size: int, seed: int):
    """Endless stream of index batches from seeded per-epoch permutations."""
    g = torch.Generator().manual_seed(seed)
    buf: list[int] = []
    while True:
        while len(buf) < batch_size:
            buf.extend(torch.randperm(n, generator=g).tolist())
        yield buf[:batch_size]
        buf = buf[batch_size:]


# --------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: ThermalStereoNet, cfg: TrainConfig, step: int,
                    optimizer=None, scheduler=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "step": step,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
    }
    torch.save(blob, path)
    meta = {"step": step, "config_hash": blob["config_hash"], "n_params": model.n_params,
            "variant": cfg.model.variant, "saved_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path: str | Path, map_location="cpu") -> dict:
    return torch.load(path, map_location=map_location, weights_only=False)


def shape_mismatches(model: torch.nn.Module, state: dict) -> list[str]:
    """Human-readable differences between a model's parameters and a state dict."""
    own = model.state_dict()
    diffs = []
    for k, v in own.items():
        if k not in state:
            diffs.append(f"{k}: missing from checkpoint")
        elif tuple(state[k].shape) != tuple(v.shape):
            diffs.append(f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(v.shape)}")
    diffs += [f"{k}: not in model" for k in state if k not in own]
    return diffs


def load_weights(model: torch.nn.Module, state: dict) -> None:
    diffs = shape_mismatches(model, state)
    if diffs:
        raise CheckpointMismatchError("checkpoint does not match the model architecture; first mismatch: "
                                      + diffs[0] + (f" (+{len(diffs) - 1} more)" if len(diffs) > 1 else ""))
    model.load_state_dict(state)


def model_from_checkpoint(path: str | Path) -> tuple[ThermalStereoNet, TrainConfig, dict]:
    """Rebuild the model from a checkpoint's own config, in eval mode."""
    blob = load_checkpoint(path)
    cfg = TrainConfig.from_dict(blob["config"])
    model = build_model(cfg.model)
    load_weights(model, blob["model"])
    model.eval()
    return model, cfg, blob


# ------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: ThermalStereoNet
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    step: int = 0


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _train_batch_epe(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor, d_max: float) -> float:
    err = (pred.detach().clamp(0, d_max) - gt).abs()[valid]
    return float(err.mean()) if err.numel() else float("nan")


def train(cfg: TrainConfig, data: TrainSet, steps: int | None = None, model: ThermalStereoNet | None = None,
          checkpoint_dir: str | Path | None = None, resume: bool = False, tag: str = "train",
          on_step=None) -> TrainResult:
    """Run ``steps`` optimizer steps (default ``cfg.total_steps``).

    A fresh optimizer and one-cycle schedule are created for every call, so a
    call with a pre-trained ``model`` is a fine-tuning stage. With ``resume``
    the latest checkpoint in ``checkpoint_dir`` is restored first; its config
    hash must match ``cfg``.
    """
    total = cfg.total_steps if steps is None else steps
    seed_everything(cfg.seed)
    device = get_device()
    model = (model or build_model(cfg.model)).to(device)
    opt, sched = make_optimizer(model, cfg, max(total, 1))
    ckpt_dir = Path(checkpoint_dir or cfg.checkpoint_dir)
    start = 0
    if resume and (ckpt_dir / "last.pt").exists():
        blob = load_checkpoint(ckpt_dir / "last.pt", device)
        if blob["config_hash"] != config_hash(cfg):
            raise CheckpointMismatchError(
                f"config hash {config_hash(cfg)} differs from checkpoint {blob['config_hash']}")
        load_weights(model, blob["model"])
        opt.load_state_dict(blob["optimizer"])
        sched.load_state_dict(blob["scheduler"])
        start = blob["step"]

    d_max = float(cfg.model.d_max)
    batches = batch_indices(len(data), cfg.batch_size, cfg.seed)
    for _ in range(start):
        next(batches)
    history: list[dict] = []
    model.train()
    last_path = None
    t0 = time.time()
    for step in range(start, total):
        idx = next(batches)
        left, right, gt, valid = (t.to(device) for t in data.batch(idx))
        mask = valid_mask(gt, d_max, valid)
        try:
            out = model(left, right)
            report = sequence_loss(out.predictions, gt, mask, cfg.gamma)
            loss = report.total
        except NonFiniteError:
            # diverged weights surface as a non-finite cost volume
            loss = torch.tensor(float("nan"))
        if not torch.isfinite(loss):
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            replay = ckpt_dir / f"nonfinite_step{step}.pt"
            torch.save({"step": step, "ids": [data.ids[i] for i in idx], "left": left, "right": right,
                        "gt": gt, "valid": valid}, replay)
            raise NonFiniteLossError(f"non-finite loss at step {step}, batch {[data.ids[i] for i in idx]}; "
                                     f"replay saved to {replay}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        lr = opt.param_groups[0]["lr"]
        opt.step()
        sched.step()
        rec = {"step": step + 1, "loss": float(loss.detach()), "per_prediction": report.per_prediction, "lr": lr,
               "epe": _train_batch_epe(out.d_final, gt, mask, d_max), "ids": [data.ids[i] for i in idx]}
        history.append(rec)
        if on_step is not None:
            on_step(rec, model)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("[%s] step %d/%d loss %.4f epe %.3f lr %.2e (%.1fs)", tag, step + 1, total,
                     rec["loss"], rec["epe"], lr, time.time() - t0)
        if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            last_path = save_checkpoint(ckpt_dir / "last.pt", model, cfg, step + 1, opt, sched)
    if checkpoint_dir is not None:
        last_path = save_checkpoint(ckpt_dir / "last.pt", model, cfg, total, opt, sched)
        with open(ckpt_dir / f"{tag}_log.jsonl", "a") as f:
            for rec in history:
                f.write(json.dumps({k: v for k, v in rec.items() if k != "ids"}) + "\n")
    model.eval()
    return TrainResult(model, history, last_path, total)
