"""Distilled + fine-tuned student versus a sparse-only baseline at equal steps.

Training scenes carry 5% sparse gt. The teacher is the dense gt plus Gaussian
noise (sigma 0.25). The distilled arm spends 2/5 of the step budget on dense
pseudo-labels and the rest on sparse gt; the baseline spends the whole budget
on sparse gt. Both are evaluated on dense gt of held-out scenes, for several
model seeds. Writes ``distillation.json`` to ``--out``.

    python3 scripts/distillation_experiment.py --out runs/distill --steps 500
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from thermostereo.config import ModelConfig, TrainConfig
from thermostereo.data.manifest import load_manifest, write_synthetic_dataset
from thermostereo.data.synthetic import SyntheticSceneSpec
from thermostereo.distill import NoisyGtTeacher, run_distillation
from thermostereo.evaluate import evaluate
from thermostereo.train import TrainSet, train

log = logging.getLogger("distill_experiment")


def make_data(root: Path, n_train: int, n_val: int, dims, d_max: int, sparsity: float, disparity_range):
    base = SyntheticSceneSpec(disparity_range=disparity_range, d_max=d_max, sparsity=sparsity)
    if not (root / "train" / "manifest.json").exists():
        write_synthetic_dataset(root / "train", n_train, dims, base, seed=3000, split="train")
        write_synthetic_dataset(root / "val", n_val, dims, base, seed=4000, split="val")
    return load_manifest(root / "train" / "manifest.json"), load_manifest(root / "val" / "manifest.json")


def run(out, steps=500, seeds=(0, 1, 2), n_train=40, n_val=20, dims=(64, 80), d_max=32, sparsity=0.05,
        sigma=0.25, batch_size=2, max_lr=1e-3, disparity_range=(2.0, 24.0)):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train_m, val_m = make_data(out / "data", n_train, n_val, dims, d_max, sparsity, disparity_range)
    sparse_set = TrainSet.from_manifest(train_m, "sparse")
    rows = []
    for seed in seeds:
        cfg = TrainConfig(model=ModelConfig(d_max=d_max), batch_size=batch_size, max_lr=max_lr,
                          total_steps=steps, seed=seed, log_every=100, checkpoint_every=0)
        t0 = time.time()
        base = train(cfg, sparse_set, steps)
        base_epe = evaluate(base.model, val_m, d_max=d_max).aggregate.epe
        t1 = time.time()
        teacher = NoisyGtTeacher(sigma=sigma, seed=seed, d_max=d_max)
        dist = run_distillation(cfg, train_m, teacher, out / f"seed{seed}", steps)
        dist_epe = evaluate(dist.model, val_m, d_max=d_max).aggregate.epe
        rows.append({"seed": seed, "baseline_epe": base_epe, "distilled_epe": dist_epe,
                     "baseline_seconds": t1 - t0, "distilled_seconds": time.time() - t1,
                     "distilled_steps": len(dist.history), "baseline_steps": len(base.history)})
        log.info("seed %d: baseline %.4f distilled %.4f", seed, base_epe, dist_epe)
    summary = {
        "config": {"steps": steps, "seeds": list(seeds), "n_train": n_train, "n_val": n_val, "dims": list(dims),
                   "d_max": d_max, "sparsity": sparsity, "sigma": sigma, "batch_size": batch_size,
                   "max_lr": max_lr, "disparity_range": list(disparity_range)},
        "runs": rows,
        "baseline_mean_epe": float(np.mean([r["baseline_epe"] for r in rows])),
        "distilled_mean_epe": float(np.mean([r["distilled_epe"] for r in rows])),
    }
    (out / "distillation.json").write_text(json.dumps(summary, indent=2))
    return summary


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/distill")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-val", type=int, default=20)
    p.add_argument("--threads", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    torch.set_flush_denormal(True)  # denormal activations are slow on CPU
    s = run(args.out, args.steps, tuple(args.seeds), args.n_train, args.n_val)
    print(json.dumps({k: v for k, v in s.items() if k != "config"}, indent=2))


if __name__ == "__main__":
    main()
