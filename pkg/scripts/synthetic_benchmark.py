"""Train on a synthetic set and report held-out metrics.

Default: 200 training scenes and 20 validation scenes at 96x128, 5k steps,
dense supervision. Writes ``metrics.json`` and ``summary.json`` to ``--out``.

    python3 scripts/synthetic_benchmark.py --out runs/bench --steps 5000
"""

import argparse
import json
import logging
import time
from pathlib import Path

import torch

from thermostereo.config import ModelConfig, TrainConfig
from thermostereo.data.manifest import load_manifest, write_synthetic_dataset
from thermostereo.data.synthetic import SyntheticSceneSpec
from thermostereo.evaluate import evaluate, measure_throughput, write_eval
from thermostereo.train import TrainSet, train


def run(out, steps=5000, n_train=200, n_val=20, dims=(96, 128), d_max=48, batch_size=2, seed=0,
        variant="full", disparity_range=(2.0, 40.0), max_lr=1e-3):
    out = Path(out)
    base = SyntheticSceneSpec(disparity_range=disparity_range, d_max=d_max)
    data_dir = out.parent / f"data_{dims[0]}x{dims[1]}_d{d_max}"
    if not (data_dir / "train" / "manifest.json").exists():
        write_synthetic_dataset(data_dir / "train", n_train, dims, base, seed=1000, split="train")
        write_synthetic_dataset(data_dir / "val", n_val, dims, base, seed=2000, split="val")
    train_m = load_manifest(data_dir / "train" / "manifest.json")
    val_m = load_manifest(data_dir / "val" / "manifest.json")

    cfg = TrainConfig(model=ModelConfig(variant=variant, d_max=d_max), batch_size=batch_size, max_lr=max_lr,
                      total_steps=steps, seed=seed, checkpoint_dir=str(out), checkpoint_every=1000, log_every=250)
    t0 = time.time()
    res = train(cfg, TrainSet.from_manifest(train_m, "dense"), checkpoint_dir=out)
    train_time = time.time() - t0
    result = evaluate(res.model, val_m, d_max=d_max)
    result.extra.update(run=out.name, variant=variant, params=res.model.n_params,
                        throughput_hz=measure_throughput(res.model, dims))
    write_eval(result, out)
    summary = {"val_epe": result.aggregate.epe, "train_seconds": train_time, "steps": steps,
               "final_train_loss": res.history[-1]["loss"] if res.history else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return result, summary


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/bench")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--d-max", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="full")
    p.add_argument("--threads", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    torch.set_flush_denormal(True)  # denormal activations are slow on CPU
    result, summary = run(args.out, args.steps, args.n_train, args.n_val, d_max=args.d_max,
                          batch_size=args.batch_size, seed=args.seed, variant=args.variant)
    print(result.table())
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
