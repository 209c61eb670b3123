"""Command-line entry point: ``thermostereo <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 checkpoint, 6 training diverged,
1 anything else. ``$THERMOSTEREO_DEVICE`` selects the torch device.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, normalize_variant
from .data.codecs import CodecError

log = logging.getLogger("thermostereo")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5, 6


def load_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Config file (else ``base``, else defaults) with command-line overrides applied."""
    if getattr(args, "config", None):
        base = TrainConfig.load(args.config)
    d = (base or TrainConfig()).to_dict()
    if getattr(args, "variant", None):
        d["model"]["variant"] = normalize_variant(args.variant)
    if getattr(args, "d_max", None):
        d["model"]["d_max"] = args.d_max
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        d["total_steps"] = args.steps
    if getattr(args, "batch_size", None):
        d["batch_size"] = args.batch_size
    if getattr(args, "manifest", None):
        d["train_manifest"] = str(args.manifest)
    if getattr(args, "out", None):
        d["checkpoint_dir"] = str(args.out)
    return TrainConfig.from_dict(d)


def _manifest(path):
    from .data.manifest import load_manifest
    if path is None:
        raise ConfigError("no dataset manifest given (--manifest or train_manifest in the config)")
    return load_manifest(path)


def cmd_generate_data(args) -> None:
    from .data.manifest import write_synthetic_dataset
    from .data.synthetic import SyntheticSceneSpec
    base = SyntheticSceneSpec(disparity_range=tuple(args.disparity_range), sparsity=args.sparsity,
                              noise_sigma=args.noise, d_max=args.d_max)
    path = write_synthetic_dataset(args.out, args.n, (args.height, args.width), base, args.seed, args.split)
    print(path)


def cmd_train(args) -> None:
    from .train import TrainSet, train
    cfg = load_config(args)
    data = TrainSet.from_manifest(_manifest(cfg.train_manifest), args.supervision)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    res = train(cfg, data, checkpoint_dir=out, resume=args.resume)
    print(res.checkpoint)


def cmd_distill_labels(args) -> None:
    from .distill import GtOracleTeacher, NoisyGtTeacher, generate_pseudo_labels
    teacher = (GtOracleTeacher(args.d_max) if args.teacher == "gt-oracle"
               else NoisyGtTeacher(args.sigma, args.occlusion_sigma, args.seed or 0, args.d_max))
    store = generate_pseudo_labels(teacher, _manifest(args.manifest), args.out, workers=args.workers)
    prov = store.provenance
    print(json.dumps({k: prov[k] for k in ("teacher", "n_samples", "n_failed")}))


def cmd_distill_train(args) -> None:
    from .distill import PseudoLabelStore, distill_train
    cfg = load_config(args)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    res = distill_train(cfg, _manifest(cfg.train_manifest), PseudoLabelStore(args.labels), cfg.total_steps,
                        checkpoint_dir=out)
    print(res.checkpoint)


def cmd_finetune(args) -> None:
    from .distill import finetune_sparse
    from .train import load_checkpoint
    # without --config, start from the checkpoint's own configuration
    base = None if args.config else TrainConfig.from_dict(load_checkpoint(args.checkpoint)["config"])
    cfg = load_config(args, base)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    res = finetune_sparse(args.checkpoint, cfg, _manifest(cfg.train_manifest), cfg.total_steps,
                          checkpoint_dir=out, supervision=args.supervision)
    print(res.checkpoint)


def cmd_eval(args) -> None:
    from .evaluate import evaluate, measure_throughput, oracle_predictor, write_eval
    from .train import model_from_checkpoint
    manifest = _manifest(args.manifest)
    if args.oracle:
        predictor, extra = oracle_predictor, {"run": args.run or "oracle", "variant": "oracle"}
        d_max = args.d_max
    else:
        from .train import get_device
        model, cfg, _ = model_from_checkpoint(args.checkpoint)
        model.to(get_device())
        predictor, d_max = model, cfg.model.d_max
        extra = {"run": args.run or Path(args.out).name, "variant": cfg.model.variant, "params": model.n_params}
        if args.throughput:
            shape = manifest.load_sample(0).shape
            pad = lambda n: n + (-n) % 16
            extra["throughput_hz"] = measure_throughput(model, (pad(shape[0]), pad(shape[1])))
    result = evaluate(predictor, manifest, tuple(args.thresholds), d_max)
    result.extra.update(extra)
    write_eval(result, args.out)
    print(result.table())
    if result.n_excluded:
        print(f"excluded {result.n_excluded} samples without ground truth")


def cmd_infer(args) -> None:
    from .evaluate import infer
    from .train import get_device, model_from_checkpoint
    model, _, _ = model_from_checkpoint(args.checkpoint)
    model.to(get_device())
    infer(model, args.left, args.right, args.out, args.gt, args.error_map)
    print(args.out)


def cmd_report(args) -> None:
    from .evaluate import report
    rows, table = report(args.runs, args.csv)
    if not rows:
        raise ValueError("no readable metrics files among the given runs")
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thermostereo", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON training config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--variant", choices=["full", "no-se", "no-se-no-refine"])
        sp.add_argument("--steps", type=int)
        sp.add_argument("--d-max", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--manifest", type=Path)

    g = sub.add_parser("generate-data", help="render a synthetic dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--height", type=int, default=96)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train", choices=["train", "val", "test"])
    g.add_argument("--sparsity", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--disparity-range", type=float, nargs=2, default=(2.0, 40.0))
    g.add_argument("--d-max", type=int, default=192)
    g.set_defaults(fn=cmd_generate_data)

    t = sub.add_parser("train", help="supervised training")
    common(t)
    t.add_argument("--supervision", choices=["sparse", "dense"], default="sparse")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    dl = sub.add_parser("distill-labels", help="generate dense pseudo-labels with a teacher")
    dl.add_argument("--manifest", type=Path, required=True)
    dl.add_argument("--out", type=Path, required=True)
    dl.add_argument("--teacher", choices=["gt-oracle", "noisy-gt"], default="noisy-gt")
    dl.add_argument("--sigma", type=float, default=0.25)
    dl.add_argument("--occlusion-sigma", type=float, default=0.0)
    dl.add_argument("--seed", type=int, default=0)
    dl.add_argument("--d-max", type=int, default=192)
    dl.add_argument("--workers", type=int, default=1)
    dl.set_defaults(fn=cmd_distill_labels)

    dt = sub.add_parser("distill-train", help="train on dense pseudo-labels")
    common(dt)
    dt.add_argument("--labels", type=Path, required=True)
    dt.set_defaults(fn=cmd_distill_train)

    ft = sub.add_parser("finetune", help="continue from a checkpoint on sparse gt")
    common(ft)
    ft.add_argument("--checkpoint", type=Path, required=True)
    ft.add_argument("--supervision", choices=["sparse", "dense"], default="sparse")
    ft.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="metrics per condition tag")
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--oracle", action="store_true", help="use the ground truth as prediction")
    e.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 1.0])
    e.add_argument("--d-max", type=int, default=192)
    e.add_argument("--run", help="run name in the report (default: output dir name)")
    e.add_argument("--no-throughput", dest="throughput", action="store_false")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict disparity for one image pair")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--left", type=Path, required=True)
    i.add_argument("--right", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--gt", type=Path)
    i.add_argument("--error-map", type=Path)
    i.set_defaults(fn=cmd_infer)

    r = sub.add_parser("report", help="merge eval outputs into one table")
    r.add_argument("runs", nargs="+", type=Path)
    r.add_argument("--csv", type=Path)
    r.set_defaults(fn=cmd_report)
    return p


def exit_code_for(exc: BaseException) -> int:
    from .data.manifest import ManifestError
    from .train import CheckpointMismatchError, NonFiniteLossError
    if isinstance(exc, CheckpointMismatchError):
        return EXIT_CHECKPOINT
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (ManifestError, CodecError, FileNotFoundError, json.JSONDecodeError)):
        return EXIT_DATA
    if isinstance(exc, NonFiniteLossError):
        return EXIT_DIVERGED
    return EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as exc:
        code = exit_code_for(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            log.exception("details")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
