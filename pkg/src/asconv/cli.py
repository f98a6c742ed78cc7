"""Command line interface.

Subcommands: ``train``, ``eval``, ``params``, ``check-equivariance``,
``gradcheck``.  A global ``--seed`` overrides the seeds in config files.
Config files are JSON with ``model`` and ``train`` sections mirroring
ModelConfig / TrainConfig; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import load_cifar
from .errors import AsconvError, InvalidConfig
from .models import ModelConfig, build_model, count_params
from .train import TrainConfig, evaluate, train
from .verify import check_equivariance, gradcheck


def _from_section(cls, section: dict, what: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise InvalidConfig(f"unknown {what} keys: {sorted(unknown)}")
    kwargs = dict(section)
    if "milestones" in kwargs:
        kwargs["milestones"] = tuple(kwargs["milestones"])
    return cls(**kwargs)


def load_config(path, seed: int | None = None) -> tuple[ModelConfig, TrainConfig]:
    raw = json.loads(Path(path).read_text())
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    model_cfg = _from_section(ModelConfig, raw.get("model", {}), "model")
    train_cfg = _from_section(TrainConfig, raw.get("train", {}), "train")
    if seed is not None:
        model_cfg.seed = seed
        train_cfg = dataclasses.replace(train_cfg, seed=seed)
    return model_cfg, train_cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="asconv")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--config", default=None,
                        help="config JSON (default: config.json beside the checkpoint)")

    p_params = sub.add_parser("params", help="print the parameter audit of a variant")
    p_params.add_argument("--variant", required=True)
    p_params.add_argument("--classes", type=int, default=10, choices=(10, 100))

    p_check = sub.add_parser("check-equivariance",
                             help="run equivariance/invariance property checks")
    p_check.add_argument("--target", required=True)
    p_check.add_argument("--trials", type=int, default=None)
    p_check.add_argument("--tol", type=float, default=None)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_grad.add_argument("--target", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except AsconvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    seed = args.seed
    if args.command == "train":
        model_cfg, train_cfg = load_config(args.config, seed)
        out = Path(args.out)
        rows = train(model_cfg, train_cfg, args.data, out)
        (out / "config.json").write_text(json.dumps(
            {"model": dataclasses.asdict(model_cfg),
             "train": dataclasses.asdict(train_cfg)}, indent=2))
        if rows:
            last = rows[-1]
            print(f"epoch {last['epoch']}: train_acc {last['train_acc']:.4f} "
                  f"val_acc {last['val_acc']:.4f}")
        print(f"wrote {out / 'metrics.csv'} and checkpoints")
        return 0

    if args.command == "eval":
        ckpt = Path(args.checkpoint)
        cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
        model_cfg, train_cfg = load_config(cfg_path, seed)
        model = build_model(model_cfg)
        state = load_checkpoint(ckpt)
        model.load_state_arrays(state)
        test = load_cifar(args.data, "test", model_cfg.num_classes, train_cfg.seed)
        acc, loss = evaluate(model, test, train_cfg.batch_size)
        print(f"test accuracy {acc:.4f}  loss {loss:.4f}")
        return 0

    if args.command == "params":
        audit = count_params(build_model(ModelConfig(args.variant, args.classes,
                                                     seed=seed or 0)))
        print(audit.format())
        return 0

    if args.command == "check-equivariance":
        results = check_equivariance(args.target, args.trials, args.tol,
                                     seed or 0)
        ok = True
        for r in results:
            print(r.line())
            ok &= r.passed
        return 0 if ok else 1

    if args.command == "gradcheck":
        results = gradcheck(args.target, seed or 0)
        ok = True
        for r in results:
            print(r.line())
            ok &= r.passed
        return 0 if ok else 1

    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
