"""Command-line entry points: forward, gradcheck, audit, train-toy, fuse."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

import numpy as np

from .backbone import VMCNet, audit_parameters, build_model, train_toy
from .config import ConfigError, RunConfig
from .io import KIND_DUMP, Container, ContainerError, load_weights, read_ppm, save_weights
from .params import rng_for
from .roi import fuse_scores, vlm_score

log = logging.getLogger("vmcnet")


def _config(args, default=None) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = default if default is not None else RunConfig(seed=0)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
        if args.mode == "baseline" and not args.config:
            cfg.vit.tap_layers = (4, 6, 8, 12)
    if getattr(args, "full_depth", False):
        cfg.full_depth = True
    return cfg.validate()


def _image(args, cfg: RunConfig) -> np.ndarray:
    if getattr(args, "input", None):
        img = read_ppm(args.input)
        if img.shape[:2] != tuple(cfg.input_size):
            raise ConfigError(f"{args.input}: image is {img.shape[0]}x{img.shape[1]}, config expects {cfg.input_size}")
        return img[None].astype(cfg.dtype)
    h, w = cfg.input_size
    return rng_for(cfg.seed, "data.input").standard_normal((1, h, w, 3)).astype(cfg.dtype)


def cmd_forward(args) -> int:
    cfg = _config(args)
    model = build_model(cfg)
    if args.weights:
        load_weights(model.store, args.weights)
    pyr = model.forward(_image(args, cfg))
    dump = Container(kind=KIND_DUMP, config_hash=cfg.hash(), seed=cfg.seed)
    for i, lvl in enumerate(pyr.levels, start=1):
        dump.add(f"pyramid.{i}", lvl.data[0])
        print(f"F_d{i}: {'x'.join(map(str, lvl.shape[1:]))}")
    if pyr.taps is not None:
        for i, t in sorted(pyr.taps.taps.items()):
            dump.add(f"tap.{i}", t.data[0])
    if pyr.dense_final is not None:
        dump.add("dense_final", pyr.dense_final.data[0])
        print(f"dense_final: {'x'.join(map(str, pyr.dense_final.shape[1:]))}")
    if args.save_weights:
        save_weights(model.store, args.save_weights)
    if args.out:
        dump.save(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .suites import COMPOSITE_CHECKS, OP_CHECKS, run_suite

    names = list(OP_CHECKS) + list(COMPOSITE_CHECKS)
    if args.only:
        names = [n for n in names if n in args.only]
    results = run_suite(
        seeds=range(args.seeds), names=names, threshold=args.threshold,
        end_to_end_seeds=range(args.end_to_end_seeds), log=print,
    )
    failed = sorted({r.name for r in results if not r.passed})
    if failed:
        print(f"FAIL: {', '.join(failed)}")
        return 1
    print(f"PASS: {len(results)} checks, max rel err {max(r.report.max_rel for r in results):.2e}")
    return 0


def cmd_audit(args) -> int:
    cfg = _config(args)
    cfg.vit.trainable = bool(args.trainable_vit)
    model = VMCNet(cfg)
    if args.weights:
        load_weights(model.store, args.weights)
    model.store.set_frozen("vit.", not args.trainable_vit)
    report = audit_parameters(model.store, trainable_vit=args.trainable_vit)
    if args.verbose:
        for line in report.lines()[:-2]:
            print(line)
    print(f"frozen parameters:    {report.frozen_total}")
    print(f"trainable parameters: {report.trainable_total}")

    before = model.store.snapshot()
    if args.after:
        after = Container.load(args.after).arrays()
        frozen_names = [p.name for p in model.store if p.frozen]
        changed = [
            n for n in frozen_names
            if n not in after or after[n].shape != before[n].shape or after[n].tobytes() != before[n].tobytes()
        ]
    else:
        train_toy(cfg, steps=args.steps, model=model)
        frozen = {p.name for p in model.store if p.frozen}
        changed = [n for n in model.store.diff(before) if n in frozen]
        moved = model.store.diff(before)
        for prefix in ("cnn.", "vmc.", "assembly."):
            print(f"{prefix:<10} tensors changed: {sum(n.startswith(prefix) for n in moved)}")
    if changed:
        print("FAIL: frozen tensors changed: " + ", ".join(changed))
        return 1
    print("PASS: frozen tensors unchanged")
    return 0


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.lr is not None:
        cfg.train.lr = args.lr
    _, losses = train_toy(cfg)
    if args.out:
        with open(args.out, "w") as fh:
            fh.writelines(f"{i} {v!r}\n" for i, v in enumerate(losses))
    ratio = losses[-1] / losses[0]
    print(f"initial loss {losses[0]:.6f}  final loss {losses[-1]:.6f}  ratio {ratio:.4f}")
    need = cfg.train.min_reduction if args.min_reduction is None else args.min_reduction
    if ratio > 1.0 - need:
        print(f"FAIL: loss reduced by {1 - ratio:.1%}, required {need:.0%}")
        return 1
    print("PASS")
    return 0


def _read_scores(path: str):
    if path.endswith(".json"):
        try:
            with open(path) as fh:
                doc = json.load(fh)
            return {k: np.asarray(v, dtype=np.float64) for k, v in doc.items()}
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise ContainerError(f"{path}: malformed score file ({exc})") from exc
    return Container.load(path).arrays()


def cmd_fuse(args) -> int:
    data = _read_scores(args.scores)
    if "text.embeddings" not in data and args.weights:
        w = Container.load(args.weights)
        if "text.embeddings" in w:
            data["text.embeddings"] = w["text.embeddings"]
    for key in ("s_p", "region_features", "text.embeddings"):
        if key not in data:
            raise ContainerError(f"{args.scores}: missing {key}")
    s_p = np.atleast_2d(data["s_p"])
    region = np.atleast_2d(data["region_features"])
    text = np.atleast_2d(data["text.embeddings"])
    if region.shape[1] != text.shape[1] or s_p.shape != (region.shape[0], text.shape[0]):
        raise ContainerError(
            f"{args.scores}: shapes s_p {s_p.shape}, region_features {region.shape}, text {text.shape} disagree"
        )
    s_vlm = vlm_score(region, text, args.beta)
    s = fuse_scores(s_p, s_vlm, args.gamma)
    if args.out:
        if args.out.endswith(".json"):
            with open(args.out, "w") as fh:
                json.dump({"s_vlm": s_vlm.tolist(), "s": s.tolist()}, fh)
        else:
            c = Container(kind=KIND_DUMP)
            c.add("s_vlm", s_vlm)
            c.add("s", s)
            c.save(args.out)
    np.set_printoptions(precision=6, suppress=True)
    print(s)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vmcnet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, modes=True):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="PATH")
        if modes:
            p.add_argument("--mode", choices=["full", "fm_star", "cnn_only", "baseline"])
            p.add_argument("--full-depth", action="store_true")

    p = sub.add_parser("forward", help="run the backbone and write a golden dump")
    common(p)
    p.add_argument("--weights", metavar="PATH")
    p.add_argument("--input", metavar="PPM")
    p.add_argument("--save-weights", metavar="PATH")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and composite")
    p.add_argument("--config", metavar="PATH", help="accepted for symmetry; the suite uses fixed toy shapes")
    p.add_argument("--threshold", type=float, help="override every per-check tolerance")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--end-to-end-seeds", type=int, default=2)
    p.add_argument("--only", nargs="+", metavar="CHECK")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("audit", help="parameter partition and freeze audit")
    common(p, modes=False)
    p.add_argument("--weights", metavar="PATH", help="snapshot before training")
    p.add_argument("--after", metavar="PATH", help="snapshot after training; else train --steps internally")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--trainable-vit", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train-toy", help="overfit one synthetic batch with SGD")
    common(p, modes=False)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--min-reduction", type=float)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("fuse", help="VLM scores and geometric score fusion")
    p.add_argument("--scores", required=True, metavar="PATH")
    p.add_argument("--weights", metavar="PATH")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_fuse)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, ContainerError, KeyError, ValueError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
