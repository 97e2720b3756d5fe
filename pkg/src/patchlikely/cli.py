"""Command-line interface.

Subcommands: train, score, minmax, heatmap, explain, generate, gradcheck.
Every command is deterministic given its flags, seed, and checkpoint.
Exit codes: 0 success, 1 usage error, 2 runtime error.

Values may come from a key=value config file (--config); explicit flags
override file values, and the fully resolved configuration is logged to
stderr.  PATCHLIKELY_THREADS caps the worker (BLAS) thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .errors import ConfigError, PatchLikelyError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# config-file keys shared across commands; flags override these
CONFIG_KEYS = {
    "steps": int, "batch_size": int, "learning_rate": float,
    "warmup_steps": int, "checkpoint_every": int, "seed": int,
    "patch_size": int, "flow_steps": int, "hidden_width": int,
    "log_every": int, "stride": int, "k": int, "eta": float,
    "channel": str, "context": str, "temperature": float,
}


def _load_config_file(path: str) -> dict:
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value.strip())
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


def _resolve(args, defaults: dict, command: str) -> dict:
    """flag > config file > default; logs the resolved configuration."""
    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    for key in sorted(resolved):
        print(f"config {command}.{key}={resolved[key]}", file=sys.stderr)
    return resolved


def _require(resolved: dict, key: str, command: str):
    if resolved[key] is None:
        raise UsageError(f"{command}: missing required value --{key.replace('_', '-')}")
    return resolved[key]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_model(ckpt_path):
    from .training import load_checkpoint
    return load_checkpoint(ckpt_path).params


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    from .flow import bits_per_dim
    from .training import PatchDataset, TrainConfig, train

    resolved = _resolve(args, {
        "steps": 1000, "batch_size": 256, "learning_rate": 1e-4,
        "warmup_steps": 500, "checkpoint_every": 500, "seed": 0,
        "patch_size": 16, "flow_steps": 32, "hidden_width": 128,
        "log_every": 10,
    }, "train")
    config = TrainConfig(
        batch_size=resolved["batch_size"], steps=resolved["steps"],
        learning_rate=resolved["learning_rate"],
        warmup_steps=resolved["warmup_steps"],
        checkpoint_every=resolved["checkpoint_every"], seed=resolved["seed"],
        patch_size=resolved["patch_size"], flow_steps=resolved["flow_steps"],
        hidden_width=resolved["hidden_width"])
    dataset = PatchDataset(args.corpus if args.corpus else args.image,
                           patch_size=config.patch_size)
    dim = config.patch_size * config.patch_size * 3
    log_every = resolved["log_every"]

    def log_fn(step, metrics):
        if step % log_every == 0 or step == config.steps - 1:
            bpd = bits_per_dim(metrics["nll"], dim)
            print(f"{step},{metrics['nll']:.6f},{bpd:.6f}", flush=True)

    train(config, dataset, out_path=args.out, log_fn=log_fn)
    return 0


def _parse_patch_flag(value: str) -> tuple[int, int]:
    try:
        col, row = (int(v) for v in value.split(","))
    except ValueError:
        raise UsageError(f"--patch expects COL,ROW integers, got {value!r}")
    return col, row


def _cmd_score(args) -> int:
    from . import data_io
    from .training import dequantize_deterministic

    params = _load_model(args.ckpt)
    image = data_io.load_image(args.image)
    ps = params.patch_size
    if args.patch is not None:
        col, row = _parse_patch_flag(args.patch)
        if row < 0 or col < 0 or row + ps > image.shape[0] or col + ps > image.shape[1]:
            raise ConfigError(f"patch at ({col},{row}) does not fit image "
                              f"{image.shape[1]}x{image.shape[0]}")
        patch8 = image[row:row + ps, col:col + ps]
    else:
        if image.shape[0] != ps or image.shape[1] != ps:
            raise ConfigError(f"image is {image.shape[1]}x{image.shape[0]}, "
                              f"expected {ps}x{ps} (or pass --patch COL,ROW)")
        patch8 = image
    from .flow import log_likelihood
    nll = -log_likelihood(dequantize_deterministic(patch8), params)
    print(f"{nll:.6f}")
    return 0


def _cmd_minmax(args) -> int:
    from . import data_io
    from .analysis import minmax_patches

    resolved = _resolve(args, {"k": 100, "stride": 1}, "minmax")
    params = _load_model(args.ckpt)
    image = data_io.load_image(args.image)
    top, bottom = minmax_patches(image, params, k=resolved["k"],
                                 stride=resolved["stride"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["kind,rank,row,col,nll_nats"]
    for kind, scores in (("most_likely", top), ("least_likely", bottom)):
        for i, s in enumerate(scores):
            data_io.save_image(s.patch8, out_dir / f"{kind}_{i:03d}.png")
            lines.append(f"{kind},{i},{s.row},{s.col},{s.nll:.6f}")
    (out_dir / "minmax.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(top)} + {len(bottom)} patches to {out_dir}")
    return 0


def _cmd_heatmap(args) -> int:
    from . import data_io
    from .analysis import heatmap_to_csv, heatmap_to_png, nll_heatmap

    resolved = _resolve(args, {"stride": 8}, "heatmap")
    params = _load_model(args.ckpt)
    image = data_io.load_image(args.image)
    hm = nll_heatmap(image, params, stride=resolved["stride"])
    out = Path(args.out)
    heatmap_to_png(hm, out)
    heatmap_to_csv(hm, Path(str(out) + ".csv"))
    print(f"wrote {hm.values.shape[0]}x{hm.values.shape[1]} heatmap to {out}")
    return 0


def _cmd_explain(args) -> int:
    from .analysis import (contrast_template, hermann_cross_template,
                           sweep_target, sweep_to_csv, whites_template)

    resolved = _resolve(args, {"channel": "gray", "context": None}, "explain")
    channel = resolved["channel"]
    if channel not in ("gray", "hue", "saturation", "value"):
        raise UsageError(f"--channel must be gray|hue|saturation|value, "
                         f"got {channel!r}")
    channel_mode = "gray" if channel == "gray" else f"hsv_{channel}"

    if args.illusion == "contrast":
        context = _require(resolved, "context", "explain")
        try:
            surround = int(context)
        except ValueError:
            raise UsageError(f"contrast context must be a 0..255 level, "
                             f"got {context!r}")
        template = contrast_template(surround, channel_mode)
    elif args.illusion == "whites":
        polarity = resolved["context"] or "white_bar"
        if polarity not in ("white_bar", "black_bar"):
            raise UsageError(f"whites context must be white_bar or black_bar, "
                             f"got {polarity!r}")
        template = whites_template(polarity)
    else:  # hermann
        template = hermann_cross_template()

    params = _load_model(args.ckpt)
    sweep = sweep_target(template, params)
    sweep_to_csv(sweep, args.out)
    print(f"wrote sweep to {args.out}")
    return 0


def _cmd_generate(args) -> int:
    from . import data_io
    from .generation import ManipulationConfig, generate_illusion, load_mask

    resolved = _resolve(args, {"eta": None, "stride": 8}, "generate")
    eta = _require(resolved, "eta", "generate")
    params = _load_model(args.ckpt)
    image = data_io.load_image(args.image)
    mask = load_mask(args.mask, image.shape) if args.mask else None
    cfg = ManipulationConfig(eta=eta, stride=resolved["stride"],
                             patch_size=params.patch_size)
    out_image = generate_illusion(image, mask, eta, params, cfg)
    out = Path(args.out)
    data_io.save_image(out_image, out)
    record = {
        "eta": eta,
        "stride": cfg.stride,
        "patch_size": cfg.patch_size,
        "checkpoint_sha256": _sha256(args.ckpt),
        "mask_sha256": _sha256(args.mask) if args.mask else None,
        "image_sha256": _sha256(args.image),
    }
    with open(str(out) + ".meta.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    resolved = _resolve(args, {"seed": 0}, "gradcheck")
    results = run_gradcheck(seed=resolved["seed"])
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tolerance:.0e} {status}")
        failures += 0 if r.passed else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="patchlikely",
                     description="Patch-likelihood flow model tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="key=value config file")

    p = sub.add_parser("train", help="train a patch model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="directory of natural images")
    src.add_argument("--image", help="single image (internal statistics)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    for name, typ in [("steps", int), ("batch-size", int),
                      ("learning-rate", float), ("warmup-steps", int),
                      ("checkpoint-every", int), ("seed", int),
                      ("patch-size", int), ("flow-steps", int),
                      ("hidden-width", int), ("log-every", int)]:
        p.add_argument(f"--{name}", type=typ, default=None)
    add_config(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="NLL of one patch")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--patch", help="COL,ROW of a patch inside the image")
    add_config(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("minmax", help="most/least likely patches of an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    add_config(p)
    p.set_defaults(func=_cmd_minmax)

    p = sub.add_parser("heatmap", help="NLL heatmap of an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True, help="output PNG path")
    add_config(p)
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("explain", help="256-level template sweep to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--illusion", required=True,
                   choices=["contrast", "whites", "hermann"])
    p.add_argument("--channel", default=None,
                   help="gray|hue|saturation|value (default gray)")
    p.add_argument("--context", default=None,
                   help="surround level (contrast) or bar polarity (whites)")
    p.add_argument("--out", required=True, help="output CSV path")
    add_config(p)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("generate", help="likelihood-manipulated image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", help="PNG mask, nonzero = protected target")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True, help="output PNG path")
    add_config(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("gradcheck", help="gradient/logdet oracle suite")
    p.add_argument("--seed", type=int, default=None)
    add_config(p)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1

    threads = os.environ.get("PATCHLIKELY_THREADS")
    limiter = nullcontext()
    if threads:
        try:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=int(threads))
        except ValueError:
            print(f"usage error: PATCHLIKELY_THREADS={threads!r} is not an "
                  f"integer", file=sys.stderr)
            return 1

    try:
        with limiter:
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (PatchLikelyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
