"""Command line: ``ganaug {train,generate,evaluate,convert,phantom}``.

Configuration precedence is command-line flag, then ``--config`` file, then
built-in default. Exit codes: 0 success, 2 configuration, 3 data,
4 numerical abort, 5 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import tensor as T
from . import trainer as TR

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN, EXIT_IO = 0, 2, 3, 4, 5

# flag dest -> RunConfig field
FLAG_FIELDS = {
    "model": "model",
    "latent_dim": "latent_dim",
    "final_res": "final_resolution",
    "iters": "total_iterations",
    "batch": "batch_size",
    "lr": "learning_rate",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lambda_gp": "lambda_gp",
    "lambda_ssim": "lambda_ssim",
    "seed": "seed",
    "data_dir": "data_dir",
    "out_dir": "out_dir",
    "phantom": "phantom",
    "phantom_count": "phantom_count",
    "phantom_seed": "phantom_seed",
    "channel_cap": "channel_cap",
    "precision": "precision",
    "checkpoint_every": "checkpoint_every",
    "n_critic": "n_critic",
    "ssim_mode": "ssim_mode",
}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TR.RunConfig)}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# config files -------------------------------------------------------------------


def _coerce(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if "bool" in kind:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise TR.ConfigError(f"{key}: expected a boolean, got {text!r}")
    if "None" in kind and text.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise TR.ConfigError(f"{key}: cannot parse {text!r} as {kind.split(' ')[0]}") from None
    return text


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment.

    Keys are RunConfig field names or the matching long flag names
    (``final-res``, ``iters``, ...).
    """
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TR.ConfigError(f"config line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        key = FLAG_FIELDS.get(key, key)
        if key not in _FIELD_TYPES:
            raise TR.ConfigError(f"{key}: unknown configuration key (line {n})")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> TR.RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc.strerror}") from exc
    for dest, name in FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    return TR.RunConfig(**values)


# parser ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # every default is None so that absent flags fall through to file/defaults
    p.add_argument("--model", choices=TR.MODELS)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--final-res", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda-gp", type=float)
    p.add_argument("--lambda-ssim", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--phantom", action="store_true", default=None)
    p.add_argument("--phantom-count", type=int)
    p.add_argument("--phantom-seed", type=int)
    p.add_argument("--channel-cap", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--n-critic", type=int)
    p.add_argument("--ssim-mode", choices=TR.SSIM_MODES)
    p.add_argument("--config", help="key=value configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganaug", description="GAN augmentation lab for single-slice MR images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", help="write generated samples as PGM files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", help="FID and MS-SSIM report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--phantom", action="store_true")
    p.add_argument("--phantom-count", type=int, default=259)
    p.add_argument("--phantom-seed", type=int, default=1)
    p.add_argument("--provider", default="pixel-downsample")
    p.add_argument("--fid-samples", type=int, default=10000)
    p.add_argument("--msssim-pairs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")

    p = sub.add_parser("convert", help="raw <case>_<slice>.pgm volumes -> normalised slices")
    p.add_argument("--data-dir", required=True, help="input directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--slice-index", type=int, default=D.DEFAULT_SLICE_INDEX)
    p.add_argument("--pad", type=int, default=None)

    p = sub.add_parser("phantom", help="write a seeded synthetic dataset")
    p.add_argument("--count", type=int, default=259)
    p.add_argument("--final-res", type=int, default=32)
    p.add_argument("--ellipses", type=int, default=3)
    p.add_argument("--tumor-intensity", type=float, default=0.95)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    return parser


# commands ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.resume:
        overrides = {}
        if args.data_dir:
            overrides["data_dir"] = args.data_dir
        run = TR.TrainingRun.load(args.resume, **overrides)
        out_dir = args.out_dir or str(Path(args.resume).resolve().parent.parent)
        every = args.checkpoint_every or run.config.checkpoint_every
    else:
        config = resolve_config(args)
        run = TR.TrainingRun(config)
        out_dir, every = config.out_dir, config.checkpoint_every
    last = TR.run_training(run, out_dir, checkpoint_every=every)
    print(f"trained to iteration {run.global_iter}; last checkpoint {last}")
    return EXIT_OK


def _load_generator(path):
    G, config = TR.load_generator(path)
    return G, config, TR.checkpoint_model_id(path, config)


def cmd_generate(args) -> int:
    G, config, _ = _load_generator(args.checkpoint)
    if args.count < 0:
        raise TR.ConfigError(f"count: must be non-negative (got {args.count})")
    with T.precision(config.precision):
        images = TR.generate_samples(G, args.count, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(args.count)))
    for k, img in enumerate(images):
        D.write_pgm(out / f"{k:0{width}d}.pgm", D.image_to_pgm_values(img[0]))
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    G, config, model_id = _load_generator(args.checkpoint)
    r = G.resolution_active
    if args.provider == "external-file":
        raise TR.ConfigError("provider: external-file embeds precomputed vectors and cannot embed generated images")
    if args.phantom:
        params = D.PhantomParams(resolution=r, seed=args.phantom_seed)
        real = D.stack_records(D.phantom_generate(params, args.phantom_count))
    elif args.data_dir:
        real = D.resize_pow2(D.stack_records(D.load_records(args.data_dir)), r)
    else:
        raise TR.ConfigError("data_dir: evaluate needs --data-dir or --phantom")

    def fake(n, rng):
        z = rng.standard_normal((n, G.spec.latent_dim))
        out = []
        with T.precision(config.precision), T.no_grad():
            for k in range(0, n, 256):
                out.append(G(T.Tensor(z[k : k + 256])).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros((0, 1, r, r))

    flags: list[str] = []
    fid = M.fid_protocol(real, fake, args.provider, samples=args.fid_samples, seed=args.seed, flags=flags)
    ms = M.ms_ssim_protocol(fake, pairs=args.msssim_pairs, seed=args.seed)
    report = M.MetricReport(
        fid=fid,
        ms_ssim=ms,
        pair_count_fid=args.fid_samples,
        pair_count_msssim=args.msssim_pairs,
        provider_id=M.get_provider(args.provider).provider_id,
        seed=args.seed,
        model_id=model_id,
        flags=flags,
    )
    text = report.to_json()
    print(text)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).resolve().parent.parent
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    (out_dir / "reports" / f"report_{Path(args.checkpoint).stem}.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_convert(args) -> int:
    manifest = D.convert_directory(args.data_dir, args.out_dir, args.slice_index, args.pad)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    params = D.PhantomParams(
        resolution=args.final_res,
        ellipse_count=args.ellipses,
        tumor_intensity=args.tumor_intensity,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    manifest = D.save_records(D.phantom_generate(params, args.count), args.out_dir)
    print(f"wrote {args.count} phantoms and {manifest}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "convert": cmd_convert,
    "phantom": cmd_phantom,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TR.ConfigError, M.ProviderError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, T.ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (T.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (TR.CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
