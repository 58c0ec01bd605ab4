"""Operator CLI: dataset generation, training, sampling, and evaluation.

Every command writes a manifest.json into its output directory recording the
exact flags, seed, and SHA-256 hashes of inputs and primary outputs, so a run
can be re-executed byte-identically from the manifest alone (use
--deterministic to pin the thread count).

Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    StructuredPrompt,
    generate_sprite_dataset,
    load_dataset,
    save_dataset,
)
from .inference import GenerationRequest, customize, save_video_outputs
from .metrics import ToyEmbedder, evaluate_run
from .training import NumericError, RunConfig, train_loop

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

MANIFEST_NAME = "manifest.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_tree(root: Path, exclude: tuple[str, ...] = (MANIFEST_NAME,)) -> dict[str, str]:
    hashes = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            hashes[str(p.relative_to(root))] = _sha256(p)
    return hashes


def _write_manifest(out: Path, command: str, flags: dict, inputs: dict[str, str]) -> None:
    manifest = {
        "tool": "refvdm",
        "version": __version__,
        "command": command,
        "flags": flags,
        "inputs": inputs,
        "outputs": _hash_tree(out),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _set_deterministic(flag: bool) -> None:
    if flag:
        import torch

        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = _prepare_out(args.out, args.force)
    samples = generate_sprite_dataset(
        args.n,
        num_frames=args.frames,
        height=args.size,
        width=args.size,
        seed=args.seed,
        apply_subject_highlight=not args.no_subject_highlight,
        reference_frame=args.reference_frame,
    )
    save_dataset(
        out,
        samples,
        meta={
            "n": args.n,
            "frames": args.frames,
            "size": args.size,
            "seed": args.seed,
            "subject_highlight": not args.no_subject_highlight,
            "reference_frame": args.reference_frame,
        },
    )
    _write_manifest(out, "gen-data", _flags(args), inputs={})
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    _set_deterministic(args.deterministic)
    run = RunConfig.from_file(args.config)
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True))
    train_loop(samples, run, out, resume=args.resume)
    inputs = {
        "config": _sha256(Path(args.config)),
        "data": json.dumps(sorted(_hash_tree(Path(args.data)).values()))[:64],
    }
    _write_manifest(out, "train", _flags(args), inputs=inputs)
    return EXIT_OK


def _load_prompt_spec(spec: str) -> StructuredPrompt:
    text = Path(spec).read_text() if Path(spec).exists() else spec
    try:
        return StructuredPrompt.from_dict(json.loads(text))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SystemExit(f"bad --prompt-spec: {exc}") from exc


def cmd_sample(args: argparse.Namespace) -> int:
    from PIL import Image

    _set_deterministic(args.deterministic)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    ref = np.asarray(Image.open(args.ref).convert("RGB"), dtype=np.float32) / 255.0
    prompt = _load_prompt_spec(args.prompt_spec)
    request = GenerationRequest(
        reference_image=ref,
        prompt=prompt,
        seed=args.seed,
        steps=args.steps,
        guidance_scale=args.cfg,
        num_frames=args.frames,
    )
    out = _prepare_out(args.out, args.force)
    video = customize(request, ckpt)
    save_video_outputs(video, out, request=request, checkpoint_path=ckpt, make_gif=args.gif)
    _write_manifest(out, "sample", _flags(args), inputs={"checkpoint": _sha256(ckpt), "ref": _sha256(Path(args.ref))})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _set_deterministic(args.deterministic)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    test_set = load_dataset(args.testset)
    out = _prepare_out(args.out, args.force)
    evaluate_run(
        ckpt,
        test_set,
        out_dir=out,
        embedder=ToyEmbedder(),
        seed=args.seed,
        steps=args.steps,
        guidance_scale=args.cfg,
    )
    _write_manifest(
        out, "eval", _flags(args), inputs={"checkpoint": _sha256(ckpt), "testset": str(Path(args.testset))}
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def _flags(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refvdm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic sprite-video dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--no-subject-highlight", action="store_true")
    g.add_argument("--reference-frame", choices=("first", "random"), default="first")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate a customized video from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--ref", required=True, help="reference image PNG")
    s.add_argument("--prompt-spec", required=True, help="JSON file or inline JSON with prompt fields")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=30)
    s.add_argument("--cfg", type=float, default=8.0)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--gif", action="store_true")
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="run the metric suite on a test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--testset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=30)
    e.add_argument("--cfg", type=float, default=8.0)
    e.add_argument("--force", action="store_true")
    e.add_argument("--deterministic", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FileExistsError, FileNotFoundError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, SystemExit) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
