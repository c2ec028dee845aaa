"""Command-line entry point: ``glyphda <subcommand> ...``.

Exit codes: 0 ok, 2 usage or config error, 3 I/O failure (including a held
lock), 4 non-finite loss abort, 5 checkpoint or architecture mismatch.
stdout carries ``key=value`` lines; human-readable tables go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import ContainerError, read_container, write_container
from .config import (OUTPUT_ROOT_ENV, ConfigError, DegradationConfig, apply_overrides, config_from_tree, from_dict,
                     load_config, loads_config, to_dict)
from .data import (CorpusError, DegradationSpec, Domain, ImageBatch, load_corpora,
                   load_folder_corpus, synth_glyph_corpus, to_tensor, write_folder_corpus, write_glyph_corpus)
from .evaluation import aggregate_runs, evaluate, export_features, format_mean_std, save_grid
from .latent import transform_quadruple
from .losses import NonFiniteLossError
from .networks import WeightsMismatchError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
LOCK_NAME = ".lock"

log = logging.getLogger("glyphda")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def emit(**pairs) -> None:
    """One record per line as space-separated key=value pairs."""
    print(" ".join(f"{k}={v}" for k, v in pairs.items()), flush=True)


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> None:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)), file=sys.stderr)


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


@contextmanager
def output_lock(out: Path):
    """Exclusive ownership of an output dir for the lifetime of a run."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_IO, f"{out} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def code_hash() -> str:
    """Content hash over the package sources, in the style of a git tree id."""
    h = hashlib.sha1()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        blob = f.read_bytes()
        h.update(f"{f.name} blob {len(blob)}\0".encode() + blob)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, digest: Optional[str], seed: Optional[int], started: str, artifacts: Sequence[Path],
                   name: str = "run_manifest.json") -> Path:
    paths = sorted({str(Path(a)) for a in artifacts})
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise CliError(EXIT_IO, f"manifest names missing artifacts: {missing}")
    body = {"config_digest": digest, "code_hash": code_hash(), "version": __version__, "seed": seed,
            "started": started, "finished": _now(), "artifacts": paths}
    path = out / name
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


# --- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.classes < 2 or args.per_class < 2:
        raise CliError(EXIT_USAGE, "--classes and --per-class must be >= 2")
    deg_cfg = DegradationConfig()
    if args.degradation:
        try:
            tree = yaml.safe_load(Path(args.degradation).read_text()) or {}
        except OSError as e:
            raise CliError(EXIT_IO, str(e)) from None
        deg_cfg = from_dict(DegradationConfig, tree, "degradation")
    try:
        spec = DegradationSpec.from_config(deg_cfg)
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"degradation: {e}") from None
    out = _resolve_out(args.out)
    corpus = synth_glyph_corpus(args.classes, args.per_class, args.seed, spec, args.side, args.split)
    manifest = {"classes": args.classes, "per_class": args.per_class, "seed": args.seed, "side": args.side,
                "split": args.split, "degradation": to_dict(deg_cfg)}
    with output_lock(out):
        for sub in ("clean", "degraded"):
            if (out / sub).exists() and any((out / sub).iterdir()):
                raise CliError(EXIT_IO, f"{out / sub} already holds files")
        write_glyph_corpus(out, corpus, args.classes, manifest)
    emit(out=out, clean=len(corpus.clean), degraded=len(corpus.degraded))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import fit

    cfg = load_config(args.config, args.set)
    out = cfg.output_path()
    started = _now()
    with output_lock(out):
        (out / "config.yaml").write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
        result = fit(cfg, resume=args.resume)
        final = result.checkpoints[-1] if result.checkpoints else None
        artifacts = [out / "config.yaml", result.metrics, result.evals, *result.checkpoints, *result.grids]
        best = out / "checkpoints" / "best.ckpt"
        if best.exists():
            artifacts.append(best)
        manifest = write_manifest(out, cfg.digest(), cfg.seed, started, artifacts)
    emit(out=out, iterations=result.state.iteration, final_checkpoint=final, manifest=manifest,
         **{f"{k}_accuracy": f"{v:.4f}" for k, v in result.last_eval.items()})
    return EXIT_OK


def _load_checkpoint(path: str, overrides: Sequence[str] = ()):
    from .trainer import checkpoint_load

    cfg = None
    if overrides:
        meta, _ = read_container(path)
        base = to_dict(loads_config(meta["config"]))
        cfg = config_from_tree(apply_overrides(base, list(overrides)))
    state = checkpoint_load(path, cfg)
    state.nets.eval()
    return state


def _domains(flag: str) -> list[Domain]:
    return {"both": [Domain.SOURCE, Domain.TARGET], "source": [Domain.SOURCE], "target": [Domain.TARGET]}[flag]


def cmd_eval(args) -> int:
    if args.seeds is not None and args.seeds != len(args.checkpoints):
        raise CliError(EXIT_USAGE, f"--seeds {args.seeds} but {len(args.checkpoints)} checkpoints given")
    results, rows = [], []
    for path in args.checkpoints:
        state = _load_checkpoint(path, args.set)
        corpora = load_corpora(state.cfg.data)
        for domain in _domains(args.domain):
            data = corpora.source_eval if domain is Domain.SOURCE else corpora.target_eval
            if data is None:
                raise CliError(EXIT_USAGE, f"no {domain.value} evaluation corpus configured")
            r = evaluate(state.nets.structure_encoder, state.nets.classifier, data, domain, state.cfg.seed)
            results.append(r)
            rows.append([path, state.cfg.seed, domain.value, f"{100 * r.accuracy:.2f}", r.count])
            emit(checkpoint=path, seed=state.cfg.seed, domain=domain.value, accuracy=f"{r.accuracy:.6f}", count=r.count)
    aggregate = []
    if len(args.checkpoints) > 1:
        for domain in _domains(args.domain):
            mean, std = aggregate_runs([r for r in results if r.domain is domain])
            aggregate.append(["mean±std", "-", domain.value, format_mean_std(mean, std), len(args.checkpoints)])
            emit(aggregate=domain.value, mean=f"{mean:.4f}", std=f"{std:.4f}", runs=len(args.checkpoints))
    header = ["checkpoint", "seed", "domain", "accuracy_pct", "count"]
    _table(header, rows + aggregate)
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows + aggregate)
        emit(results=out)
    return EXIT_OK


def _image_set(path: Optional[str], side: int, fallback, count: Optional[int]):
    data = load_folder_corpus(path, side) if path else fallback
    if data is None:
        raise CliError(EXIT_USAGE, "no images given and none configured")
    images = data.images
    return images[:count] if count else images


def cmd_transform(args) -> int:
    state = _load_checkpoint(args.checkpoint, args.set)
    cfg = state.cfg
    corpora = None if (args.source and args.target) else load_corpora(cfg.data)
    src = _image_set(args.source, cfg.data.side, corpora and (corpora.source_eval or corpora.source), args.count)
    tgt = _image_set(args.target, cfg.data.side, corpora and (corpora.target_eval or corpora.target), args.count)
    if len(src) != len(tgt):
        raise CliError(EXIT_USAGE, f"{len(src)} source images but {len(tgt)} target images")
    dtype = next(state.nets.parameters()).dtype
    xs = ImageBatch(to_tensor(src).to(dtype), Domain.SOURCE, torch.zeros(len(src), dtype=torch.long))
    xt = ImageBatch(to_tensor(tgt).to(dtype), Domain.TARGET)
    with torch.no_grad():
        q = transform_quadruple(state.nets, xs, xt)
    out = _resolve_out(args.out)
    with output_lock(out):
        save_grid([xs.pixels, q.x_st], out / "source_to_target.png")
        save_grid([xt.pixels, q.x_ts], out / "target_to_source.png")
        arrays = {k: v.float().numpy() for k, v in
                  (("x_s", xs.pixels), ("x_st", q.x_st), ("x_t", xt.pixels), ("x_ts", q.x_ts))}
        write_container(out / "transforms.bin", {"kind": "transforms", "pairs": len(src)}, arrays)
    emit(out=out, pairs=len(src), source_grid=out / "source_to_target.png",
         target_grid=out / "target_to_source.png", arrays=out / "transforms.bin")
    return EXIT_OK


def cmd_export_features(args) -> int:
    state = _load_checkpoint(args.checkpoint, args.set)
    corpora = load_corpora(state.cfg.data)
    sets = []
    for domain in _domains(args.domain):
        data = corpora.source_eval if domain is Domain.SOURCE else corpora.target_eval
        if data is None:
            raise CliError(EXIT_USAGE, f"no {domain.value} evaluation corpus configured")
        sets.append((data, domain))
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    quick = _resolve_out(args.quicklook) if args.quicklook else None
    dump = export_features(state.nets.structure_encoder, sets, out, quick)
    emit(out=out, samples=dump.features.shape[0], width=dump.features.shape[1], **({"quicklook": quick} if quick else {}))
    return EXIT_OK


def cmd_pretrain_perceptual(args) -> int:
    from .pretrain import pretrain_perceptual, save_perceptual

    cfg = load_config(args.config, args.set)
    corpora = load_corpora(cfg.data)
    out = _resolve_out(args.out)
    vgg = pretrain_perceptual(corpora.source, cfg.model.num_classes, cfg.model.perceptual_width, args.steps,
                              seed=args.seed)
    save_perceptual(vgg, out, {"width": cfg.model.perceptual_width, "steps": args.steps, "seed": args.seed,
                               "config_digest": cfg.digest()})
    emit(out=out, width=cfg.model.perceptual_width, steps=args.steps)
    return EXIT_OK


def cmd_convert_svhn(args) -> int:
    from scipy.io import loadmat

    try:
        mat = loadmat(args.mat)
    except (OSError, ValueError) as e:
        raise CliError(EXIT_IO, f"{args.mat}: {e}") from None
    if "X" not in mat or "y" not in mat:
        raise CliError(EXIT_USAGE, f"{args.mat}: expected variables X and y")
    x = np.transpose(mat["X"], (3, 0, 1, 2)).astype(np.float64)  # (n, 32, 32, 3)
    y = mat["y"].reshape(-1).astype(np.int64) % 10  # the digit 0 is stored as 10
    if args.limit:
        x, y = x[:args.limit], y[:args.limit]
    grey = x @ np.array([0.299, 0.587, 0.114])
    images = np.repeat((grey / 127.5 - 1.0)[..., None], 3, axis=-1)
    out = _resolve_out(args.out)
    with output_lock(out):
        write_folder_corpus(out, images, y, 10)
    emit(out=out, images=len(y))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glyphda", description=__doc__.split("\n\n")[0],
                                epilog=f"Relative output paths are resolved under ${OUTPUT_ROOT_ENV} when it is set.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic clean/degraded glyph corpus")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--degradation", help="YAML file with degradation settings")
    s.add_argument("--side", type=int, default=32)
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def with_overrides(q):
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    with_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="measure accuracy of one or more checkpoints")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--domain", choices=("both", "source", "target"), default="both")
    e.add_argument("--seeds", type=int, help="expected number of seed checkpoints to aggregate")
    e.add_argument("--out", help="results CSV path")
    with_overrides(e)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("transform", help="render texture-swapped image grids")
    x.add_argument("checkpoint")
    x.add_argument("--source", help="source image folder (default: configured source eval set)")
    x.add_argument("--target", help="target image folder (default: configured target eval set)")
    x.add_argument("--count", type=int, default=8, help="number of pairs (0 = all)")
    x.add_argument("--out", required=True)
    with_overrides(x)
    x.set_defaults(func=cmd_transform)

    f = sub.add_parser("export-features", help="dump pooled structure codes")
    f.add_argument("checkpoint")
    f.add_argument("--domain", choices=("both", "source", "target"), default="both")
    f.add_argument("--out", required=True)
    f.add_argument("--quicklook", help="optional CSV of a 2-D principal-component projection")
    with_overrides(f)
    f.set_defaults(func=cmd_export_features)

    w = sub.add_parser("pretrain-perceptual", help="fit the perceptual extractor on the labeled source corpus")
    w.add_argument("-c", "--config", required=True)
    w.add_argument("--steps", type=int, default=600)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True, help="weights file to write")
    with_overrides(w)
    w.set_defaults(func=cmd_pretrain_perceptual)

    v = sub.add_parser("convert-svhn", help="convert an SVHN .mat file to a class-per-directory tree")
    v.add_argument("mat")
    v.add_argument("--out", required=True)
    v.add_argument("--limit", type=int)
    v.set_defaults(func=cmd_convert_svhn)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"error: config {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContainerError, WeightsMismatchError) as e:
        print(f"error: checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (CorpusError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
