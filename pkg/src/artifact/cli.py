"""Command-line entry point.

Every command except ``serve-lm`` and ``replay`` writes a run manifest:
the fully resolved configuration, sha256 digests of every input and
output file and of stdout, and the engine version. ``replay`` re-runs a
manifest with file outputs redirected to a scratch directory and checks
that every digest matches.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import __version__
from .base_lm import load_lm, serve, lm_files
from .constraints import compile_constraint
from .decoding import DecodeConfig, decode
from .dp import DpCache
from .em import Corpus, TrainConfig, distill, train
from .errors import ArtifactError, InputError
from .hmm import Hmm, random_hmm
from .oracle import ENUM_GUARD, coverage, oracle_check, success_rate

EXIT_OK = 0


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    stdout_sha256: str = ""
    seed: int | None = None
    version: str = __version__

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> RunManifest:
        try:
            doc = json.loads(Path(path).read_text())
            return cls(**doc)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise InputError(f"{path}: unreadable manifest ({exc})") from None


@dataclass
class Context:
    """Where a command writes: stdout stream and a hook for output paths."""

    stdout: TextIO
    redirect: Callable[[str], str] = lambda p: p
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def read(self, path: str | None) -> str | None:
        if path is not None:
            if not Path(path).is_file():
                raise InputError(f"{path}: no such file")
            self.inputs[path] = _sha256(path)
        return path

    def write(self, path: str) -> str:
        """Register ``path`` as an output; returns where to actually write it."""
        real = self.redirect(path)
        self.outputs[path] = real
        return real

    def emit(self, cfg: dict, record: dict, text: str) -> None:
        self.stdout.write((json.dumps(record, sort_keys=True) if cfg["json"] else text) + "\n")


# -- commands -------------------------------------------------------------


def _load_constraint(ctx: Context, path: str, vocab: int):
    ctx.read(path)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    try:
        cnf = compile_constraint(doc, check=False)
        cnf.check_vocab(vocab)
    except InputError as exc:
        raise type(exc)(f"{path}: {exc}") from None
    order = doc.get("order")
    if order is True:
        order = list(range(cnf.num_clauses))
    elif order is False:
        order = None
    return cnf, order


def _model(ctx: Context, path: str) -> Hmm:
    ctx.read(path)
    return Hmm.load(path)


def _fmt(x) -> str:
    return "-inf" if x == -np.inf else repr(float(x))


def cmd_train(cfg: dict, ctx: Context) -> None:
    V = cfg["vocab_size"]
    if V is None:
        raise InputError("--vocab-size is required")
    eos = V - 1 if cfg["eos"] is None else cfg["eos"]
    corpus = Corpus.load(ctx.read(cfg["corpus"]), cfg["max_len"], eos, V)
    if cfg["init"]:
        hmm = _model(ctx, cfg["init"])
    else:
        hmm = random_hmm(cfg["states"], V, cfg["max_len"], seed=cfg["seed"], eos_token=eos)
    tc = TrainConfig(epochs=cfg["epochs"], smoothing=cfg["smoothing"], seed=cfg["seed"])

    def report(rec):
        ctx.emit(cfg, rec.to_dict(), f"epoch {rec.epoch} train_ll {_fmt(rec.train_ll)}")

    result = train(hmm, corpus, tc, threads=cfg["threads"], on_epoch=report)
    result.hmm.save(ctx.write(cfg["out"]))
    result.write_metrics(ctx.write(cfg["metrics"] or cfg["out"] + ".metrics.jsonl"))


def cmd_distill(cfg: dict, ctx: Context) -> None:
    for p in lm_files(cfg["teacher"]):
        ctx.read(p)
    with load_lm(cfg["teacher"]) as teacher:
        eos = teacher.eos_token if cfg["eos"] is None else cfg["eos"]
        student = random_hmm(cfg["states"], teacher.vocab_size, cfg["max_len"], seed=cfg["seed"],
                             eos_token=eos)
        tc = TrainConfig(epochs=cfg["epochs"], resample_per_epoch=cfg["samples"],
                         smoothing=cfg["smoothing"], seed=cfg["seed"], heldout=cfg["heldout"])

        def report(rec):
            ctx.emit(cfg, rec.to_dict(),
                     f"epoch {rec.epoch} train_ll {_fmt(rec.train_ll)} heldout_ll {_fmt(rec.heldout_ll)}")

        result = distill(teacher, student, tc, threads=cfg["threads"], on_epoch=report)
    result.hmm.save(ctx.write(cfg["out"]))
    result.write_metrics(ctx.write(cfg["trace"] or cfg["out"] + ".trace.jsonl"))


def cmd_generate(cfg: dict, ctx: Context) -> None:
    hmm = _model(ctx, cfg["model"])
    cnf, order = _load_constraint(ctx, cfg["constraint"], hmm.vocab_size)
    n = cfg["max_len"] or hmm.max_len
    cache = DpCache(hmm, cnf, n=n, order=order)
    dc = DecodeConfig(mode=cfg["mode"], w=cfg["w"], beam_size=cfg["beam_size"], max_len=n,
                      seed=cfg["seed"], strategy=cfg["strategy"])
    for p in lm_files(cfg["lm"]):
        ctx.read(p)
    with load_lm(cfg["lm"], default_hmm=hmm) as lm:
        if lm.vocab_size != hmm.vocab_size:
            raise InputError(f"language model vocabulary {lm.vocab_size} != model {hmm.vocab_size}")
        records = decode(dc, cache, lm, count=cfg["count"])
    for rec in records:
        if not rec["satisfied"]:
            raise ArtifactError(f"internal error: output {rec['tokens']} violates the constraint")
        rec = {k: (_fmt(v) if isinstance(v, float) else v) for k, v in rec.items()}
        ctx.emit(cfg, rec, " ".join(map(str, rec["tokens"])))


def _read_token_lines(path: str) -> list[list[int]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                rows.append([int(t) for t in line.split()])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer token") from None
    return rows


def cmd_eval(cfg: dict, ctx: Context) -> None:
    seqs = _read_token_lines(ctx.read(cfg["outputs"]))
    eos = cfg["eos"]
    if cfg["model"]:
        eos = _model(ctx, cfg["model"]).eos_token
    vocab = 1 + max((t for s in seqs for t in s), default=0)
    cnf, order = _load_constraint(ctx, cfg["constraint"], max(vocab, eos + 1 if eos is not None else 0))
    cnfs = [cnf] * len(seqs)
    cov = coverage(seqs, cnfs, eos)
    succ = success_rate(seqs, cnfs, eos, orders=None if order is None else [order] * len(seqs))
    ctx.emit(cfg, {"count": len(seqs), "coverage": cov, "success_rate": succ},
             f"count {len(seqs)} coverage {cov!r} success_rate {succ!r}")


def cmd_oracle_check(cfg: dict, ctx: Context) -> None:
    hmm = _model(ctx, cfg["model"])
    cnf, order = _load_constraint(ctx, cfg["constraint"], hmm.vocab_size)
    cache = DpCache(hmm, cnf, n=cfg["max_len"] or hmm.max_len, order=order)
    try:
        prefixes = [[int(t) for t in p.split()] for p in (cfg["prefix"] or [""])]
    except ValueError:
        raise InputError("prefixes must be space-separated token ids") from None
    report = oracle_check(cache, prefixes, guard=cfg["guard"])
    doc = report.to_dict()
    ctx.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    if report.max_error > cfg["tol"]:
        raise ArtifactError(f"engine disagrees with enumeration by {report.max_error:.3g}")


def cmd_serve_lm(cfg: dict, ctx: Context) -> None:
    with load_lm(cfg["lm"]) as lm:
        serve(lm, sys.stdin, ctx.stdout)


# -- argument handling ----------------------------------------------------

_COMMON = {"json": False, "threads": None, "seed": 0}

COMMANDS: dict[str, tuple[Callable, dict, str]] = {
    "train": (cmd_train, {
        "corpus": None, "vocab_size": None, "eos": None, "states": 8, "max_len": 16,
        "epochs": 10, "smoothing": 1e-4, "init": None, "out": None, "metrics": None,
    }, "fit an HMM to a corpus with EM"),
    "distill": (cmd_distill, {
        "teacher": None, "eos": None, "states": 8, "max_len": 16, "epochs": 10,
        "samples": 1000, "heldout": 1000, "smoothing": 1e-4, "out": None, "trace": None,
    }, "fit an HMM to samples from a teacher language model"),
    "generate": (cmd_generate, {
        "model": None, "constraint": None, "mode": "unsupervised", "w": 0.3,
        "strategy": "sample", "beam_size": 4, "count": 1, "lm": "hmm", "max_len": None,
    }, "generate sequences that satisfy a constraint"),
    "eval": (cmd_eval, {
        "outputs": None, "constraint": None, "model": None, "eos": None,
    }, "coverage and success rate of generated sequences"),
    "oracle-check": (cmd_oracle_check, {
        "model": None, "constraint": None, "prefix": None, "max_len": None,
        "guard": ENUM_GUARD, "tol": 1e-8,
    }, "compare the DP against brute-force enumeration"),
    "serve-lm": (cmd_serve_lm, {"lm": None}, "serve a language model over the line protocol"),
}

_REQUIRED = {
    "train": ["corpus", "out"],
    "distill": ["teacher", "out"],
    "generate": ["model", "constraint"],
    "eval": ["outputs", "constraint"],
    "oracle-check": ["model", "constraint"],
    "serve-lm": ["lm"],
}

_TYPES = {
    "vocab_size": int, "eos": int, "states": int, "max_len": int, "epochs": int,
    "smoothing": float, "samples": int, "heldout": int, "w": float, "beam_size": int,
    "count": int, "guard": int, "tol": float, "seed": int, "threads": int,
}

_CHOICES = {"mode": ["unsupervised", "supervised"], "strategy": ["sample", "beam"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, defaults, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option values (flags override it)")
        p.add_argument("--manifest", help="where to write the run manifest")
        for key, default in {**defaults, **_COMMON}.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, action="store_const", const=True, default=None)
            elif key == "prefix":
                p.add_argument(flag, action="append", default=None,
                               help="space-separated prefix ids; repeatable")
            else:
                p.add_argument(flag, type=_TYPES.get(key, str), choices=_CHOICES.get(key),
                               default=None, help=f"default: {default}")
    rp = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    rp.add_argument("manifest_path")
    rp.add_argument("--keep", help="directory to keep replayed output files in")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    _, defaults, _ = COMMANDS[command]
    cfg = {**defaults, **_COMMON}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{args.config}: unreadable config ({exc})") from None
        if not isinstance(doc, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise InputError(f"{args.config}: unknown option {key!r} for {command}")
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    missing = [k for k in _REQUIRED[command] if cfg[k] is None]
    if missing:
        raise InputError(f"{command}: missing required option(s) "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def run(command: str, cfg: dict, ctx: Context) -> RunManifest:
    func = COMMANDS[command][0]
    buffer = io.StringIO()
    real_stdout, ctx.stdout = ctx.stdout, buffer
    try:
        func(cfg, ctx)
    finally:
        ctx.stdout = real_stdout
        real_stdout.write(buffer.getvalue())
        real_stdout.flush()
    return RunManifest(
        command=command,
        config=cfg,
        inputs=dict(ctx.inputs),
        outputs={p: _sha256(real) for p, real in ctx.outputs.items()},
        stdout_sha256=hashlib.sha256(buffer.getvalue().encode()).hexdigest(),
        seed=cfg.get("seed"),
    )


def _default_manifest_path(cfg: dict) -> str:
    if cfg.get("out"):
        return cfg["out"] + ".manifest.json"
    return "run.manifest.json"


def replay(path: str, stdout: TextIO, keep: str | None = None) -> RunManifest:
    manifest = RunManifest.load(path)
    if manifest.command not in COMMANDS:
        raise InputError(f"{path}: unknown command {manifest.command!r}")
    for p, digest in manifest.inputs.items():
        if not Path(p).is_file() or _sha256(p) != digest:
            raise InputError(f"input {p} is missing or changed since the recorded run")
    scratch = Path(keep) if keep else Path(tempfile.mkdtemp(prefix="replay-"))
    scratch.mkdir(parents=True, exist_ok=True)
    names: dict[str, str] = {}

    def redirect(p: str) -> str:
        names.setdefault(p, str(scratch / f"{len(names)}-{Path(p).name}"))
        return names[p]

    cfg = dict(manifest.config)
    ctx = Context(stdout, redirect=redirect)
    again = run(manifest.command, cfg, ctx)
    if again.stdout_sha256 != manifest.stdout_sha256:
        raise ArtifactError("replayed stdout differs from the recorded run")
    for p, digest in manifest.outputs.items():
        if again.outputs.get(p) != digest:
            raise ArtifactError(f"replayed output {p} differs from the recorded run")
    return again


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            replay(args.manifest_path, sys.stdout, args.keep)
            return EXIT_OK
        cfg = resolve_config(args.command, args)
        ctx = Context(sys.stdout)
        if args.command == "serve-lm":
            cmd_serve_lm(cfg, ctx)
            return EXIT_OK
        manifest = run(args.command, cfg, ctx)
        manifest.save(args.manifest or _default_manifest_path(cfg))
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # anything unexpected is an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
