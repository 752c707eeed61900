"""``cdtcn`` command line: mix, train, enhance, eval, gradcheck, spec.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Diagnostics go to stderr; reports go to stdout or ``--out`` files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checks, data, dsp, model, train
from .audio_io import AudioClip, atomic_write, WavFormatError, WavParseError, read_wav, write_wav
from .metrics import DomainError, si_snr
from .numerics import ContractError

OK, USAGE, DATA, NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _write_text(path, text: str) -> None:
    atomic_write(path, text.encode())


# ---------------------------------------------------------------------------
# mix


def cmd_mix(args) -> int:
    try:
        with open(args.spec) as f:
            fields = json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read spec {args.spec}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec {args.spec} is not valid JSON: {exc.msg}")
    if not isinstance(fields, dict):
        raise UsageError("spec must be a JSON object")
    fields = dict(fields, out_dir=args.out)
    try:
        spec = data.CorpusSpec.from_dict(fields)
    except (data.ConfigurationError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid corpus spec: {exc}")
    try:
        manifest = data.build_corpus(spec)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {args.out}: {exc}")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["split", "snr_db", "n_clips"])
    for split, counts in data.summarize(manifest).items():
        for snr, n in sorted(counts.items()):
            w.writerow([split, snr, n])
    return OK


# ---------------------------------------------------------------------------
# train


def _resolve_config(name: str) -> model.SystemConfig:
    if name.replace("_", "-") in model.PRESET_NAMES:
        return model.preset(name)
    if not os.path.isfile(name):
        raise UsageError(f"unknown variant {name!r}; valid names: {', '.join(model.PRESET_NAMES)} "
                         "or a config JSON path")
    try:
        return model.load_config(name)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid config {name}: {exc}")


def _load_manifest(path) -> data.MixtureManifest:
    try:
        return data.load_manifest(path)
    except (OSError, data.ManifestError) as exc:
        raise DataError(f"bad manifest {path}: {exc}")


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    cfg = _resolve_config(args.variant)
    manifest = _load_manifest(args.manifest)
    if manifest.sample_rate != cfg.sample_rate:
        raise DataError(f"manifest sample rate {manifest.sample_rate} Hz does not match "
                        f"config {cfg.sample_rate} Hz")
    system = model.EnhancementSystem(cfg, seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".train-", dir=out))
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}")
    try:
        history = train.train(system, manifest, args.epochs, batch_size=args.batch, lr=args.lr,
                              seed=args.seed, clip=args.clip, checkpoint_dir=staging)
        for item in sorted(staging.iterdir()):
            os.replace(item, out / item.name)
    except train.NumericalError as exc:
        raise NumericalFailure(str(exc))
    except (OSError, WavFormatError, WavParseError, DomainError, ContractError) as exc:
        raise DataError(str(exc))
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    sys.stdout.write(train.history_csv(history))
    return OK


# ---------------------------------------------------------------------------
# enhance


def _load_checkpoint(path) -> model.EnhancementSystem:
    try:
        return train.load_checkpoint(path).restore()
    except (OSError, train.CheckpointError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}")


def _inputs(path: Path) -> List[Path]:
    if path.is_dir():
        files = []
        for p in sorted(path.iterdir()):
            if p.is_file() and p.suffix.lower() == ".wav":
                files.append(p)
            else:
                _warn(f"skipping {p} (not a .wav file)")
        return files
    if path.is_file():
        return [path]
    raise DataError(f"input {path} does not exist")


def cmd_enhance(args) -> int:
    system = _load_checkpoint(args.ckpt)
    sr = system.cfg.sample_rate
    results = []
    for path in _inputs(Path(args.inp)):
        try:
            clip = read_wav(path)
        except (OSError, WavFormatError, WavParseError) as exc:
            raise DataError(f"{path}: {exc}")
        if clip.sample_rate != sr:
            raise DataError(f"{path}: sample rate {clip.sample_rate} Hz does not match checkpoint ({sr} Hz)")
        try:
            enhanced = system.enhance(clip.samples)
        except FloatingPointError as exc:
            raise NumericalFailure(f"{path}: {exc}")
        results.append((path.name, enhanced))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        # everything is computed before the first write
        for name, samples in results:
            write_wav(out / name, AudioClip(samples, sr))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}")
    return OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    records = manifest.split(args.split)
    if not records:
        if args.split in data.SPLITS:
            raise DataError(f"split {args.split!r} is empty")
        available = ", ".join(manifest.splits()) or "none"
        raise DataError(f"split {args.split!r} not in manifest; available: {available}")
    system = _load_checkpoint(args.ckpt) if args.ckpt else None
    if system is not None and system.cfg.sample_rate != manifest.sample_rate:
        raise DataError(f"checkpoint rate {system.cfg.sample_rate} Hz does not match manifest "
                        f"{manifest.sample_rate} Hz")
    try:
        pairs = data.load_pairs(manifest, records)
    except (OSError, WavFormatError, WavParseError) as exc:
        raise DataError(str(exc))
    groups = {}
    for rec, (mix, clean) in zip(records, pairs):
        est = mix if system is None else system.enhance(mix)
        try:
            score = si_snr(est, clean)
        except DomainError as exc:
            raise DataError(f"{rec.mixture_path}: {exc}")
        groups.setdefault(rec.snr_db, []).append(score)
    condition = "unprocessed" if system is None else "enhanced"
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["split", "condition", "snr_db", "n_clips", "si_snr_db"])
    for snr in sorted(groups):
        w.writerow([args.split, condition, snr, len(groups[snr]), f"{np.mean(groups[snr]):.4f}"])
    return OK


# ---------------------------------------------------------------------------
# gradcheck

_DTYPES = {"f64": "float64", "float64": "float64", "f32": "float32", "float32": "float32"}


def cmd_gradcheck(args) -> int:
    name = args.variant.replace("_", "-")
    if name not in model.PRESET_NAMES:
        raise UsageError(f"unknown variant {args.variant!r}; valid names: {', '.join(model.PRESET_NAMES)}")
    dtype = _DTYPES[args.dtype]
    try:
        err = checks.loss_gradient_error(name, dtype)
    except FloatingPointError as exc:
        raise NumericalFailure(str(exc))
    limit = checks.THRESHOLDS[dtype]
    print(f"{name},{dtype},{err:.3e},{limit:.0e}")
    if not err <= limit:
        raise NumericalFailure(f"max relative error {err:.3e} exceeds {limit:.0e}")
    return OK


# ---------------------------------------------------------------------------
# spec


def spectrogram_csv(samples: np.ndarray, sr: int, n_fft: int, hop: int) -> str:
    db = dsp.magnitude_db(samples, n_fft=n_fft, hop=hop)
    F, K = db.shape
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["freq_hz/time_s"] + [f"{k * hop / sr:.6f}" for k in range(K)])
    for f in range(F):
        w.writerow([f"{f * sr / n_fft:.3f}"] + [f"{v:.3f}" for v in db[f]])
    return buf.getvalue()


def cmd_spec(args) -> int:
    if args.n_fft < 2 or args.n_fft & (args.n_fft - 1):
        raise UsageError(f"--n-fft must be a power of two, got {args.n_fft}")
    hop = args.n_fft // 2 if args.hop is None else args.hop
    if hop < 1:
        raise UsageError(f"--hop must be positive, got {hop}")
    try:
        clip = read_wav(args.inp)
    except (OSError, WavFormatError, WavParseError) as exc:
        raise DataError(f"{args.inp}: {exc}")
    text = spectrogram_csv(clip.samples, clip.sample_rate, args.n_fft, hop)
    try:
        _write_text(args.out, text)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}")
    return OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdtcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mix", help="synthesize a corpus and manifest")
    p.add_argument("--spec", required=True, help="corpus spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train a system")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", required=True, help="preset name or config JSON path")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--clip", type=float, default=5.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a WAV file or a directory of them")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="per-SNR mean SI-SNR of a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    p.add_argument("--variant", required=True)
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="f64")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("spec", help="dump a log-magnitude spectrogram as CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-fft", type=int, default=512)
    p.add_argument("--hop", type=int)
    p.set_defaults(func=cmd_spec)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return USAGE
    except DataError as exc:
        _err(str(exc))
        return DATA
    except NumericalFailure as exc:
        _err(str(exc))
        return NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
