"""Synthetic speech-like and noise signals, and SNR-calibrated corpora.

Clean signals are harmonic tones with a syllable-rate envelope; noises come
in four kinds so that some can be held out of training ("unseen").
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .audio_io import SUPPORTED_RATES, AudioClip, read_wav, write_wav
from .metrics import mix_components
from .numerics import ParameterError

CLEAN_KINDS = ("harmonic_am", "chirp_formant")
NOISE_KINDS = ("white", "pink", "babble_like", "tonal_interf")
SPLITS = ("train", "valid", "test_seen", "test_unseen")
MANIFEST_FIELDS = ("clean_path", "noise_path", "mixture_path", "snr_db", "split")
PEAK = 0.5
MIX_HEADROOM = 0.9


class ConfigurationError(ValueError):
    """Corpus settings are inconsistent."""


class ManifestError(ValueError):
    """A manifest line cannot be parsed or refers to missing files."""


def _check_synth_args(dur_s: float, sr: int) -> int:
    if not 0.25 <= dur_s <= 10.0:
        raise ParameterError(f"duration must be in [0.25, 10] s, got {dur_s}")
    if sr not in SUPPORTED_RATES:
        raise ParameterError(f"sample rate must be one of {SUPPORTED_RATES}, got {sr}")
    return int(round(dur_s * sr))


def _peak_normalize(x: np.ndarray, peak: float = PEAK) -> np.ndarray:
    return x * (peak / np.max(np.abs(x)))


def _syllable_envelope(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    rate = rng.uniform(2.0, 6.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * rate * t + phase))


def harmonic_params(seed: int) -> dict:
    """Fundamental and harmonic weights drawn for a clean clip."""
    rng = np.random.default_rng([seed, 1])
    f0 = rng.uniform(100.0, 250.0)
    n_harm = int(rng.integers(3, 6))
    # weights fall off as 1/k so the fundamental always dominates
    amps = rng.uniform(0.7, 1.0, n_harm) / np.arange(1, n_harm + 1)
    amps[0] = 1.0
    phases = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    return {"f0": f0, "amps": amps, "phases": phases, "rng": rng}


def synth_clean(kind: str, dur_s: float, sr: int, seed: int) -> AudioClip:
    n = _check_synth_args(dur_s, sr)
    if kind not in CLEAN_KINDS:
        raise ParameterError(f"unknown clean kind {kind!r}; expected one of {CLEAN_KINDS}")
    p = harmonic_params(seed)
    rng = p["rng"]
    t = np.arange(n) / sr
    f0 = p["f0"]
    if kind == "harmonic_am":
        inst = np.full(n, f0)
        weights = p["amps"]
    else:
        # gliding pitch with a formant-shaped harmonic envelope
        glide = rng.uniform(-0.15, 0.15)
        inst = f0 * (1.0 + glide * t / t[-1])
        formant = rng.uniform(300.0, 900.0)
        k = np.arange(1, p["amps"].size + 1)
        boost = 0.5 + 0.5 * np.exp(-0.5 * ((k * f0 - formant) / 200.0) ** 2)
        weights = p["amps"] * boost
        weights[0] = max(weights[0], weights[1:].max() * 1.25) if weights.size > 1 else weights[0]
    phase0 = 2.0 * np.pi * np.cumsum(inst) / sr
    x = np.zeros(n)
    for k, (a, ph) in enumerate(zip(weights, p["phases"]), start=1):
        x += a * np.sin(k * phase0 + ph)
    x *= _syllable_envelope(rng, t)
    return AudioClip(_peak_normalize(x), sr)


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size)
    shape = np.zeros(spec.size)
    shape[1:] = 1.0 / np.sqrt(f[1:])
    return np.fft.irfft(spec * shape, n=n)


def synth_noise(kind: str, dur_s: float, sr: int, seed: int) -> AudioClip:
    n = _check_synth_args(dur_s, sr)
    rng = np.random.default_rng([seed, 2])
    t = np.arange(n) / sr
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        x = _pink(rng, n)
    elif kind == "babble_like":
        x = np.zeros(n)
        for _ in range(6):
            f0 = rng.uniform(90.0, 300.0)
            phase = 2.0 * np.pi * f0 * t
            voice = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 6))
            x += voice * _syllable_envelope(rng, t)
    elif kind == "tonal_interf":
        x = np.zeros(n)
        for _ in range(3):
            f = rng.uniform(300.0, 0.4 * sr)
            gate_rate = rng.uniform(1.0, 4.0)
            gate = 0.5 * (1.0 + np.sign(np.sin(2 * np.pi * gate_rate * t + rng.uniform(0, 2 * np.pi))))
            x += gate * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        x += 0.05 * rng.standard_normal(n)
    else:
        raise ParameterError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    return AudioClip(_peak_normalize(x), sr)


# ---------------------------------------------------------------------------
# corpus


@dataclass
class CorpusSpec:
    out_dir: str = "corpus"
    n_train: int = 200
    n_valid: int = 20
    n_test: int = 30  # clean clips per SNR in each test split
    snr_grid: List[float] = field(default_factory=lambda: [-5.0, 5.0, 15.0])
    train_snr: float = 5.0
    seen_kinds: List[str] = field(default_factory=lambda: ["white", "babble_like"])
    unseen_kinds: List[str] = field(default_factory=lambda: ["pink", "tonal_interf"])
    clean_kinds: List[str] = field(default_factory=lambda: list(CLEAN_KINDS))
    sr: int = 8000
    dur_s: float = 1.0
    noise_dur_s: float = 1.5
    seed: int = 0

    def validate(self) -> "CorpusSpec":
        overlap = set(self.seen_kinds) & set(self.unseen_kinds)
        if overlap:
            raise ConfigurationError(f"seen and unseen noise kinds overlap: {sorted(overlap)}")
        for k in list(self.seen_kinds) + list(self.unseen_kinds):
            if k not in NOISE_KINDS:
                raise ConfigurationError(f"unknown noise kind {k!r}")
        for k in self.clean_kinds:
            if k not in CLEAN_KINDS:
                raise ConfigurationError(f"unknown clean kind {k!r}")
        if not self.seen_kinds:
            raise ConfigurationError("at least one seen noise kind is required")
        if self.unseen_kinds == [] and self.n_test > 0:
            raise ConfigurationError("unseen test split needs at least one unseen noise kind")
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise ConfigurationError("clip counts must be non-negative")
        if self.noise_dur_s < self.dur_s:
            raise ConfigurationError("noise_dur_s must be at least dur_s")
        _check_synth_args(self.dur_s, self.sr)
        _check_synth_args(self.noise_dur_s, self.sr)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown corpus spec fields {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class MixtureRecord:
    clean_path: str
    noise_path: str
    mixture_path: str
    snr_db: float
    split: str

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_FIELDS})

    @property
    def noise_kind(self) -> str:
        return Path(self.noise_path).parent.name


@dataclass
class MixtureManifest:
    records: List[MixtureRecord]
    root: str = "."
    sample_rate: Optional[int] = None

    def resolve(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def split(self, name: str) -> List[MixtureRecord]:
        return [r for r in self.records if r.split == name]

    def splits(self) -> List[str]:
        return [s for s in SPLITS if any(r.split == s for r in self.records)]

    def __len__(self) -> int:
        return len(self.records)


def _snr_tag(snr: float) -> str:
    return f"{'m' if snr < 0 else 'p'}{abs(snr):g}"


def _plan(spec: CorpusSpec) -> List[dict]:
    """Deterministic list of records to synthesize."""
    plan = []
    rng = np.random.default_rng([spec.seed, 0])
    clean_id = 0

    def next_clean():
        nonlocal clean_id
        kind = spec.clean_kinds[clean_id % len(spec.clean_kinds)]
        item = (kind, int(rng.integers(0, 2**31 - 1)), clean_id)
        clean_id += 1
        return item

    def add(split, idx, clean, snr, kinds):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        plan.append({
            "split": split, "idx": idx, "clean": clean, "snr": float(snr), "noise_kind": kind,
            "noise_seed": int(rng.integers(0, 2**31 - 1)), "mix_seed": int(rng.integers(0, 2**31 - 1)),
        })

    for split, count in (("train", spec.n_train), ("valid", spec.n_valid)):
        for i in range(count):
            add(split, i, next_clean(), spec.train_snr, spec.seen_kinds)
    for split, kinds in (("test_seen", spec.seen_kinds), ("test_unseen", spec.unseen_kinds)):
        for i in range(spec.n_test):
            clean = next_clean()
            for snr in spec.snr_grid:
                add(split, i, clean, snr, kinds)
    return plan


def _render(spec: CorpusSpec, item: dict):
    ckind, cseed, cid = item["clean"]
    clean = synth_clean(ckind, spec.dur_s, spec.sr, cseed).samples
    noise = synth_noise(item["noise_kind"], spec.noise_dur_s, spec.sr, item["noise_seed"]).samples
    mixture, _, scaled = mix_components(clean, noise, item["snr"], item["mix_seed"])
    peak = max(np.abs(mixture).max(), np.abs(clean).max(), np.abs(scaled).max())
    # one common factor keeps the SNR and avoids clipping on write
    scale = min(1.0, MIX_HEADROOM / peak)
    return clean * scale, scaled * scale, mixture * scale


def build_corpus(spec: CorpusSpec) -> MixtureManifest:
    """Synthesize every clip, write WAVs and ``manifest.jsonl`` under ``out_dir``.

    Output is assembled in a temporary sibling directory and moved into
    place only after everything was written.
    """
    spec.validate()
    out = Path(spec.out_dir)
    parent = out.parent if str(out.parent) else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=parent))
    try:
        records = []
        for item in _plan(spec):
            split, idx, snr = item["split"], item["idx"], item["snr"]
            stem = f"{split}_{idx:04d}"
            clean_rel = f"clean/{split}/{stem}_{_snr_tag(snr)}.wav"
            noise_rel = f"noise/{item['noise_kind']}/{stem}_{_snr_tag(snr)}.wav"
            mix_rel = f"mixture/{split}/{stem}_{_snr_tag(snr)}.wav"
            clean, noise, mixture = _render(spec, item)
            for rel, sig in ((clean_rel, clean), (noise_rel, noise), (mix_rel, mixture)):
                (tmp / rel).parent.mkdir(parents=True, exist_ok=True)
                write_wav(tmp / rel, AudioClip(sig, spec.sr))
            records.append(MixtureRecord(clean_rel, noise_rel, mix_rel, snr, split))
        manifest = MixtureManifest(records, str(out), spec.sr)
        write_manifest(tmp / "manifest.jsonl", records)
        with open(tmp / "corpus_spec.json", "w") as f:
            json.dump(asdict(spec), f, indent=2, sort_keys=True)
        _install(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def _install(tmp: Path, out: Path) -> None:
    if not out.exists():
        os.replace(tmp, out)
        return
    for entry in sorted(tmp.iterdir()):
        dest = out / entry.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        os.replace(entry, dest)
    tmp.rmdir()


def write_manifest(path, records: Iterable[MixtureRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def load_manifest(path, strict: bool = True) -> MixtureManifest:
    """Parse a JSONL manifest; with ``strict`` every referenced file must exist."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(d, dict) or set(d) != set(MANIFEST_FIELDS):
                raise ManifestError(f"{path}:{lineno}: expected fields {list(MANIFEST_FIELDS)}")
            if d["split"] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {d['split']!r}")
            try:
                rec = MixtureRecord(str(d["clean_path"]), str(d["noise_path"]), str(d["mixture_path"]),
                                    float(d["snr_db"]), d["split"])
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    manifest = MixtureManifest(records, root)
    if strict:
        for rec in records:
            for rel in (rec.clean_path, rec.noise_path, rec.mixture_path):
                full = manifest.resolve(rel)
                if not os.path.exists(full):
                    raise ManifestError(f"{path}: referenced file not found: {full}")
    if records:
        first = manifest.resolve(records[0].mixture_path)
        if os.path.exists(first):
            manifest.sample_rate = read_wav(first).sample_rate
    return manifest


def load_pairs(manifest: MixtureManifest, records: Sequence[MixtureRecord]):
    """(mixture, clean) sample arrays for each record, read in order."""
    pairs = []
    for rec in records:
        mix = read_wav(manifest.resolve(rec.mixture_path))
        clean = read_wav(manifest.resolve(rec.clean_path))
        pairs.append((mix.samples, clean.samples))
    return pairs


def summarize(manifest: MixtureManifest) -> Dict[str, Dict[float, int]]:
    """Record counts per split and SNR."""
    out: Dict[str, Dict[float, int]] = {}
    for r in manifest.records:
        out.setdefault(r.split, {}).setdefault(r.snr_db, 0)
        out[r.split][r.snr_db] += 1
    return out
