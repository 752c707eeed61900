"""Mono 16-bit PCM WAV reading and writing."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

SUPPORTED_RATES = (8000, 16000)


class WavFormatError(ValueError):
    """The file is a valid RIFF/WAVE but not mono 16-bit PCM."""


class WavParseError(ValueError):
    """The file is not a well-formed RIFF/WAVE container."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"AudioClip needs a nonempty 1-D signal, got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def wav_header(n_samples: int, sample_rate: int) -> bytes:
    """Canonical 44-byte header for mono 16-bit PCM."""
    data_bytes = 2 * n_samples
    return struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + data_bytes, b"WAVE",
        b"fmt ", 16, 1, 1, sample_rate, 2 * sample_rate, 2, 16,
        b"data", data_bytes,
    )


def quantize(samples) -> np.ndarray:
    # same scale as read_wav so the roundtrip error stays within one step
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")


def atomic_write(path, payload: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        # mkstemp creates 0600; give the file ordinary umask permissions
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_wav(path, clip: AudioClip) -> None:
    if not np.isfinite(clip.samples).all():
        raise ValueError("write_wav: samples must be finite")
    pcm = quantize(clip.samples)
    payload = wav_header(pcm.size, clip.sample_rate) + pcm.tobytes()
    atomic_write(path, payload)


def read_wav(path) -> AudioClip:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise WavParseError(f"{path}: truncated RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", raw, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavParseError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavParseError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavParseError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavParseError(f"{path}: missing data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1:
        raise WavFormatError(f"{path}: unsupported format tag={tag} (need PCM=1)")
    if channels != 1:
        raise WavFormatError(f"{path}: unsupported channels={channels} (need mono)")
    if bits != 16:
        raise WavFormatError(f"{path}: unsupported bits_per_sample={bits} (need 16)")
    if len(data) % 2:
        raise WavParseError(f"{path}: data chunk has odd byte count")
    pcm = np.frombuffer(data, dtype="<i2")
    if pcm.size == 0:
        raise WavParseError(f"{path}: empty data chunk")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def read_fmt_fields(path) -> tuple:
    """(format tag, channels, rate, byte rate, block align, bits) of a WAV file."""
    with open(path, "rb") as f:
        raw = f.read(44)
    return struct.unpack_from("<HHIIHH", raw, 20)
