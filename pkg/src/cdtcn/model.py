"""Encoders, TCN mask estimator, bi-projection fusion and decoders.

Four systems share these parts:

* ``stft-tcn``    packed STFT -> TCN mask -> ISTFT
* ``conv-tasnet`` learned conv encoder -> TCN mask -> learned decoder
* ``cd-tcn``      [conv features; STFT features] -> TCN mask on the conv
  features -> learned decoder
* ``cd-tcn-bpf``  as ``cd-tcn`` with a fused feature appended to the TCN
  input: ``M * Pc(Fc) + (1 - M) * Ps(Fs)`` where
  ``M = sigmoid(Pm([Pc(Fc); Ps(Fs)]))``
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import numerics as nx
from .dsp import StftOperator, frame_t, num_frames, overlap_add_t
from .numerics import DimensionError, Parameter, ParameterError, Tensor

VARIANTS = ("stft_tcn", "conv_tasnet", "cd_tcn", "cd_tcn_bpf")
PRESET_NAMES = ("stft-tcn", "conv-tasnet", "cd-tcn", "cd-tcn-bpf")


class ConfigError(ValueError):
    """A system configuration violates its invariants."""


class AlignmentError(DimensionError):
    """Time and frequency branches disagree on the number of frames."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TcnConfig:
    X: int = 8
    R: int = 3
    B: int = 128
    H: int = 512
    S: int = 128
    P: int = 3
    mask_channels: int = 0  # 0: derived from the system's masked representation
    causal: bool = False
    norm: str = "gln"  # "none" only for receptive-field experiments

    def validate(self) -> None:
        for name in ("X", "R", "B", "H", "S", "P"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"tcn.{name} must be positive, got {getattr(self, name)}")
        if self.mask_channels < 0:
            raise ConfigError("tcn.mask_channels must be non-negative")
        if self.norm not in ("gln", "none"):
            raise ConfigError(f"tcn.norm must be 'gln' or 'none', got {self.norm!r}")

    def receptive_field(self) -> int:
        """Frames seen by one output frame of the whole stack."""
        per_repeat = (self.P - 1) * (2 ** self.X - 1)
        return 1 + self.R * per_repeat


@dataclass
class EncoderSpec:
    N: int
    L: int
    stride: int
    activation: str = "relu"

    def validate(self) -> None:
        if self.N < 1 or self.L < 1 or not 1 <= self.stride <= self.L:
            raise ConfigError(f"encoder needs N>=1, L>=1, 1<=stride<=L; got {self}")
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"encoder activation must be 'relu' or 'none', got {self.activation!r}")


@dataclass
class StftParams:
    n_fft: int
    win_len: int
    hop: int
    window: str = "hann"
    n_rows: Optional[int] = None  # None keeps all 2F packed rows
    center: bool = True

    def operator(self) -> StftOperator:
        return StftOperator(self.n_fft, self.win_len, self.hop, self.window, self.center, self.n_rows)

    @property
    def rows(self) -> int:
        return self.n_rows if self.n_rows is not None else 2 * (self.n_fft // 2 + 1)


@dataclass
class BpfSpec:
    dim: int

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError(f"bpf.dim must be positive, got {self.dim}")


@dataclass
class SystemConfig:
    variant: str
    tcn: TcnConfig = field(default_factory=TcnConfig)
    time_encoder: Optional[EncoderSpec] = None
    stft: Optional[StftParams] = None
    bpf: Optional[BpfSpec] = None
    sample_rate: int = 16000
    dtype: str = "float32"

    def validate(self) -> "SystemConfig":
        v = self.variant
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        self.tcn.validate()
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if v == "stft_tcn":
            if self.time_encoder is not None or self.stft is None:
                raise ConfigError("stft_tcn needs stft params and no time encoder")
        elif v == "conv_tasnet":
            if self.time_encoder is None or self.stft is not None:
                raise ConfigError("conv_tasnet needs a time encoder and no STFT branch")
        else:
            if self.time_encoder is None or self.stft is None:
                raise ConfigError(f"{v} needs both a time encoder and an STFT branch")
            enc, st = self.time_encoder, self.stft
            if st.center or st.win_len != enc.L or st.hop != enc.stride:
                raise AlignmentError(
                    f"{v}: STFT framing (win={st.win_len}, hop={st.hop}, center={st.center}) "
                    f"must match encoder framing (L={enc.L}, stride={enc.stride}, no centering)"
                )
        if (v == "cd_tcn_bpf") != (self.bpf is not None):
            raise ConfigError("bpf settings are required for cd_tcn_bpf and only for it")
        if self.time_encoder is not None:
            self.time_encoder.validate()
        if self.stft is not None:
            self.stft.operator()
        if self.bpf is not None:
            self.bpf.validate()
        expected = self.masked_channels()
        if self.tcn.mask_channels not in (0, expected):
            raise ConfigError(f"tcn.mask_channels={self.tcn.mask_channels} but masked representation has {expected}")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def masked_channels(self) -> int:
        if self.variant == "stft_tcn":
            return self.stft.rows
        return self.time_encoder.N

    def input_channels(self) -> int:
        """Width of the TCN input."""
        if self.variant == "stft_tcn":
            return self.stft.rows
        if self.variant == "conv_tasnet":
            return self.time_encoder.N
        width = self.time_encoder.N + self.stft.rows
        if self.bpf is not None:
            width += self.bpf.dim
        return width

    def min_length(self) -> int:
        return self.time_encoder.L if self.time_encoder is not None else 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        d = dict(d)
        variant = d.pop("variant").replace("-", "_")
        tcn = TcnConfig(**d.pop("tcn", {}))
        enc = d.pop("time_encoder", None)
        st = d.pop("stft", None)
        bpf = d.pop("bpf", None)
        unknown = set(d) - {"sample_rate", "dtype"}
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(
            variant=variant,
            tcn=tcn,
            time_encoder=EncoderSpec(**enc) if enc else None,
            stft=StftParams(**st) if st else None,
            bpf=BpfSpec(**bpf) if bpf else None,
            **d,
        ).validate()

    @classmethod
    def from_json(cls, text: str) -> "SystemConfig":
        return cls.from_dict(json.loads(text))


def preset(name: str) -> SystemConfig:
    """Full-size configurations of the four systems (16 kHz)."""
    key = name.replace("_", "-")
    tcn = TcnConfig(X=8, R=3, B=128, H=512, S=128, P=3)
    if key == "stft-tcn":
        cfg = SystemConfig("stft_tcn", tcn, stft=StftParams(512, 64, 32, "hann"))
    elif key == "conv-tasnet":
        cfg = SystemConfig("conv_tasnet", tcn, time_encoder=EncoderSpec(512, 16, 8))
    elif key in ("cd-tcn", "cd-tcn-bpf"):
        # 16-sample frames zero-padded to 256 points; bins 0..127 real+imag
        cfg = SystemConfig(
            key.replace("-", "_"),
            tcn,
            time_encoder=EncoderSpec(256, 16, 8),
            stft=StftParams(256, 16, 8, "hann", n_rows=256, center=False),
            bpf=BpfSpec(128) if key == "cd-tcn-bpf" else None,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}")
    return cfg.validate()


def scaled_config(name: str, N: int, B: int, H: int, S: int, X: int, R: int, P: int = 3,
                  bpf_dim: Optional[int] = None, sample_rate: int = 16000,
                  dtype: str = "float32", stft_tcn_fft: Optional[tuple] = None) -> SystemConfig:
    """A preset shrunk to the given widths.

    The frequency branch of the cross-domain systems uses an ``N``-point FFT
    so both branches have ``N`` rows.
    """
    base = preset(name)
    tcn = TcnConfig(X=X, R=R, B=B, H=H, S=S, P=P)
    cfg = replace(base, tcn=tcn, sample_rate=sample_rate, dtype=dtype)
    if base.variant == "stft_tcn":
        if stft_tcn_fft is not None:
            n_fft, win, hop = stft_tcn_fft
            cfg.stft = StftParams(n_fft, win, hop, "hann")
    else:
        cfg.time_encoder = replace(base.time_encoder, N=N)
        if base.stft is not None:
            n_fft = max(N, base.stft.win_len)
            cfg.stft = replace(base.stft, n_fft=n_fft, n_rows=N)
        if base.bpf is not None:
            cfg.bpf = BpfSpec(bpf_dim if bpf_dim is not None else B)
    return cfg.validate()


def tiny_config(name: str, sample_rate: int = 8000, dtype: str = "float32") -> SystemConfig:
    """Desk-scale training configuration (N=64, B=32, H=64, S=32, X=4, R=2)."""
    return scaled_config(name, N=64, B=32, H=64, S=32, X=4, R=2, P=3, bpf_dim=32,
                         sample_rate=sample_rate, dtype=dtype)


def gradcheck_config(name: str, dtype: str = "float64") -> SystemConfig:
    """Smallest configuration used for end-to-end gradient checks."""
    return scaled_config(name, N=8, B=4, H=8, S=4, X=2, R=1, P=3, bpf_dim=4,
                         sample_rate=8000, dtype=dtype, stft_tcn_fft=(32, 16, 8))


def load_config(name_or_path: str) -> SystemConfig:
    if name_or_path.replace("_", "-") in PRESET_NAMES:
        return preset(name_or_path)
    with open(name_or_path) as f:
        return SystemConfig.from_json(f.read())


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamSet:
    """Ordered, uniquely named parameters with seeded initialization."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.asarray(value, dtype=self.dtype))
        self._params[name] = p
        return p

    def pointwise(self, name: str, c_in: int, c_out: int):
        bound = 1.0 / math.sqrt(c_in)
        w = self.add(f"{name}.w", _uniform(self.rng, (c_out, c_in, 1), bound, self.dtype))
        b = self.add(f"{name}.b", _uniform(self.rng, (c_out,), bound, self.dtype))
        return w, b

    def prelu(self, name: str, channels: int) -> Parameter:
        return self.add(f"{name}.alpha", np.full(channels, 0.25))

    def gln(self, name: str, channels: int):
        return self.add(f"{name}.gamma", np.ones(channels)), self.add(f"{name}.beta", np.zeros(channels))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()


# ---------------------------------------------------------------------------
# building blocks


def pointwise(x: Tensor, w: Parameter, b: Parameter) -> Tensor:
    return nx.conv1d(x, w, b)


def conv_encode(x: Tensor, U: Tensor, stride: int, activation: str = "relu") -> Tensor:
    """W = act(U X) with X the L x K frame matrix of ``x``."""
    L = U.shape[1]
    if x.shape[0] < L:
        raise DimensionError(f"conv_encode: signal of {x.shape[0]} samples shorter than basis length {L}")
    W = nx.matmul(U, frame_t(x, L, stride))
    return nx.relu(W) if activation == "relu" else W


def stft_encode(x: Tensor, params: StftParams) -> Tensor:
    return params.operator().analyze(x)


def bpf_fuse(Fc: Tensor, Fs: Tensor, proj_c, proj_s, proj_m, return_gate: bool = False,
             force_gate: Optional[float] = None):
    """Bi-projection fusion of a time-domain and a frequency-domain feature.

    ``force_gate`` replaces the learned gate by a constant (ablations and
    the M=1 / M=0 limit checks); the learned gate itself never reaches
    0 or 1.
    """
    if Fc.shape[1] != Fs.shape[1]:
        raise AlignmentError(f"bpf_fuse: branches have {Fc.shape[1]} and {Fs.shape[1]} frames")
    Fc_bar = pointwise(Fc, *proj_c)
    Fs_bar = pointwise(Fs, *proj_s)
    if force_gate is None:
        gate = nx.sigmoid(pointwise(nx.concat([Fc_bar, Fs_bar], axis=0), *proj_m), open_interval=True)
    else:
        if not 0.0 <= force_gate <= 1.0:
            raise ParameterError(f"bpf_fuse: force_gate must lie in [0, 1], got {force_gate}")
        gate = Tensor(np.full(Fc_bar.shape, force_gate, dtype=Fc_bar.dtype))
    fused = nx.convex_mix(gate, Fc_bar, Fs_bar)
    if return_gate:
        return fused, gate, Fc_bar, Fs_bar
    return fused


def apply_mask(M: Tensor, W: Tensor) -> Tensor:
    if M.shape != W.shape:
        raise DimensionError(f"apply_mask: mask {M.shape} vs representation {W.shape}")
    return nx.mul(M, W)


def learned_decode(D: Tensor, V: Tensor, stride: int, length: int) -> Tensor:
    """Overlap-add of the frames V D, cropped to ``length`` samples."""
    if V.shape[1] != D.shape[0]:
        raise DimensionError(f"decode: basis {V.shape} cannot decode {D.shape[0]} channels")
    return nx.crop(overlap_add_t(nx.matmul(V, D), stride), length)


class TCN:
    """Bottleneck, R repeats of X dilated blocks with skip outputs, mask head."""

    def __init__(self, params: ParamSet, cfg: TcnConfig, c_in: int, mask_channels: int, prefix: str = "tcn"):
        self.cfg = cfg
        self.c_in = c_in
        self.mask_channels = mask_channels
        B, H, S, P = cfg.B, cfg.H, cfg.S, cfg.P
        self.bottleneck = params.pointwise(f"{prefix}.bottleneck", c_in, B)
        self.blocks = []
        n_blocks = cfg.R * cfg.X
        for r in range(cfg.R):
            for i in range(cfg.X):
                name = f"{prefix}.r{r}.b{i}"
                blk = {
                    "dilation": 2 ** i,
                    "conv_in": params.pointwise(f"{name}.conv_in", B, H),
                    "act1": params.prelu(f"{name}.act1", H),
                    "norm1": params.gln(f"{name}.norm1", H) if cfg.norm == "gln" else None,
                    "dw_w": params.add(f"{name}.dconv.w", _uniform(params.rng, (H, 1, P), 1.0 / math.sqrt(P), params.dtype)),
                    "dw_b": params.add(f"{name}.dconv.b", _uniform(params.rng, (H,), 1.0 / math.sqrt(P), params.dtype)),
                    "act2": params.prelu(f"{name}.act2", H),
                    "norm2": params.gln(f"{name}.norm2", H) if cfg.norm == "gln" else None,
                    "skip": params.pointwise(f"{name}.skip", H, S),
                    # the last block's residual output would feed nothing
                    "res": params.pointwise(f"{name}.res", H, B) if r * cfg.X + i < n_blocks - 1 else None,
                }
                self.blocks.append(blk)
        self.out_act = params.prelu(f"{prefix}.out_act", S)
        self.mask_head = params.pointwise(f"{prefix}.mask", S, mask_channels)

    def _dconv(self, y: Tensor, blk) -> Tensor:
        d, P = blk["dilation"], self.cfg.P
        if self.cfg.causal:
            K = y.shape[1]
            out = nx.conv1d(y, blk["dw_w"], blk["dw_b"], padding=(P - 1) * d, dilation=d, groups=y.shape[0])
            return nx.crop(out, K)
        return nx.conv1d(y, blk["dw_w"], blk["dw_b"], padding=(P - 1) * d // 2, dilation=d, groups=y.shape[0])

    def _norm(self, y: Tensor, norm) -> Tensor:
        return y if norm is None else nx.global_layer_norm(y, norm[0], norm[1])

    def __call__(self, W_in: Tensor) -> Tensor:
        if W_in.shape[0] != self.c_in:
            raise DimensionError(f"tcn_mask: input width {W_in.shape[0]} != expected {self.c_in}")
        h = pointwise(W_in, *self.bottleneck)
        skips = None
        for blk in self.blocks:
            y = pointwise(h, *blk["conv_in"])
            y = self._norm(nx.prelu(y, blk["act1"]), blk["norm1"])
            y = self._dconv(y, blk)
            y = self._norm(nx.prelu(y, blk["act2"]), blk["norm2"])
            s = pointwise(y, *blk["skip"])
            skips = s if skips is None else skips + s
            if blk["res"] is not None:
                h = h + pointwise(y, *blk["res"])
        out = nx.prelu(skips, self.out_act)
        return nx.sigmoid(pointwise(out, *self.mask_head), open_interval=True)


def tcn_mask(W_in: Tensor, tcn: TCN) -> Tensor:
    return tcn(W_in)


# ---------------------------------------------------------------------------
# systems


class EnhancementSystem:
    """One of the four enhancement networks with its parameters."""

    def __init__(self, cfg: SystemConfig, seed: int = 0):
        self.cfg = cfg.validate()
        self.params = ParamSet(seed, cfg.np_dtype)
        ps = self.params
        v = cfg.variant
        self.U = self.V = None
        self.stft_op = cfg.stft.operator() if cfg.stft is not None else None
        if cfg.time_encoder is not None:
            enc = cfg.time_encoder
            bound = 1.0 / math.sqrt(enc.L)
            self.U = ps.add("encoder.U", _uniform(ps.rng, (enc.N, enc.L), bound, ps.dtype))
        self.bpf = None
        if v == "cd_tcn_bpf":
            D = cfg.bpf.dim
            self.bpf = (
                ps.pointwise("bpf.proj_c", cfg.time_encoder.N, D),
                ps.pointwise("bpf.proj_s", cfg.stft.rows, D),
                ps.pointwise("bpf.proj_m", 2 * D, D),
            )
        self.tcn = TCN(ps, cfg.tcn, cfg.input_channels(), cfg.masked_channels())
        if cfg.time_encoder is not None:
            enc = cfg.time_encoder
            bound = 1.0 / math.sqrt(enc.L)
            self.V = ps.add("decoder.V", _uniform(ps.rng, (enc.L, enc.N), bound, ps.dtype))

    def parameters(self) -> List[Parameter]:
        return list(self.params)

    def named_parameters(self):
        return self.params.items()

    def _as_input(self, noisy) -> Tensor:
        if isinstance(noisy, Tensor):
            return noisy
        x = np.asarray(noisy, dtype=self.cfg.np_dtype)
        if x.ndim != 1:
            raise DimensionError(f"forward: expected 1-D samples, got shape {x.shape}")
        return Tensor(x)

    def encode(self, x: Tensor):
        """Return (TCN input, representation to be masked)."""
        cfg = self.cfg
        if cfg.variant == "stft_tcn":
            spec = self.stft_op.analyze(x)
            return spec, spec
        enc = cfg.time_encoder
        Fc = conv_encode(x, self.U, enc.stride, enc.activation)
        if cfg.variant == "conv_tasnet":
            return Fc, Fc
        Fs = self.stft_op.analyze(x)
        if Fc.shape[1] != Fs.shape[1]:
            raise AlignmentError(f"cross-domain encode: time branch has {Fc.shape[1]} frames, STFT branch {Fs.shape[1]}")
        feats = [Fc, Fs]
        if self.bpf is not None:
            feats.append(bpf_fuse(Fc, Fs, *self.bpf))
        return nx.concat(feats, axis=0), Fc

    def decode(self, D: Tensor, length: int) -> Tensor:
        if self.cfg.variant == "stft_tcn":
            return self.stft_op.synthesize(D, length)
        return learned_decode(D, self.V, self.cfg.time_encoder.stride, length)

    def mask(self, x: Tensor) -> Tensor:
        feats, _ = self.encode(x)
        return self.tcn(feats)

    def forward(self, noisy) -> Tensor:
        x = self._as_input(noisy)
        T = x.shape[0]
        if T < self.cfg.min_length():
            raise DimensionError(f"forward: input of {T} samples shorter than one frame ({self.cfg.min_length()})")
        feats, rep = self.encode(x)
        M = self.tcn(feats)
        return self.decode(apply_mask(M, rep), T)

    __call__ = forward

    def enhance(self, noisy) -> np.ndarray:
        """Inference on a numpy signal; returns float64 samples."""
        return self.forward(noisy).data.astype(np.float64)

    def n_frames(self, T: int) -> int:
        if self.cfg.variant == "stft_tcn":
            return self.stft_op.frames_for(T)
        enc = self.cfg.time_encoder
        return num_frames(T, enc.L, enc.stride)


def forward(system: EnhancementSystem, noisy) -> Tensor:
    return system.forward(noisy)


def count_parameters(system: EnhancementSystem) -> int:
    """Brute-force walk over instantiated parameters."""
    return int(sum(p.data.size for p in system.parameters()))


def param_count(cfg: SystemConfig) -> int:
    """Closed-form number of trainable scalars of a configuration."""
    cfg.validate()
    t = cfg.tcn
    c_in, m = cfg.input_channels(), cfg.masked_channels()
    B, H, S, P = t.B, t.H, t.S, t.P
    n_blocks = t.R * t.X
    norm = 4 * H if t.norm == "gln" else 0
    block = (B * H + H) + H + norm + (H * P + H) + H + (H * S + S)
    total = (c_in * B + B) + n_blocks * block + (n_blocks - 1) * (H * B + B) + S + (S * m + m)
    if cfg.time_encoder is not None:
        total += 2 * cfg.time_encoder.N * cfg.time_encoder.L
    if cfg.bpf is not None:
        D = cfg.bpf.dim
        total += (cfg.time_encoder.N * D + D) + (cfg.stft.rows * D + D) + (2 * D * D + D)
    return total
