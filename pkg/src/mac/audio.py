"""Audio ingestion: RIFF/WAVE decoding, mel front-end, CNN patch encoder.

The decode path is waveform -> 128-bin log-mel -> strided patch encoder,
producing a (time x frequency x channels) token grid. Precomputed grids can
also be loaded from the tensor container, bypassing the signal path, so
externally dumped encoder features slot straight into the connector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as tz
from .tensor import ContractError, ShapeError, Tensor

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
MEL_BINS = 128
STFT_WIN = 400
STFT_HOP = 160
STFT_NFFT = 512
LOG_FLOOR = 1e-6


class WavFormatError(ValueError):
    """Broken or unsupported RIFF payload; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def read_wav_bytes(blob: bytes) -> tuple[np.ndarray, int]:
    """Parse PCM16 RIFF bytes -> (float waveform in [-1, 1], sample rate).

    Stereo is averaged to mono. Unknown chunks are skipped, honoring the
    RIFF odd-size pad byte.
    """
    if len(blob) < 12:
        raise WavFormatError("file shorter than a RIFF header", 0)
    if blob[0:4] != b"RIFF":
        raise WavFormatError("missing RIFF magic", 0)
    if blob[8:12] != b"WAVE":
        raise WavFormatError("missing WAVE form type", 8)

    pos = 12
    fmt = None
    data = None
    data_offset = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = pos + 8
        if body + size > len(blob):
            raise WavFormatError(f"chunk {cid!r} truncated", pos)
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk shorter than 16 bytes", pos)
            audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", blob, body)
            if audio_format != 1:
                raise WavFormatError(f"unsupported codec tag {audio_format} (PCM only)", body)
            if bits != 16:
                raise WavFormatError(f"unsupported bit depth {bits} (16-bit only)", body + 14)
            if channels not in (1, 2):
                raise WavFormatError(f"unsupported channel count {channels}", body + 2)
            fmt = (channels, rate)
        elif cid == b"data":
            if fmt is None:
                raise WavFormatError("data chunk before fmt chunk", pos)
            data = blob[body : body + size]
            data_offset = body
        pos = body + size + (size & 1)  # odd chunk sizes are padded

    if fmt is None:
        raise WavFormatError("no fmt chunk found", len(blob))
    if data is None:
        raise WavFormatError("no data chunk found", len(blob))

    channels, rate = fmt
    usable = len(data) - (len(data) % (2 * channels))
    if usable <= 0:
        raise WavFormatError("empty data chunk", data_offset)
    samples = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return samples, rate


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return samples
    n_out = int(round(len(samples) * dst_rate / src_rate))
    src_pos = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(src_pos, np.arange(len(samples)), samples)


def fit_length(samples: np.ndarray, n: int) -> np.ndarray:
    """Crop or zero-pad the tail so exactly n samples remain."""
    if len(samples) >= n:
        return samples[:n]
    out = np.zeros(n, dtype=samples.dtype)
    out[: len(samples)] = samples
    return out


def load_wav(path: str, clip_seconds: float = CLIP_SECONDS) -> Tensor:
    """Decode, resample to 16 kHz, and crop/pad to the clip length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    samples, rate = read_wav_bytes(blob)
    samples = resample_linear(samples, rate, SAMPLE_RATE)
    return Tensor(fit_length(samples, int(round(clip_seconds * SAMPLE_RATE))))


def write_wav(path: str, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write mono PCM16; the synthetic-corpus generator and tests use this."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16))
        fh.write(b"data" + struct.pack("<I", len(pcm)) + pcm)
        if len(pcm) & 1:
            fh.write(b"\x00")


# -- mel front-end -----------------------------------------------------------


@dataclass
class MelSpec:
    frames: np.ndarray  # [T_mel, MEL_BINS], log power
    sample_rate: int = SAMPLE_RATE
    hop: int = STFT_HOP
    win: int = STFT_WIN

    def pad_to(self, n_frames: int) -> "MelSpec":
        """Crop or extend with the log floor so exactly n_frames remain."""
        t = self.frames.shape[0]
        if t >= n_frames:
            frames = self.frames[:n_frames]
        else:
            frames = np.full((n_frames, self.frames.shape[1]), np.log(LOG_FLOOR),
                             dtype=self.frames.dtype)
            frames[:t] = self.frames
        return MelSpec(frames, self.sample_rate, self.hop, self.win)


def hertz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hertz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = MEL_BINS, n_fft: int = STFT_NFFT,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on a uniform mel grid -> [n_mels, n_fft//2 + 1]."""
    edges = mel_to_hertz(np.linspace(0.0, hertz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    bank = np.zeros((n_mels, freqs.size))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / max(center - lo, 1e-9)
        falling = (hi - freqs) / max(hi - center, 1e-9)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def melspectrogram(waveform, sample_rate: int = SAMPLE_RATE) -> MelSpec:
    """STFT (win=400, hop=160, Hann) -> 128 mel bins -> log(x + 1e-6)."""
    samples = waveform.data if isinstance(waveform, Tensor) else np.asarray(waveform)
    samples = samples.astype(np.float64)
    if samples.size == 0:
        raise ContractError("melspectrogram of empty waveform")
    if sample_rate != SAMPLE_RATE:
        raise ContractError(f"expected {SAMPLE_RATE} Hz input, got {sample_rate}")
    if samples.size < STFT_WIN:
        samples = fit_length(samples, STFT_WIN)

    n_frames = 1 + (samples.size - STFT_WIN) // STFT_HOP
    idx = np.arange(STFT_WIN)[None, :] + STFT_HOP * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(STFT_WIN) / STFT_WIN)
    frames = samples[idx] * window
    spec = np.abs(np.fft.rfft(frames, n=STFT_NFFT, axis=1)) ** 2
    mel = spec @ mel_filterbank().T
    return MelSpec(np.log(mel + LOG_FLOOR))


# -- CNN patch encoder --------------------------------------------------------


@dataclass
class EncoderConfig:
    """Strided (non-overlapping) patch conv stack over the mel image.

    patches[i] = (time stride, freq stride) of layer i; channels lists the
    hidden widths, and the final layer projects to d_enc. The grid geometry
    is mel (mel_frames x mel_bins) reduced by the stride products.
    """

    d_enc: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    patches: tuple[tuple[int, int], ...] = ((8, 4), (4, 2), (2, 2), (1, 1))
    mel_frames: int = 1024
    mel_bins: int = MEL_BINS

    def __post_init__(self):
        if len(self.patches) != len(self.channels) + 1:
            raise ShapeError(
                f"need {len(self.channels) + 1} patch sizes for "
                f"{len(self.channels)} hidden layers, got {len(self.patches)}"
            )

    @property
    def grid_t(self) -> int:
        t = self.mel_frames
        for pt, _ in self.patches:
            t //= pt
        return t

    @property
    def grid_f(self) -> int:
        f = self.mel_bins
        for _, pf in self.patches:
            f //= pf
        return f


def paper_geometry_config() -> EncoderConfig:
    """64 x 8 grid of 768-dim tokens (the reference front-end geometry)."""
    return EncoderConfig(d_enc=768, channels=(16, 32, 64),
                         patches=((2, 2), (2, 2), (2, 2), (2, 2)))


@dataclass
class AudioTokenGrid:
    """Encoder output as (time x frequency x channels) before flattening.

    Flattening order is fixed and time-major: token index = t * grid_f + f.
    """

    tokens: Tensor

    @property
    def grid_t(self) -> int:
        return self.tokens.shape[0]

    @property
    def grid_f(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def flat(self) -> Tensor:
        return tz.reshape(self.tokens, (self.grid_t * self.grid_f, self.dim))


class CnnEncoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        widths = list(cfg.channels) + [cfg.d_enc]
        self.layers: list[tuple[Tensor, Tensor]] = []
        c_in = 1
        for (pt, pf), c_out in zip(cfg.patches, widths):
            fan_in = pt * pf * c_in
            w = Tensor(rng.standard_normal((fan_in, c_out)) / np.sqrt(fan_in))
            b = tz.zeros((c_out,))
            self.layers.append((w, b))
            c_in = c_out

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"layers.{i}.weight"] = w
            out[f"layers.{i}.bias"] = b
        return out


def encode(mel: MelSpec, encoder: CnnEncoder, frozen: bool = False) -> AudioTokenGrid:
    """Run the patch stack over a mel image -> AudioTokenGrid.

    ``frozen`` evaluates off the tape, so no gradient can reach encoder
    weights (the encoder-frozen training ablation).
    """
    if frozen:
        with tz.no_grad():
            return _encode_impl(mel, encoder)
    return _encode_impl(mel, encoder)


def _encode_impl(mel: MelSpec, encoder: CnnEncoder) -> AudioTokenGrid:
    t, f = mel.frames.shape
    x = tz.reshape(Tensor(mel.frames), (t, f, 1))
    for i, ((pt, pf), (w, b)) in enumerate(zip(encoder.cfg.patches, encoder.layers)):
        t, f, c = x.shape
        if t % pt or f % pf:
            raise ShapeError(
                f"encoder layer {i}: input {t}x{f} not divisible by patch {pt}x{pf}"
            )
        x = tz.reshape(x, (t // pt, pt, f // pf, pf, c))
        x = tz.transpose(x, (0, 2, 1, 3, 4))
        x = tz.reshape(x, (t // pt * (f // pf), pt * pf * c))
        x = tz.add(tz.matmul(x, w), b)
        if i < len(encoder.layers) - 1:
            x = tz.relu(x)
        x = tz.reshape(x, (t // pt, f // pf, w.shape[1]))
    return AudioTokenGrid(x)


# -- precomputed feature grids ------------------------------------------------

_FEATURE_KEYS = ("grid_t", "grid_f", "dim")


def save_features(path: str, grid: AudioTokenGrid) -> None:
    checkpoint.save(
        path,
        {"tokens": grid.tokens.data},
        meta={"grid_t": str(grid.grid_t), "grid_f": str(grid.grid_f), "dim": str(grid.dim)},
    )


def load_features(path: str) -> AudioTokenGrid:
    tensors, _, meta = checkpoint.load(path)
    for key in _FEATURE_KEYS:
        if key not in meta:
            raise checkpoint.CheckpointError(f"feature file missing metadata key {key!r}")
    if "tokens" not in tensors:
        raise checkpoint.CheckpointError("feature file missing 'tokens' tensor")
    shape = (int(meta["grid_t"]), int(meta["grid_f"]), int(meta["dim"]))
    tokens = tensors["tokens"]
    if tokens.shape != shape:
        raise checkpoint.CheckpointError(
            f"feature tensor shape {tokens.shape} does not match metadata {shape}"
        )
    return AudioTokenGrid(Tensor(tokens))
