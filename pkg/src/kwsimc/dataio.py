"""Dataset loading, 8-bit conversion, augmentation and splits.

Only 16-bit mono PCM WAV at 16 kHz is accepted. ``make_fixtures`` writes a
synthetic stand-in for both the speech-commands tree and the personal set
(the real personal recordings are private).
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fixedpoint import AUDIO_FMT, quantize_raw
from .model.arch import KEYWORDS
from .tensorcore import QTensor

SAMPLE_RATE = 16000
CLIP_SAMPLES = SAMPLE_RATE
MIN_SECONDS, MAX_SECONDS = 0.5, 1.5


class DataError(ValueError):
    pass


class MissingKeywordDir(DataError):
    pass


class MalformedWav(DataError):
    pass


class InsufficientUtterances(DataError):
    pass


@dataclass
class Utterance:
    samples: np.ndarray          # int16 PCM, exactly one second after loading
    rate: int
    label: int
    speaker: str
    path: str = ""
    digest: str = ""

    def as_float(self) -> np.ndarray:
        return self.samples.astype(np.float64) / 32768.0


@dataclass
class Dataset:
    utterances: list[Utterance]
    keywords: tuple[str, ...]
    split: dict[str, list[int]] = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def subset(self, name: str) -> "Dataset":
        idx = self.split[name]
        return Dataset([self.utterances[i] for i in idx], self.keywords, {"all": list(range(len(idx)))})

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)

    def audio(self) -> np.ndarray:
        return np.stack([u.as_float() for u in self.utterances]) if self.utterances else np.zeros((0, CLIP_SAMPLES))

    def audio_8bit(self) -> np.ndarray:
        return quantize_clips(self.audio())

    def manifest(self) -> list[dict]:
        split_of = {i: name for name, idx in self.split.items() for i in idx}
        return [{"path": u.path, "label": self.keywords[u.label], "speaker": u.speaker,
                 "split": split_of.get(i, ""), "sha256": u.digest}
                for i, u in enumerate(self.utterances)]

    def manifest_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode()).hexdigest()


# -- WAV --------------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int, str]:
    """Validated 16-bit mono PCM read; returns (samples, rate, sha256)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 44 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise MalformedWav(f"{path}: compressed WAV not supported")
            if w.getsampwidth() != 2 or w.getnchannels() != 1:
                raise MalformedWav(f"{path}: need 16-bit mono PCM, got {8 * w.getsampwidth()}-bit "
                                   f"x{w.getnchannels()}")
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise MalformedWav(f"{path}: {e}") from e
    if rate != SAMPLE_RATE:
        raise MalformedWav(f"{path}: sample rate {rate} Hz, only {SAMPLE_RATE} Hz is supported")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.int16)
    return samples, rate, hashlib.sha256(blob).hexdigest()


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def fit_length(samples: np.ndarray, n: int = CLIP_SAMPLES) -> np.ndarray:
    out = np.zeros(n, dtype=samples.dtype)
    out[:min(n, len(samples))] = samples[:n]
    return out


def load_utterance(path, label: int, speaker: str, root=None) -> Utterance:
    samples, rate, digest = read_wav(path)
    dur = len(samples) / rate
    if not MIN_SECONDS <= dur <= MAX_SECONDS:
        raise MalformedWav(f"{path}: duration {dur:.3f}s outside [{MIN_SECONDS}, {MAX_SECONDS}]")
    rel = str(Path(path).relative_to(root)) if root else str(path)
    return Utterance(fit_length(samples), rate, label, speaker, rel, digest)


# -- datasets ---------------------------------------------------------------

def _read_list(path: Path) -> set[str]:
    return {line.strip() for line in path.read_text().splitlines() if line.strip()} if path.exists() else set()


def load_gscd(root, keywords=KEYWORDS, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Speech-commands style tree ``root/<keyword>/*.wav``.

    Uses ``testing_list.txt`` when present, otherwise a seeded split.
    Speaker id is the filename prefix before ``_nohash_`` (or the stem).
    """
    root = Path(root)
    utts = []
    for label, kw in enumerate(keywords):
        d = root / kw
        files = sorted(d.glob("*.wav")) if d.is_dir() else []
        if not files:
            raise MissingKeywordDir(f"keyword directory {d} is missing or empty ({kw!r})")
        for f in files:
            speaker = f.stem.split("_nohash_")[0]
            utts.append(load_utterance(f, label, speaker, root))
    testing = _read_list(root / "testing_list.txt")
    if testing:
        test = [i for i, u in enumerate(utts) if u.path in testing]
    else:
        rng = np.random.default_rng([seed, 0x6A5C])
        perm = rng.permutation(len(utts))
        test = sorted(perm[:int(round(test_fraction * len(utts)))].tolist())
    test_set = set(test)
    train = [i for i in range(len(utts)) if i not in test_set]
    return Dataset(utts, tuple(keywords), {"train": train, "test": test})


def build_personal_split(root, keywords=KEYWORDS, per_keyword_train: int = 3, people: int = 3,
                         seed: int = 0, speakers=None) -> Dataset:
    """``root/<speaker>/<keyword>/*.wav``; ``per_keyword_train`` clips per cell go to train."""
    root = Path(root)
    found = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    speakers = list(speakers) if speakers is not None else found
    problems = []
    if len(speakers) < people:
        problems.append(f"found {len(speakers)} speakers {speakers}, need {people}")
    speakers = speakers[:people]
    utts, train, test = [], [], []
    for spk in speakers:
        for label, kw in enumerate(keywords):
            d = root / spk / kw
            files = sorted(d.glob("*.wav")) if d.is_dir() else []
            if len(files) < per_keyword_train + 1:
                problems.append(f"{spk}/{kw}: {len(files)} files, need {per_keyword_train + 1}")
                continue
            rng = np.random.default_rng([seed, 0x9E25, len(utts)])
            chosen = set(rng.choice(len(files), per_keyword_train, replace=False).tolist())
            for j, f in enumerate(files):
                (train if j in chosen else test).append(len(utts))
                utts.append(load_utterance(f, label, spk, root))
    if problems:
        raise InsufficientUtterances("; ".join(problems))
    return Dataset(utts, tuple(keywords), {"train": train, "test": test})


def write_manifest(ds: Dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("path\tlabel\tspeaker\tsplit\tsha256\n")
        for r in ds.manifest():
            fh.write(f"{r['path']}\t{r['label']}\t{r['speaker']}\t{r['split']}\t{r['sha256']}\n")


# -- 8-bit conversion and augmentation ----------------------------------------

def to_8bit(u: Utterance | np.ndarray) -> tuple[QTensor, bool]:
    """Peak-normalise and quantize to the 8-bit input format.

    Returns ``(tensor, silent)``; ``silent`` flags an all-zero clip.
    """
    x = u.as_float() if isinstance(u, Utterance) else np.asarray(u, dtype=np.float64)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak == 0.0:
        return QTensor(np.zeros(x.shape, np.int64), AUDIO_FMT), True
    raw, _ = quantize_raw(x / peak, AUDIO_FMT)
    return QTensor(raw, AUDIO_FMT), False


def quantize_clips(clips: np.ndarray) -> np.ndarray:
    """Batch :func:`to_8bit` returning int64 mantissas (N, L)."""
    clips = np.asarray(clips, dtype=np.float64)
    peak = np.max(np.abs(clips), axis=-1, keepdims=True)
    scaled = np.divide(clips, peak, out=np.zeros_like(clips), where=peak > 0)
    return quantize_raw(scaled, AUDIO_FMT)[0]


@dataclass(frozen=True)
class AugmentConfig:
    noise_min: float = 0.001
    noise_max: float = 0.015
    shift_seconds: float = 0.5


def augment(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
            sigma: float | None = None, shift: int | None = None) -> np.ndarray:
    """Add Gaussian noise and shift with zero fill. Same length, same label.

    ``sigma``/``shift`` override the random draws (used by tests).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if sigma is None:
        sigma = rng.uniform(cfg.noise_min, cfg.noise_max)
    if shift is None:
        max_shift = int(round(cfg.shift_seconds * SAMPLE_RATE))
        shift = int(rng.integers(-max_shift, max_shift + 1))
    out = np.zeros_like(x)
    if shift >= 0:
        out[shift:] = x[:n - shift]
    else:
        out[:n + shift] = x[-shift:]
    if sigma:
        out = out + rng.normal(0.0, sigma, size=n)
    return out


# -- synthetic fixtures -------------------------------------------------------

def _keyword_recipe(label: int) -> tuple[float, float, float]:
    """(start Hz, end Hz, tremolo Hz) of the pseudo-keyword's chirp."""
    rng = np.random.default_rng([0x4B57, label])
    f0 = 900.0 + 500.0 * label + rng.uniform(-80, 80)
    f1 = f0 * (1.6 if label % 2 else 0.6)
    trem = 4.0 + 3.0 * (label % 3)
    return f0, f1, trem


def synth_utterance(label: int, rng: np.random.Generator, pitch: float = 1.0,
                    seconds: float | None = None) -> np.ndarray:
    """Tone-plus-noise pseudo-keyword as int16 PCM."""
    seconds = seconds if seconds is not None else rng.uniform(0.8, 1.1)
    n = int(seconds * SAMPLE_RATE)
    f0, f1, trem = _keyword_recipe(label)
    jitter = rng.uniform(0.95, 1.05) * pitch
    word = int(0.6 * SAMPLE_RATE)
    start = int(rng.integers(0, max(1, n - word)))
    t = np.arange(word) / SAMPLE_RATE
    freq = jitter * (f0 + (f1 - f0) * t / t[-1])
    phase = 2 * np.pi * np.cumsum(freq) / SAMPLE_RATE
    env = np.hanning(word) * (0.75 + 0.25 * np.sin(2 * np.pi * trem * t))
    sig = np.zeros(n)
    sig[start:start + word] = env * (np.sin(phase) + 0.4 * np.sin(2 * phase))
    sig += rng.normal(0.0, 0.02, n)
    sig *= rng.uniform(0.3, 0.9) / max(np.max(np.abs(sig)), 1e-9)
    return np.round(sig * 32767).astype(np.int16)


def make_fixtures(out, keywords=KEYWORDS[:2], per_keyword: int = 100, speakers: int = 3,
                  personal_per_cell: int = 5, seed: int = 0, personal_pitch=(0.88, 1.0, 1.12)) -> Path:
    """Write ``out/gscd/<kw>/*.wav`` and ``out/personal/<spk>/<kw>/*.wav``.

    The personal speakers are pitch-shifted so they form a shifted domain.
    """
    out = Path(out)
    rng = np.random.default_rng([seed, 0xF1C5])
    for label, kw in enumerate(keywords):
        for j in range(per_keyword):
            spk = f"spk{j % 20:02d}"
            write_wav(out / "gscd" / kw / f"{spk}_nohash_{j:04d}.wav", synth_utterance(label, rng))
    for s in range(speakers):
        pitch = personal_pitch[s % len(personal_pitch)]
        for label, kw in enumerate(keywords):
            for j in range(personal_per_cell):
                write_wav(out / "personal" / f"person{s}" / kw / f"{j:03d}.wav",
                          synth_utterance(label, rng, pitch=pitch))
    (out / "FIXTURE_README.txt").write_text(
        "Synthetic tone+noise pseudo-keywords. Stand-in data, not speech.\n")
    return out
