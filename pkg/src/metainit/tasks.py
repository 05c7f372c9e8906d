"""Corpus handling: utterance records, the synthetic age-parameterized corpus,
speaker-disjoint splits, age-group tasks and manifest I/O."""

from __future__ import annotations

import dataclasses
import json
import wave
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import Waveform

AGE_GROUPS = ("K",) + tuple(f"G{g}" for g in range(1, 11))

# F1, F2, F3 (Hz) at age scale 1.0
DEFAULT_FORMANTS = (
    (270.0, 2290.0, 3010.0),
    (530.0, 1840.0, 2480.0),
    (730.0, 1090.0, 2440.0),
    (570.0, 840.0, 2410.0),
    (300.0, 870.0, 2240.0),
)
FORMANT_GAINS = (1.0, 0.5, 0.25)

MANIFEST_FIELDS = ("utt_id", "speaker_id", "age", "source", "label")


@dataclass(frozen=True, eq=False)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    age: str
    source: str
    label: int
    # not serialized: split tag, warp view and the loaded/synthesized audio
    split: str | None = None
    warp: tuple[str, float] | None = None
    waveform: Waveform | None = field(default=None, repr=False)

    def key(self) -> tuple:
        return (self.utt_id, self.speaker_id, self.age, self.source, self.label)

    def __eq__(self, other):
        return isinstance(other, UtteranceRecord) and self.key() + (self.split, self.warp) == other.key() + (
            other.split,
            other.warp,
        )

    def __hash__(self):
        return hash(self.key())

    def with_split(self, split: str) -> UtteranceRecord:
        return dataclasses.replace(self, split=split)

    def warped(self, method: str, factor: float) -> UtteranceRecord:
        """A view of this utterance under a warp; factor 1.0 returns the record itself."""
        if factor == 1.0:
            return self
        return dataclasses.replace(self, utt_id=f"{self.utt_id}~{method}{factor:g}", warp=(method, float(factor)))


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    dev: float = 0.08
    test: float = 0.22
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.dev + self.test - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")


# youngest-to-oldest formant scale; 1.4 roughly matches the vocal-tract
# length ratio between a five-year-old and a mid-teen
YOUNGEST_SCALE = 1.4


def default_age_scales(n_groups: int = 11) -> tuple[float, ...]:
    if n_groups == 1:
        return (1.0,)
    return tuple(round(float(v), 9) for v in np.linspace(YOUNGEST_SCALE, 1.0, n_groups))


@dataclass(frozen=True)
class SynthSpec:
    n_age_groups: int = 11
    speakers_per_group: int = 24
    utterances_per_speaker: int = 10
    n_classes: int = 5
    duration_s: float = 0.5
    sample_rate: int = 16000
    base_formants: tuple[tuple[float, float, float], ...] = DEFAULT_FORMANTS
    base_f0: float = 180.0
    age_scale: tuple[float, ...] | None = None
    noise_snr_db: float = 10.0
    # relative std of per-speaker and per-utterance formant/f0 jitter
    speaker_jitter: float = 0.08
    utterance_jitter: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.age_scale is None:
            object.__setattr__(self, "age_scale", default_age_scales(self.n_age_groups))
        scales = self.age_scale
        if len(scales) != self.n_age_groups:
            raise ValueError(f"need {self.n_age_groups} age scales, got {len(scales)}")
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise ValueError("age_scale must strictly decrease with grade")
        if len(self.base_formants) < self.n_classes:
            raise ValueError(f"{self.n_classes} classes but only {len(self.base_formants)} formant sets")
        nyq = self.sample_rate / 2.0
        top = max(max(f) for f in self.base_formants[: self.n_classes]) * max(scales)
        if top * (1 + 3 * (self.speaker_jitter + self.utterance_jitter)) >= nyq:
            raise ValueError(f"scaled formant {top:.0f} Hz too close to Nyquist {nyq:.0f} Hz")

    def group_name(self, g: int) -> str:
        return AGE_GROUPS[g] if self.n_age_groups <= len(AGE_GROUPS) else f"A{g}"


def synthesize_vowel(
    formants: Sequence[float],
    f0: float,
    duration_s: float,
    sample_rate: int,
    rng: np.random.Generator,
    noise_snr_db: float | None = None,
) -> np.ndarray:
    """Voiced vowel-like signal.

    Each formant is a carrier at the formant frequency, amplitude-modulated by
    a glottal-rate envelope, so its energy sits at the formant with f0-spaced
    sidebands; a weak harmonic source at multiples of f0 sits underneath.
    """
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    glottal = 1.0 + 0.6 * np.cos(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    x = np.zeros(n)
    for gain, f in zip(FORMANT_GAINS, formants):
        x += gain * glottal * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    for h in range(1, int(4000 // f0) + 1):
        x += (0.1 / h) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    if noise_snr_db is not None:
        noise_power = np.mean(x * x) / 10.0 ** (noise_snr_db / 10.0)
        x += rng.normal(0.0, np.sqrt(noise_power), n)
    return 0.25 * x / np.max(np.abs(x))


def generate_corpus(spec: SynthSpec, rng: np.random.Generator | None = None) -> list[UtteranceRecord]:
    """Synthesize every utterance of every speaker; deterministic given the rng (or spec.seed)."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    records = []
    for g in range(spec.n_age_groups):
        age = spec.group_name(g)
        scale = spec.age_scale[g]
        for s in range(spec.speakers_per_group):
            spk = f"{age}-s{s:03d}"
            spk_formant = 1.0 + spec.speaker_jitter * rng.standard_normal()
            spk_f0 = 1.0 + spec.speaker_jitter * rng.standard_normal()
            for u in range(spec.utterances_per_speaker):
                label = int(rng.integers(spec.n_classes))
                jit = 1.0 + spec.utterance_jitter * rng.standard_normal(3)
                formants = np.asarray(spec.base_formants[label]) * scale * spk_formant * jit
                f0 = spec.base_f0 * scale * spk_f0
                samples = synthesize_vowel(formants, f0, spec.duration_s, spec.sample_rate, rng, spec.noise_snr_db)
                utt = f"{spk}-u{u:02d}"
                records.append(
                    UtteranceRecord(utt, spk, age, f"synth:{utt}", label, waveform=Waveform(samples, spec.sample_rate))
                )
    return records


def split_counts(n_speakers: int, split_spec: SplitSpec = SplitSpec()) -> tuple[int, int, int]:
    """Train/dev/test speaker counts for one age group."""
    return tuple(_largest_remainder(n_speakers, (split_spec.train, split_spec.dev, split_spec.test)))


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_corpus(records: Sequence[UtteranceRecord], split_spec: SplitSpec = SplitSpec()) -> dict:
    """Speaker-disjoint train/dev/test partition, made independently within each age group."""
    rng = np.random.default_rng(split_spec.seed)
    by_age: dict[str, dict[str, list[UtteranceRecord]]] = {}
    for r in records:
        by_age.setdefault(r.age, {}).setdefault(r.speaker_id, []).append(r)
    out = {"train": [], "dev": [], "test": []}
    for age in sorted(by_age, key=_age_order):
        speakers = sorted(by_age[age])
        if len(speakers) < 3:
            raise ValueError(f"age group {age} has {len(speakers)} speakers; need at least 3")
        speakers = [speakers[i] for i in rng.permutation(len(speakers))]
        n_train, n_dev, _ = split_counts(len(speakers), split_spec)
        parts = {
            "train": speakers[:n_train],
            "dev": speakers[n_train : n_train + n_dev],
            "test": speakers[n_train + n_dev :],
        }
        for name, spks in parts.items():
            for spk in sorted(spks):
                out[name].extend(r.with_split(name) for r in by_age[age][spk])
    return out


def _age_order(age: str):
    return (AGE_GROUPS.index(age), age) if age in AGE_GROUPS else (len(AGE_GROUPS), age)


@dataclass(eq=False)
class Task:
    task_id: str
    pool: list[UtteranceRecord]
    augment_tag: tuple[str, float] | None = None

    def __post_init__(self):
        if not self.pool:
            raise ValueError(f"task {self.task_id} has an empty pool")

    @property
    def name(self) -> str:
        if self.augment_tag is None:
            return self.task_id
        return f"{self.task_id}^{self.augment_tag[0]}{self.augment_tag[1]:g}"


@dataclass(eq=False)
class TargetTask:
    task_id: str
    train: list[UtteranceRecord]
    dev: list[UtteranceRecord]
    test: list[UtteranceRecord]


def build_tasks(splits: dict, target_group: str = "K", valid_group: str = "G1") -> tuple[list[Task], Task, TargetTask]:
    """Training tasks from every other group (train+dev pooled), the validation task, and the target task."""
    groups: dict[str, dict[str, list]] = {}
    for name in ("train", "dev", "test"):
        for r in splits[name]:
            groups.setdefault(r.age, {"train": [], "dev": [], "test": []})[name].append(r)
    for g in (target_group, valid_group):
        if g not in groups:
            raise ValueError(f"age group {g} missing from splits")
    training = [
        Task(age, groups[age]["train"] + groups[age]["dev"])
        for age in sorted(groups, key=_age_order)
        if age not in (target_group, valid_group)
    ]
    valid = Task(valid_group, groups[valid_group]["train"] + groups[valid_group]["dev"])
    tg = groups[target_group]
    return training, valid, TargetTask(target_group, tg["train"], tg["dev"], tg["test"])


# ------------------------------------------------------------------- I/O


def write_manifest(records: Sequence[UtteranceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(dict(zip(MANIFEST_FIELDS, r.key()))) + "\n")


def load_manifest(path: str | Path) -> list[UtteranceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                missing = [k for k in MANIFEST_FIELDS if k not in obj]
                if missing:
                    raise ValueError(f"missing field(s) {missing}")
                records.append(
                    UtteranceRecord(
                        str(obj["utt_id"]), str(obj["speaker_id"]), str(obj["age"]), str(obj["source"]), int(obj["label"])
                    )
                )
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest line: {exc}") from exc
    return records


def write_wav(waveform: Waveform, path: str | Path) -> None:
    pcm = np.clip(np.round(waveform.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(waveform.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)


def load_audio(records: Sequence[UtteranceRecord], root: str | Path | None = None) -> list[UtteranceRecord]:
    """Attach waveforms to records whose source is a WAV path (relative to ``root``)."""
    out = []
    for r in records:
        path = Path(r.source)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        out.append(dataclasses.replace(r, waveform=read_wav(path)))
    return out
