"""Synthetic two-domain speaker corpus and verification trial lists.

Speakers are toy source-filter voices: a sawtooth glottal source at f0 with
slow vibrato, plus a little aspiration noise, passed through a cascade of
three two-pole resonators.  The child domain scales f0 and resonances up with
a ``severity`` knob (1 = youngest).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .features import SAMPLE_RATE

ADULT_F0_RANGE = (90.0, 180.0)
BASE_RESONANCES = (500.0, 1500.0, 2500.0)
BASE_BANDWIDTHS = (90.0, 110.0, 150.0)
PEAK_JITTER = 0.05
BANDWIDTH_JITTER = 0.25
VIBRATO_DEPTH = 0.03
UTT_F0_SPREAD = 0.06
UTT_RESONANCE_SPREAD = 0.015
# children vary more from utterance to utterance; spreads grow with severity
CHILD_F0_SPREAD_GAIN = 0.06
CHILD_RESONANCE_SPREAD_GAIN = 0.015
# per-utterance vocal-effort tilt (first-order FIR coefficient), children only
CHILD_TILT_GAIN = 1.5
# child nuisance level ramps from 0 at severity 0 to full strength at the knee
CHILD_NUISANCE_KNEE = 0.2
# extra breath noise (dB at severity 1, quadratic in severity) on child voices, drawn per utterance
CHILD_BREATH_DB = 24.0
F0_SEVERITY_GAIN = 0.8
RESONANCE_SEVERITY_GAIN = 0.35

# (name, low, high) severity bands for child test sets, youngest first
SEVERITY_BANDS = (("child-young", 0.7333, 1.0001), ("child-mid", 0.4667, 0.7333), ("child-old", 0.0, 0.4667))


class InfeasibleError(ValueError):
    """Requested counts exceed what the corpus can supply."""


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    domain: str
    severity: float
    f0: float
    resonances: tuple[float, float, float]
    bandwidths: tuple[float, float, float]


@dataclass(frozen=True)
class UtteranceSpec:
    utterance_id: str
    speaker_id: str
    duration_s: float = 3.0
    noise_floor_db: float = -40.0
    rng_seed: int = 0
    harmonic_amplitude: float = 1.0
    aspiration_db: float = -20.0

    def __post_init__(self):
        if self.duration_s < 1.0:
            raise ValueError("utterance duration must be >= 1 s")


@dataclass
class CorpusConfig:
    n_adult: int = 80
    n_child: int = 60
    utts_per_speaker: int = 15
    duration_s: float = 3.0
    severity_range: tuple[float, float] = (0.2, 1.0)
    test_fraction: float = 0.25
    dc_threshold: float = 0.55
    noise_floor_db_range: tuple[float, float] = (-45.0, -30.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_adult < 0 or self.n_child < 0 or self.utts_per_speaker < 1:
            raise ValueError("speaker counts must be >= 0 and utts_per_speaker >= 1")
        lo, hi = self.severity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("severity_range must satisfy 0 <= lo <= hi <= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.duration_s < 1.0:
            raise ValueError("utterance duration must be >= 1 s")


def derive_seed(master: int, *keys: int) -> int:
    """Independent 32-bit seed for a (master, keys...) counter tuple."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1)[0])


def gen_speaker(domain: str, severity: float, rng: np.random.Generator, speaker_id: str = "") -> SpeakerProfile:
    if domain not in ("adult", "child"):
        raise ValueError(f"unknown domain {domain!r}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if domain == "adult" and severity != 0.0:
        raise ValueError("adult speakers have severity 0")
    f0 = rng.uniform(*ADULT_F0_RANGE)
    jitter = 1.0 + rng.uniform(-PEAK_JITTER, PEAK_JITTER, size=3)
    bw_jitter = 1.0 + rng.uniform(-BANDWIDTH_JITTER, BANDWIDTH_JITTER, size=3)
    res = np.asarray(BASE_RESONANCES) * jitter
    f0 *= 1.0 + F0_SEVERITY_GAIN * severity
    res *= 1.0 + RESONANCE_SEVERITY_GAIN * severity
    bws = np.asarray(BASE_BANDWIDTHS) * bw_jitter
    return SpeakerProfile(
        speaker_id=speaker_id,
        domain=domain,
        severity=float(severity),
        f0=float(f0),
        resonances=tuple(float(r) for r in res),
        bandwidths=tuple(float(b) for b in bws),
    )


def child_nuisance_level(severity: float) -> float:
    if CHILD_NUISANCE_KNEE <= 0:
        return 1.0 if severity > 0 else 0.0
    return min(1.0, severity / CHILD_NUISANCE_KNEE)


def synth_utterance(profile: SpeakerProfile, spec: UtteranceSpec, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Render one utterance; bit-identical for a given (profile, spec)."""
    rng = np.random.default_rng(spec.rng_seed)
    n = int(round(spec.duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    # per-utterance prosody and articulation offsets around the speaker's voice
    level = child_nuisance_level(profile.severity)
    f0_spread = UTT_F0_SPREAD + CHILD_F0_SPREAD_GAIN * level
    res_spread = UTT_RESONANCE_SPREAD + CHILD_RESONANCE_SPREAD_GAIN * level
    f0 = profile.f0 * (1.0 + rng.uniform(-f0_spread, f0_spread))
    resonances = np.asarray(profile.resonances) * (1.0 + rng.uniform(-res_spread, res_spread, 3))
    rate = rng.uniform(4.0, 7.0)
    phase0 = rng.uniform(0, 2 * np.pi)
    inst_f0 = f0 * (1.0 + VIBRATO_DEPTH * np.sin(2 * np.pi * rate * t + phase0))
    phase = np.cumsum(inst_f0) / sample_rate + rng.uniform()
    source = spec.harmonic_amplitude * (2.0 * (phase % 1.0) - 1.0)
    aspiration = rng.standard_normal(n)
    breath_db = CHILD_BREATH_DB * profile.severity**2 * rng.uniform(0.5, 1.0)
    if np.isfinite(spec.aspiration_db):
        source = source + 10 ** ((spec.aspiration_db + breath_db) / 20) * aspiration
    tilt = rng.uniform(-1.0, 1.0) * CHILD_TILT_GAIN * level
    y = source.copy()
    y[1:] -= tilt * source[:-1]
    for freq, bw in zip(resonances, profile.bandwidths):
        y = _kernels.resonate(y, freq, bw, sample_rate)
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y * (0.9 / peak)
    noise = rng.standard_normal(n)
    if np.isfinite(spec.noise_floor_db):
        y = y + 10 ** (spec.noise_floor_db / 20) * noise
    peak = np.max(np.abs(y))
    if peak == 0:
        raise ValueError(f"{spec.utterance_id}: degenerate all-zero utterance")
    return (y * (0.9 / peak)).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class Record:
    utterance_id: str
    speaker_id: str
    domain: str
    severity: float
    split: str
    dc_train: bool
    seed: int
    duration_s: float
    noise_floor_db: float
    f0: float
    resonances: list[float]
    bandwidths: list[float]
    path: str | None = None

    def profile(self) -> SpeakerProfile:
        return SpeakerProfile(self.speaker_id, self.domain, self.severity, self.f0,
                              tuple(self.resonances), tuple(self.bandwidths))

    def spec(self) -> UtteranceSpec:
        return UtteranceSpec(self.utterance_id, self.speaker_id, self.duration_s, self.noise_floor_db, self.seed)


@dataclass
class Manifest:
    records: list[Record] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def select(self, *, split: str | None = None, domain: str | None = None, dc_train: bool | None = None,
               severity_range: tuple[float, float] | None = None) -> list[Record]:
        out = []
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if domain is not None and r.domain != domain:
                continue
            if dc_train is not None and r.dc_train != dc_train:
                continue
            if severity_range is not None and not severity_range[0] <= r.severity < severity_range[1]:
                continue
            out.append(r)
        return out

    def by_id(self) -> dict[str, Record]:
        return {r.utterance_id: r for r in self.records}

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                records.append(Record(**d))
        return cls(records)


def gen_speakers(cfg: CorpusConfig) -> list[SpeakerProfile]:
    speakers = []
    for i in range(cfg.n_adult):
        rng = np.random.default_rng(derive_seed(cfg.seed, 0, i))
        speakers.append(gen_speaker("adult", 0.0, rng, f"a{i:03d}"))
    for i in range(cfg.n_child):
        rng = np.random.default_rng(derive_seed(cfg.seed, 1, i))
        # stratified: child i falls in the i-th of n_child equal severity slices
        lo, hi = cfg.severity_range
        severity = lo + (hi - lo) * (i + rng.uniform()) / cfg.n_child
        speakers.append(gen_speaker("child", severity, rng, f"c{i:03d}"))
    return speakers


def _pick_test_speakers(speakers: list[SpeakerProfile], n_test: int, rng: np.random.Generator) -> set[str]:
    # systematic stratified draw along severity so every band gets test speakers
    order = sorted(speakers, key=lambda s: (s.severity, s.speaker_id))
    groups = np.array_split(np.arange(len(order)), n_test)
    return {order[int(rng.choice(g))].speaker_id for g in groups}


def build_splits(speakers: Sequence[SpeakerProfile], cfg: CorpusConfig) -> Manifest:
    rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    test_ids: set[str] = set()
    for domain in ("adult", "child"):
        group = [s for s in speakers if s.domain == domain]
        if not group:
            continue
        n_test = int(round(cfg.test_fraction * len(group)))
        if n_test < 1 or len(group) - n_test < 2:
            raise InfeasibleError(f"not enough {domain} speakers ({len(group)}) for a train/test split")
        test_ids |= _pick_test_speakers(group, n_test, rng)
    records = []
    for si, spk in enumerate(speakers):
        split = "test" if spk.speaker_id in test_ids else "train"
        dc = split == "train" and (spk.domain == "adult" or spk.severity >= cfg.dc_threshold)
        for u in range(cfg.utts_per_speaker):
            urng = np.random.default_rng(derive_seed(cfg.seed, 3, si, u))
            records.append(Record(
                utterance_id=f"{spk.speaker_id}-u{u:02d}",
                speaker_id=spk.speaker_id,
                domain=spk.domain,
                severity=spk.severity,
                split=split,
                dc_train=dc,
                seed=derive_seed(cfg.seed, 4, si, u),
                duration_s=cfg.duration_s,
                noise_floor_db=float(urng.uniform(*cfg.noise_floor_db_range)),
                f0=spk.f0,
                resonances=list(spk.resonances),
                bandwidths=list(spk.bandwidths),
            ))
    return Manifest(records)


def gen_cohort(severity: float, n_speakers: int, utts_per_speaker: int, cfg: CorpusConfig,
               prefix: str = "k") -> list[Record]:
    """Extra child speakers at one fixed severity, outside the train/test splits."""
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("cohort needs >= 1 speaker and >= 1 utterance each")
    key = int(round(severity * 1000))
    records = []
    for i in range(n_speakers):
        rng = np.random.default_rng(derive_seed(cfg.seed, 7, key, i))
        spk = gen_speaker("child", severity, rng, f"{prefix}{i:03d}")
        for u in range(utts_per_speaker):
            urng = np.random.default_rng(derive_seed(cfg.seed, 8, key, i, u))
            records.append(Record(
                utterance_id=f"{spk.speaker_id}-u{u:02d}", speaker_id=spk.speaker_id, domain="child",
                severity=severity, split="cohort", dc_train=False, seed=derive_seed(cfg.seed, 9, key, i, u),
                duration_s=cfg.duration_s, noise_floor_db=float(urng.uniform(*cfg.noise_floor_db_range)),
                f0=spk.f0, resonances=list(spk.resonances), bandwidths=list(spk.bandwidths)))
    return records


def load_audio(record: Record, root: str | Path | None = None) -> np.ndarray:
    """Read the record's WAV if it has one, otherwise regenerate it from its seed."""
    if record.path:
        from .features import read_wav

        p = Path(record.path)
        if not p.is_absolute() and root is not None:
            p = Path(root) / p
        return read_wav(p)[0]
    return synth_utterance(record.profile(), record.spec())


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    label: int
    enroll_id: str
    test_id: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("trial label must be 0 or 1")
        if self.enroll_id == self.test_id:
            raise ValueError("enroll and test ids must differ")


def _sample_pairs(pairs: list, k: int, rng: np.random.Generator, what: str) -> list:
    if k > len(pairs):
        raise InfeasibleError(f"requested {k} {what} trials but only {len(pairs)} distinct pairs exist")
    idx = np.sort(rng.choice(len(pairs), size=k, replace=False))
    return [pairs[i] for i in idx]


def build_trials(records: Iterable[Record], n_pos: int, n_neg: int, rng: np.random.Generator) -> list[Trial]:
    """Same-speaker positives and same-domain cross-speaker negatives, no repeated pairs."""
    recs = sorted(records, key=lambda r: r.utterance_id)
    by_spk: dict[str, list[Record]] = {}
    for r in recs:
        by_spk.setdefault(r.speaker_id, []).append(r)
    if len(by_spk) < 2 or any(len(v) < 2 for v in by_spk.values()):
        raise InfeasibleError("need >= 2 speakers with >= 2 utterances each")
    pos = [(a.utterance_id, b.utterance_id)
           for utts in by_spk.values() for a, b in itertools.combinations(utts, 2)]
    neg = [(a.utterance_id, b.utterance_id)
           for a, b in itertools.combinations(recs, 2)
           if a.speaker_id != b.speaker_id and a.domain == b.domain]
    trials = [Trial(1, a, b) for a, b in _sample_pairs(pos, n_pos, rng, "positive")]
    trials += [Trial(0, a, b) for a, b in _sample_pairs(neg, n_neg, rng, "negative")]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def write_trials(path: str | Path, trials: Iterable[Trial]) -> None:
    Path(path).write_text("".join(f"{t.label} {t.enroll_id} {t.test_id}\n" for t in trials), encoding="utf-8")


def read_trials(path: str | Path) -> list[Trial]:
    trials = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{n}: expected 'label enroll_id test_id'")
        trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return trials


def band_of(severity: float, domain: str) -> str:
    if domain == "adult":
        return "adult"
    for name, lo, hi in SEVERITY_BANDS:
        if lo <= severity < hi:
            return name
    raise ValueError(f"severity {severity} outside all bands")
