"""TDNN speaker encoder with statistics pooling, AAM training and fine-tuning."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from .features import (
    AUGMENTATIONS,
    N_MELS,
    AugmentConfig,
    augment,
    crop_or_pad,
    freq_mask,
    logmel,
    normalize,
    time_mask,
)
from .nn import (
    AamConfig,
    AamHead,
    Adam,
    BatchNorm1d,
    Conv1d,
    CyclicLrSchedule,
    Dense,
    ReLU,
    Sequential,
    StatsPool,
    batch_cross_entropy,
    lr_at,
)


@dataclass(frozen=True)
class Architecture:
    n_mels: int = N_MELS
    channels: int = 64
    widths: tuple[int, int, int] = (5, 3, 3)
    dilations: tuple[int, int, int] = (1, 2, 3)
    bottleneck: int = 128
    dim: int = 64

    def descriptor(self) -> dict:
        d = asdict(self)
        d["type"] = "tdnn-stats"
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "Architecture":
        return cls(d["n_mels"], d["channels"], tuple(d["widths"]), tuple(d["dilations"]),
                   d["bottleneck"], d["dim"])


class Encoder:
    """Frame layers -> statistics pooling -> dense projection to ``dim``."""

    def __init__(self, arch: Architecture = Architecture(), seed: int = 0):
        self.arch = arch
        self.seed = seed
        rng = np.random.default_rng(seed)
        layers = {}
        n_in = arch.n_mels
        for i, (w, d) in enumerate(zip(arch.widths, arch.dilations), 1):
            layers[f"conv{i}"] = Conv1d(n_in, arch.channels, w, d, rng)
            layers[f"relu{i}"] = ReLU()
            layers[f"bn{i}"] = BatchNorm1d(arch.channels)
            n_in = arch.channels
        layers["conv4"] = Conv1d(n_in, arch.bottleneck, 1, 1, rng)
        layers["relu4"] = ReLU()
        layers["bn4"] = BatchNorm1d(arch.bottleneck)
        layers["pool"] = StatsPool()
        layers["fc"] = Dense(2 * arch.bottleneck, arch.dim, rng)
        self.net = Sequential(layers)

    @property
    def dim(self) -> int:
        return self.arch.dim

    def parameters(self):
        return self.net.named_parameters()

    def state(self) -> dict[str, np.ndarray]:
        out = {k: p.value for k, p in self.parameters().items()}
        out.update(self.net.named_buffers())
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.net.named_buffers()
        expected = set(params) | set(buffers)
        if set(tensors) != expected:
            raise ValueError(f"checkpoint tensors do not match architecture: {sorted(set(tensors) ^ expected)}")
        for k, v in tensors.items():
            ref = params[k].value if k in params else buffers[k]
            if ref.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {ref.shape}")
            if k in params:
                params[k].value = v.astype(ref.dtype).copy()
                params[k].zero_grad()
            else:
                self.net.set_buffer(k, v.astype(ref.dtype).copy())

    def forward(self, feats: np.ndarray, train: bool = False) -> np.ndarray:
        """(batch, frames, mels) -> (batch, dim)."""
        if feats.ndim != 3 or feats.shape[2] != self.arch.n_mels:
            raise ValueError(f"expected (batch, frames, {self.arch.n_mels}) features, got {feats.shape}")
        return self.net.forward(np.ascontiguousarray(feats.transpose(0, 2, 1)), train)

    def backward(self, d_emb: np.ndarray) -> None:
        self.net.backward(d_emb)

    def pooled(self, feats: np.ndarray) -> np.ndarray:
        """Statistics-pooling output (before the final dense layer), inference mode."""
        x = np.ascontiguousarray(feats.transpose(0, 2, 1))
        for name, layer in self.net.layers.items():
            x = layer.forward(x, False)
            if name == "pool":
                return x
        raise AssertionError("no pooling layer")

    def copy(self) -> "Encoder":
        return copy.deepcopy(self)


def embed(feats: np.ndarray, encoder: Encoder) -> np.ndarray:
    """Embedding of one (frames, mels) feature matrix."""
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("embed expects a non-empty (frames, mels) matrix")
    return encoder.forward(feats[None].astype(np.float32), train=False)[0]


def embed_many(feats: Sequence[np.ndarray], encoder: Encoder, batch_size: int = 32) -> np.ndarray:
    """Embeddings in input order; equal-length inputs are batched together."""
    out = np.empty((len(feats), encoder.dim), dtype=np.float32)
    by_len: dict[int, list[int]] = {}
    for i, f in enumerate(feats):
        by_len.setdefault(f.shape[0], []).append(i)
    for idx in by_len.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            batch = np.stack([feats[i] for i in chunk]).astype(np.float32)
            out[chunk] = encoder.forward(batch, train=False)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    crop_frames: int = 198
    max_lr: float = 1e-3
    base_lr: float = 1e-8
    lr_cycles: int = 1
    weight_decay: float = 2e-6
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    augment_prob: float = 0.6
    normalization: str = "level"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.crop_frames < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and crop_frames >= 1 required")


class SpeakerDataset:
    """Waveforms with integer speaker labels; yields augmented, cropped, normalised features."""

    def __init__(self, waveforms: Sequence[np.ndarray], speakers: Sequence[str]):
        if len(waveforms) != len(speakers):
            raise ValueError("waveforms and speakers differ in length")
        self.waveforms = list(waveforms)
        self.speaker_names = sorted(set(speakers))
        index = {s: i for i, s in enumerate(self.speaker_names)}
        self.labels = np.array([index[s] for s in speakers], dtype=np.int64)
        self.clean = [logmel(w) for w in self.waveforms]

    def __len__(self):
        return len(self.waveforms)

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_names)

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise ValueError("training needs at least 2 speakers")
        counts = np.bincount(self.labels, minlength=self.n_speakers)
        if counts.min() < 2:
            raise ValueError("every speaker needs at least 2 utterances")

    def features(self, i: int, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
        feats = self.clean[i]
        if cfg.augment_prob > 0 and rng.random() < cfg.augment_prob:
            kind = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
            if kind in ("noise", "reverb"):
                _, wav = augment(self.waveforms[i], cfg.augment, rng, kind)
                feats = logmel(wav)
            feats = crop_or_pad(feats, cfg.crop_frames, rng)
            if kind == "freq_mask":
                feats = freq_mask(feats, cfg.augment.freq_mask_max, rng)
            elif kind == "time_mask":
                feats = time_mask(feats, cfg.augment.time_mask_max, rng)
        else:
            feats = crop_or_pad(feats, cfg.crop_frames, rng)
        return normalize(feats, cfg.normalization)


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _train(encoder: Encoder, head: AamHead, data: SpeakerDataset, cfg: TrainConfig,
           rng: np.random.Generator, log: TrainLog) -> None:
    params = dict(encoder.parameters())
    params.update({f"head.{k}": p for k, p in head.params.items()})
    opt = Adam(params, weight_decay=cfg.weight_decay)
    n = len(data)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = max(1, steps_per_epoch * cfg.epochs)
    schedule = CyclicLrSchedule(cfg.base_lr, cfg.max_lr, max(1, total // max(1, cfg.lr_cycles)))
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses, correct = [], 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            batch = np.stack([data.features(int(i), rng, cfg) for i in idx])
            labels = data.labels[idx]
            opt.zero_grad()
            emb = encoder.forward(batch, train=True)
            logits = head.forward_labels(emb, labels, train=True)
            loss, dlogits = batch_cross_entropy(logits, labels)
            encoder.backward(head.backward(dlogits.astype(np.float32)))
            lr = lr_at(schedule, step)
            opt.step(lr)
            step += 1
            losses.append(loss)
            log.loss.append(loss)
            log.lr.append(lr)
            correct += int(np.sum(np.argmax(head.forward(emb), axis=1) == labels))
        log.epoch_loss.append(float(np.mean(losses)))
        log.epoch_accuracy.append(correct / n)


def new_head(n_classes: int, encoder: Encoder, cfg: TrainConfig) -> AamHead:
    rng = np.random.default_rng([cfg.seed, 1])
    return AamHead(n_classes, encoder.dim, AamConfig(cfg.aam_scale, cfg.aam_margin), rng)


def train_encoder(data: SpeakerDataset, cfg: TrainConfig, arch: Architecture = Architecture()
                  ) -> tuple[Encoder, AamHead, TrainLog]:
    """Train encoder and AAM head from scratch on speaker labels."""
    data.validate()
    encoder = Encoder(arch, seed=cfg.seed)
    head = new_head(data.n_speakers, encoder, cfg)
    log = TrainLog()
    _train(encoder, head, data, cfg, np.random.default_rng([cfg.seed, 2]), log)
    return encoder, head, log


def finetune(source: Encoder, data: SpeakerDataset, cfg: TrainConfig, arch: Architecture | None = None
             ) -> tuple[Encoder, AamHead, TrainLog]:
    """Start from ``source`` weights with a fresh head and train on ``data`` only."""
    if arch is not None and arch != source.arch:
        raise ValueError("architecture mismatch between source encoder and config")
    data.validate()
    encoder = source.copy()
    head = new_head(data.n_speakers, encoder, cfg)
    log = TrainLog()
    _train(encoder, head, data, cfg, np.random.default_rng([cfg.seed, 3]), log)
    return encoder, head, log


def wse_merge(enc_a: Encoder, enc_c: Encoder, alpha: float = 0.5) -> Encoder:
    """Weight-space ensemble: every tensor (buffers included) is alpha*a + (1-alpha)*c."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if enc_a.arch != enc_c.arch:
        raise ValueError("cannot merge encoders with different architectures")
    sa, sc = enc_a.state(), enc_c.state()
    merged = {}
    for k in sa:
        if sa[k].shape != sc[k].shape:
            raise ValueError(f"shape mismatch for {k}")
        if alpha == 1.0:
            merged[k] = sa[k].copy()
        elif alpha == 0.0:
            merged[k] = sc[k].copy()
        else:
            merged[k] = (alpha * sa[k] + (1 - alpha) * sc[k]).astype(np.float32)
    out = enc_a.copy()
    out.load_state(merged)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_encoder(path, encoder: Encoder, head: AamHead | None = None, *, epoch: int = 0,
                 extra: dict | None = None) -> None:
    tensors = dict(encoder.state())
    header = {
        "kind": "encoder",
        "architecture": encoder.arch.descriptor(),
        "d": encoder.dim,
        "seed": encoder.seed,
        "epoch": epoch,
    }
    if head is not None:
        tensors["head.w"] = head.params["w"].value
        header["aam"] = {"scale": head.cfg.scale, "margin": head.cfg.margin}
    if extra:
        header.update(extra)
    checkpoint.save(path, header, tensors)


def load_encoder(path) -> tuple[Encoder, AamHead | None, dict]:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "encoder":
        raise ValueError(f"{path}: not an encoder checkpoint")
    arch = Architecture.from_descriptor(header["architecture"])
    if arch.dim != header["d"]:
        raise ValueError(f"{path}: descriptor dim disagrees with d")
    encoder = Encoder(arch, seed=header["seed"])
    head_w = tensors.pop("head.w", None)
    encoder.load_state(tensors)
    head = None
    if head_w is not None:
        aam = header.get("aam", {})
        head = AamHead(head_w.shape[0], arch.dim, AamConfig(aam.get("scale", 30.0), aam.get("margin", 0.2)),
                       np.random.default_rng(0))
        head.params["w"].value = head_w.copy()
    return encoder, head, header
