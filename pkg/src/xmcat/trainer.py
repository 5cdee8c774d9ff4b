"""Mutual-supervision training loop.

Within a step, both modalities run inference against pre-step state first:
the network predicts clusters with its pre-step parameters, sentences are
encoded with the pre-step count table, and only then does each side get
updated with the other's inference (counts observe the visual predictions,
the network trains toward the text encodings).
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .data import MultimodalSample, load_image
from .grad import AdamState
from .text import CooccurrenceTable, TextConfig, save_counts
from .vision import EncoderConfig, Network, predict_clusters, save_checkpoint, train_batch

_EDGE = re.compile(r"^[^a-z0-9]+|[^a-z0-9]+$")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties.

    Only leading/trailing characters outside [a-z0-9] are stripped, so
    interior punctuation survives: "don't" stays one token.
    """
    out = []
    for raw in text.lower().split():
        tok = _EDGE.sub("", raw)
        if tok:
            out.append(tok)
    return out


class ConfigError(ValueError):
    """A malformed run configuration (unknown key, bad value)."""


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text: TextConfig = field(default_factory=TextConfig)
    batch_size: int = 50
    epochs: int = 40
    seed: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_interval: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        self.text.validate()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_interval < 0:
            raise ConfigError(f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


# config file key -> (dataclass section, field, parser)
_CONFIG_KEYS: dict[str, tuple[str, str, Callable]] = {
    "n_clusters": ("encoder", "n_clusters", int),
    "visual_threshold": ("encoder", "visual_threshold", float),
    "image_size": ("encoder", "image_size", int),
    "conv_channels": ("encoder", "conv_channels", lambda s: tuple(int(v) for v in s.split(","))),
    "head_init_scale": ("encoder", "head_init_scale", float),
    "head_init_density": ("encoder", "head_init_density", float),
    "conv_bias_init": ("encoder", "conv_bias_init", float),
    "text_threshold": ("text", "text_threshold", float),
    "batch_size": ("", "batch_size", int),
    "epochs": ("", "epochs", int),
    "seed": ("", "seed", int),
    "learning_rate": ("", "learning_rate", float),
    "beta1": ("", "beta1", float),
    "beta2": ("", "beta2", float),
    "eps": ("", "eps", float),
    "checkpoint_interval": ("", "checkpoint_interval", int),
}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from flat key=value lines (# comments allowed)."""
    values: dict[str, dict] = {"": {}, "encoder": {}, "text": {}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        spec = _CONFIG_KEYS.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key: {key!r}")
        section, name, parser = spec
        try:
            values[section][name] = parser(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r}") from None
    base = base or TrainConfig()
    encoder = EncoderConfig(**{**_as_dict(base.encoder), **values["encoder"]})
    text_cfg = TextConfig(**{**_as_dict(base.text), **values["text"]})
    top = _as_dict(base)
    top.update(values[""])
    top["encoder"] = encoder
    top["text"] = text_cfg
    return TrainConfig(**top)


def _as_dict(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def config_text(config: TrainConfig) -> str:
    """Canonical key=value form; the digest of this string identifies the run."""
    lines = []
    for key, (section, name, _parser) in _CONFIG_KEYS.items():
        obj = config if section == "" else getattr(config, section)
        value = getattr(obj, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def load_config_file(path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, base)


class StepResult(NamedTuple):
    loss: float
    visual: np.ndarray  # (batch, n) uint8 pre-step predictions
    targets: np.ndarray  # (batch, n) uint8 pre-step text encodings


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    table_entries: int
    seconds: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    observations: list[tuple[tuple[str, ...], tuple[int, ...]]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        lines = ["step,epoch,loss"]
        for rec in self.steps:
            lines.append(f"{rec.step},{rec.epoch},{rec.loss:.9g}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train_step(
    images: np.ndarray,
    token_lists: list[list[str]],
    net: Network,
    table: CooccurrenceTable,
    text_threshold: float,
    adam: AdamState,
) -> StepResult:
    """One mutual-supervision step over a batch; returns the pre-step loss.

    On a fresh model the first step predicts every cluster for every image
    (sigmoid(0) = 0.5 fires at the inclusive threshold) while the empty table
    encodes every caption to all-zeros; that bootstrap seeds the counts.
    """
    if len(images) != len(token_lists):
        raise ValueError(f"batch mismatch: {len(images)} images vs {len(token_lists)} captions")
    if len(images) == 0:
        raise ValueError("empty batch")
    probs = net.forward(images)
    visual = predict_clusters(probs, net.config.visual_threshold)
    targets = np.stack([table.encode_sentence(tokens, text_threshold) for tokens in token_lists])
    for tokens, bits in zip(token_lists, visual):
        table.observe(tokens, bits)
    loss = train_batch(net, images, targets, adam)
    return StepResult(loss, visual, targets)


def fit(
    samples: list[MultimodalSample],
    config: TrainConfig,
    checkpoint_dir=None,
    record_observations: bool = False,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[Network, CooccurrenceTable, TrainLog]:
    """Train for the configured epoch budget over the given samples.

    Each epoch reshuffles with its own generator seeded seed+epoch; batches
    are consecutive slices of that permutation, the last one possibly short.
    """
    config.validate()
    if not samples:
        raise ValueError("fit: no samples")
    images = np.stack([load_image(s.image_path) for s in samples])
    tokens = [tokenize(s.caption) for s in samples]
    net = Network(config.encoder, seed=config.seed)
    table = CooccurrenceTable(config.encoder.n_clusters)
    adam = AdamState(
        learning_rate=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    log = TrainLog()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = np.random.Generator(np.random.PCG64(config.seed + epoch)).permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            result = train_step(
                images[idx], [tokens[i] for i in idx], net, table, config.text.text_threshold, adam
            )
            step += 1
            log.steps.append(StepRecord(step, epoch, result.loss))
            losses.append(result.loss)
            if record_observations:
                for i, bits in zip(idx, result.visual):
                    log.observations.append((tuple(tokens[i]), tuple(int(b) for b in bits)))
        log.epochs.append(
            EpochRecord(epoch, float(np.mean(losses)), table.joint_size(), time.perf_counter() - started)
        )
        if progress is not None:
            progress(log.epochs[-1])
        if ckpt_dir is not None and config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0:
            save_checkpoint(net, ckpt_dir / f"network_epoch{epoch:03d}.xmck")
            save_counts(table, ckpt_dir / f"counts_epoch{epoch:03d}.xmct")
    if ckpt_dir is not None:
        save_checkpoint(net, ckpt_dir / "network.xmck")
        save_counts(table, ckpt_dir / "counts.xmct")
    return net, table, log
