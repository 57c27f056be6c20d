"""Adam with a cyclic cosine learning rate, snapshot ensembling and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import to_storage_precision
from .data import Batch, Corpus, StsPair, Vocab, make_batches
from .errors import ConfigError, DimensionError
from .evaluation import RetrievalResult, eval_retrieval, eval_sts
from .model import Encoder, Ensemble, combine_embeddings
from .nn import EncoderConfig, EncoderParams, encode_caption, encode_image, init_params
from .objective import LossConfig, cosine_matrix, hinge_loss
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    lr_min: float = 1e-6
    lr_max: float = 1e-3
    cycle_len: int = 1  # minibatches per full cycle

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.cycle_len < 1:
            raise ConfigError("cycle_len must be >= 1")


def cyclic_lr(mb: int, schedule: ScheduleConfig) -> float:
    """Cosine cycle: ``lr_min`` at every cycle boundary, ``lr_max`` half way through."""
    if mb < 0:
        raise ValueError("minibatch index must be >= 0")
    phase = (mb % schedule.cycle_len) / schedule.cycle_len
    return 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * (1.0 + 2.0 * phase))) + schedule.lr_min


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 32
    snapshot_every: int = 4
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.snapshot_every < 1:
            raise ConfigError("epochs and snapshot_every must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (in-batch negatives)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise DimensionError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    n_batches: int


@dataclass
class Snapshot:
    params: EncoderParams
    epoch: int
    dev_recall_at_10: float
    config: Optional[EncoderConfig] = None


def select_snapshots(snapshots: Sequence[Snapshot], k: int = 2) -> list[Snapshot]:
    """Top ``k`` by dev score; on equal scores the later epoch wins."""
    if not snapshots:
        raise ValueError("no snapshots to select from")
    ranked = sorted(snapshots, key=lambda s: (s.dev_recall_at_10, s.epoch), reverse=True)
    return ranked[:k]


def ensemble_embed(snapshots: Sequence[Snapshot], batch: Batch, config: EncoderConfig, modality: str = "caption") -> np.ndarray:
    """Average the unit-norm embeddings of several snapshots and re-normalize."""
    for s in snapshots:
        if s.config is not None and s.config != config:
            raise ConfigError(f"snapshot from epoch {s.epoch} was trained with a different config")
    outs = []
    with T.no_grad():
        for s in snapshots:
            if modality == "caption":
                outs.append(encode_caption(batch, s.params, config).data)
            else:
                outs.append(encode_image(batch.image_features, s.params, config).data)
    return combine_embeddings(outs)


def batch_loss(batch: Batch, params: EncoderParams, config: EncoderConfig, loss_config: LossConfig) -> T.Tensor:
    caps = encode_caption(batch, params, config)
    imgs = encode_image(batch.image_features, params, config)
    return hinge_loss(cosine_matrix(caps, imgs), loss_config)


class Trainer:
    """Owns the parameters, optimizer state and the global minibatch counter."""

    def __init__(
        self,
        params: EncoderParams,
        config: EncoderConfig,
        vocab: Vocab,
        corpus: Corpus,
        train_config: TrainConfig,
        schedule: ScheduleConfig,
        loss_config: LossConfig,
    ):
        self.params = params
        self.config = config
        self.vocab = vocab
        self.corpus = corpus
        self.train_config = train_config
        self.schedule = schedule
        self.loss_config = loss_config
        self.adam = AdamState()
        self.mb = 0

    def encoder(self) -> Encoder:
        return Encoder(self.config, self.params, self.vocab)

    def train_epoch(self, epoch_index: int) -> EpochStats:
        tc = self.train_config
        seed = derive_seed(tc.seed, "shuffle", epoch_index)
        total, count = 0.0, 0
        for batch in make_batches(self.corpus, "train", self.vocab, tc.batch_size, seed):
            loss = batch_loss(batch, self.params, self.config, self.loss_config)
            T.backward(loss, self.params.values())
            grads = {k: v.grad for k, v in self.params.items()}
            adam_step(self.params, grads, self.adam, cyclic_lr(self.mb, self.schedule), tc.beta1, tc.beta2, tc.adam_eps)
            self.mb += 1
            total += loss.item()
            count += 1
        if count == 0:
            raise ValueError("empty training set")
        return EpochStats(epoch_index, total / count, count)

    def mean_loss(self, split: str, params: Optional[EncoderParams] = None) -> float:
        """Forward-only mean minibatch loss over ``split`` in corpus order."""
        params = params or self.params
        total, count = 0.0, 0
        with T.no_grad():
            for batch in make_batches(self.corpus, split, self.vocab, self.train_config.batch_size, None):
                total += batch_loss(batch, params, self.config, self.loss_config).item()
                count += 1
        return total / count


METRIC_COLUMNS = [
    "epoch", "mean_loss", "dev_loss",
    "dev_c2i_r@1", "dev_c2i_r@5", "dev_c2i_r@10",
    "dev_i2c_r@1", "dev_i2c_r@5", "dev_i2c_r@10",
    "dev_medr_c2i", "dev_medr_i2c", "lr_at_epoch_end",
]


def metrics_row(epoch: int, train_loss: float, dev_loss: float, dev: RetrievalResult, lr: float, sts_r=None) -> dict:
    c, i = dev.caption_to_image, dev.image_to_caption
    row = {
        "epoch": epoch, "mean_loss": train_loss, "dev_loss": dev_loss,
        "dev_c2i_r@1": c.r_at[1], "dev_c2i_r@5": c.r_at[5], "dev_c2i_r@10": c.r_at[10],
        "dev_i2c_r@1": i.r_at[1], "dev_i2c_r@5": i.r_at[5], "dev_i2c_r@10": i.r_at[10],
        "dev_medr_c2i": c.median_rank, "dev_medr_i2c": i.median_rank,
        "lr_at_epoch_end": lr,
    }
    if sts_r is not None:
        row["dev_sts_r"] = sts_r
    return row


@dataclass
class TrainResult:
    trainer: Trainer
    metrics: list[dict]
    snapshots: list[Snapshot]
    selected: list[Snapshot]

    @property
    def config(self) -> EncoderConfig:
        return self.trainer.config

    @property
    def vocab(self) -> Vocab:
        return self.trainer.vocab

    def snapshot_encoder(self, snap: Snapshot) -> Encoder:
        return Encoder(self.config, snap.params, self.vocab)

    def ensemble(self) -> Ensemble:
        return Ensemble([self.snapshot_encoder(s) for s in self.selected])


def fit(
    corpus: Corpus,
    vocab: Vocab,
    config: EncoderConfig,
    train_config: TrainConfig,
    schedule: ScheduleConfig,
    loss_config: LossConfig = LossConfig(),
    sts_pairs: Optional[Sequence[StsPair]] = None,
    ensemble_size: int = 2,
    on_snapshot: Optional[Callable[[Snapshot], None]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run the full schedule: untrained epoch-0 row, ``epochs`` epochs,
    a snapshot every ``snapshot_every`` epochs, then snapshot selection.

    Snapshots are rounded to checkpoint (float32) precision before they are
    scored, so a reloaded checkpoint reproduces its recorded dev score.
    """
    params = init_params(config, derive_seed(train_config.seed, "init"))
    trainer = Trainer(params, config, vocab, corpus, train_config, schedule, loss_config)

    def dev_row(epoch: int, train_loss: float) -> dict:
        enc = trainer.encoder()
        dev = eval_retrieval(enc, corpus, "dev")
        sts = eval_sts(enc, sts_pairs).pearson_r if sts_pairs else None
        row = metrics_row(epoch, train_loss, trainer.mean_loss("dev"), dev, cyclic_lr(trainer.mb, schedule), sts)
        logger.info("epoch %d: loss %.4f dev_loss %.4f dev R@10 c2i %.1f i2c %.1f",
                    epoch, train_loss, row["dev_loss"], row["dev_c2i_r@10"], row["dev_i2c_r@10"])
        if on_epoch:
            on_epoch(row)
        return row

    metrics = [dev_row(0, trainer.mean_loss("train"))]
    snapshots: list[Snapshot] = []
    for epoch in range(1, train_config.epochs + 1):
        stats = trainer.train_epoch(epoch)
        metrics.append(dev_row(epoch, stats.mean_loss))
        if epoch % train_config.snapshot_every == 0:
            frozen = to_storage_precision(trainer.params)
            score = eval_retrieval(Encoder(config, frozen, vocab), corpus, "dev").mean_r10
            snap = Snapshot(frozen, epoch, score, config)
            snapshots.append(snap)
            if on_snapshot:
                on_snapshot(snap)
    selected = select_snapshots(snapshots, ensemble_size) if snapshots else []
    return TrainResult(trainer, metrics, snapshots, selected)
