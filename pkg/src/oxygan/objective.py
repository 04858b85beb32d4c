"""Adversarial + weighted-L1 objective and the alternating D/G training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from oxygan.errors import ConfigError, ContractError, OxyganError, ShapeError
from oxygan.networks import (
    Network,
    NetworkConfig,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
)
from oxygan.tensor_core import ops
from oxygan.tensor_core.adam import AdamState, adam_step
from oxygan.tensor_core.tensor import GradTape, Tensor

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = ("iteration", "d_loss", "g_gan", "g_l1", "g_total")


class CheckpointIOError(OxyganError, OSError):
    category = "io"


@dataclass
class TrainConfig:
    lambda_l1: float = 100.0
    batch_size: int = 4
    max_iterations: int = 2000
    log_every: int = 10
    seed: int = 0
    noise_on: bool = True
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(image_size=64))
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    literal_minmax: bool = False

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        self.validate()

    def validate(self) -> None:
        if self.lambda_l1 < 0:
            raise ConfigError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 0:
            raise ConfigError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**data)

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass
class LossRecord:
    iteration: int
    d_loss: np.float32
    g_gan_loss: np.float32
    g_l1_loss: np.float32
    g_total: np.float32

    def row(self) -> list[str]:
        vals = (self.d_loss, self.g_gan_loss, self.g_l1_loss, self.g_total)
        return [str(self.iteration)] + [f"{float(v):.9g}" for v in vals]


# ----------------------------------------------------------------------- losses

def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} needs equal dims", a.shape, b.shape)


def l1_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Mean absolute difference over every element."""
    _same_shape(y, y_hat, "l1_loss")
    return ops.mean_all(ops.abs_(ops.sub(y, y_hat)))


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Binary cross-entropy against a constant 0/1 target, averaged over the map."""
    if target == 1:
        return ops.mean_all(ops.softplus(ops.neg(logits)))
    if target == 0:
        return ops.mean_all(ops.softplus(logits))
    raise ContractError(f"target must be 0 or 1, got {target}")


def d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """0.5 * [BCE(real, 1) + BCE(fake, 0)]."""
    _same_shape(real_logits, fake_logits, "d_loss")
    half = real_logits.dtype.type(0.5)
    return ops.mul(ops.add(bce_with_logits(real_logits, 1), bce_with_logits(fake_logits, 0)), half)


def g_loss(fake_logits: Tensor, y: Tensor, y_hat: Tensor, lambda_l1: float,
           literal_minmax: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, gan, l1) with total = gan + lambda_l1 * l1.

    The GAN term is the non-saturating -log D(x, ŷ); ``literal_minmax``
    switches to log(1 - D(x, ŷ)), the form that appears in the min-max game.
    """
    _same_shape(y, y_hat, "g_loss")
    if literal_minmax:
        gan = ops.neg(ops.mean_all(ops.softplus(fake_logits)))
    else:
        gan = bce_with_logits(fake_logits, 1)
    l1 = l1_loss(y, y_hat)
    lam = Tensor(np.asarray(lambda_l1, dtype=l1.dtype))
    total = ops.add(gan, ops.mul(lam, l1))
    return total, gan, l1


# --------------------------------------------------------------------- training

def stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """Accepts a list of SamplePair-likes (``.x``/``.y``) or an (x, y) array pair."""
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        xb, yb = batch
    else:
        batch = list(batch)
        if not batch:
            raise ContractError("train_step needs a non-empty batch")
        dims = {(p.x.shape, p.y.shape) for p in batch}
        if len(dims) != 1:
            raise ShapeError("all pairs in a batch must share dims", *next(iter(dims)))
        xb = np.stack([np.asarray(p.x, dtype=np.float32) for p in batch])
        yb = np.stack([np.asarray(p.y, dtype=np.float32) for p in batch])
    if len(xb) == 0:
        raise ContractError("train_step needs a non-empty batch")
    return xb, yb


def _grad_dict(net: Network, grads: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    return dict(zip(net.params, grads))


def train_step(G: Network, D: Network, batch, cfg: TrainConfig, opt_g: AdamState, opt_d: AdamState,
               rng: np.random.Generator, iteration: int = 0) -> LossRecord:
    """One D update on a detached fake, then one G update through the updated, frozen D.

    G runs once per step; its taped forward is reused by the G update.
    """
    xb, yb = stack_batch(batch)
    x, y = Tensor(xb), Tensor(yb)
    try:
        G.set_trainable(True)
        D.set_trainable(True)
        g_tape = GradTape()
        with g_tape:
            fake = generator_forward(G, x, cfg.noise_on, rng)

        with GradTape() as tape:
            loss_d = d_loss(discriminator_forward(D, x, y), discriminator_forward(D, x, fake.detach()))
        grads = tape.backward(loss_d, list(D.params.values()))
        adam_step(D.params, _grad_dict(D, grads), opt_d)

        D.set_trainable(False)
        with g_tape:
            total, gan, l1 = g_loss(discriminator_forward(D, x, fake), y, fake, cfg.lambda_l1,
                                    cfg.literal_minmax)
        grads = g_tape.backward(total, list(G.params.values()))
        adam_step(G.params, _grad_dict(G, grads), opt_g)
    finally:
        G.set_trainable(True)
        D.set_trainable(True)
    return LossRecord(iteration, loss_d.data[()], gan.data[()], l1.data[()], total.data[()])


@dataclass
class TrainResult:
    G: Network
    D: Network
    history: list[LossRecord]
    opt_g: AdamState
    opt_d: AdamState


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Independent seed streams for init, shuffling and noise."""
    g_init, d_init, shuffle, noise = np.random.SeedSequence(seed).spawn(4)
    return {"g_init": g_init, "d_init": d_init, "shuffle": shuffle, "noise": noise}


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index arrays; reshuffles at every epoch boundary."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


CheckpointSink = Callable[[int, Network, Network], None]


def train_loop(cfg: TrainConfig, dataset, checkpoint_sink: CheckpointSink | None = None,
               on_record: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Run ``cfg.max_iterations`` minibatch steps; an iteration is one D+G update.

    ``dataset`` is an (x, y) pair of stacked arrays or anything with
    ``train_arrays()``.
    """
    xs, ys = dataset.train_arrays() if hasattr(dataset, "train_arrays") else dataset
    if len(xs) == 0:
        raise ContractError("train_loop needs a non-empty dataset")
    streams = seed_streams(cfg.seed)
    G = build_generator(cfg.network, seed=streams["g_init"])
    D = build_discriminator(cfg.network, seed=streams["d_init"])
    opt_g, opt_d = cfg.adam(), cfg.adam()
    noise_rng = np.random.default_rng(streams["noise"])
    batches = minibatches(len(xs), cfg.batch_size, np.random.default_rng(streams["shuffle"]))

    history: list[LossRecord] = []
    for it in range(1, cfg.max_iterations + 1):
        idx = next(batches)
        rec = train_step(G, D, (xs[idx], ys[idx]), cfg, opt_g, opt_d, noise_rng, iteration=it)
        if it % cfg.log_every == 0:
            history.append(rec)
            log.info("iter %d d=%.4f g_gan=%.4f g_l1=%.4f", it, rec.d_loss, rec.g_gan_loss, rec.g_l1_loss)
            if on_record is not None:
                on_record(rec)
        if checkpoint_sink is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0 \
                and it != cfg.max_iterations:
            _sink(checkpoint_sink, it, G, D)
    if checkpoint_sink is not None:
        _sink(checkpoint_sink, cfg.max_iterations, G, D)
    return TrainResult(G, D, history, opt_g, opt_d)


def _sink(sink: CheckpointSink, it: int, G: Network, D: Network) -> None:
    try:
        sink(it, G, D)
    except OSError as exc:
        raise CheckpointIOError(f"checkpoint write failed at iteration {it}: {exc}") from exc


def write_loss_csv(path, history: Sequence[LossRecord], config_hash: str | None = None) -> None:
    """Header plus one row per record; an optional trailing ``# config_hash=`` comment."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CSV_HEADER)
        for rec in history:
            w.writerow(rec.row())
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")


def read_loss_csv(path) -> list[LossRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return [LossRecord(int(r["iteration"]), np.float32(r["d_loss"]), np.float32(r["g_gan"]),
                       np.float32(r["g_l1"]), np.float32(r["g_total"])) for r in rows]

