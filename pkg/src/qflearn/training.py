"""Alternating receiver/transmitter optimization.

Each outer iteration runs N_R supervised receiver steps (no exploration
noise, plain cross-entropy on known messages) followed by N_T transmitter
steps (Gaussian exploration, per-sample losses returned over the configured
feedback chain, policy-gradient Adam update). All randomness is drawn from
named substreams of one seed, so SER evaluation cadence never shifts the
training trajectory.
"""

from dataclasses import dataclass

import numpy as np

from . import rngstreams
from .channels import BscConfig, propagate
from .feedback import QuantizerConfig, bussgang_gain, feedback_roundtrip
from .neuralnet import AdamConfig, adam_step
from .transceiver import (
    build_receiver,
    build_transmitter,
    cross_entropy_losses,
    perturb,
    policy_gradient,
    real_to_complex,
    receive,
    receiver_gradient,
    transmit,
)

PHASE_RX = "rx"
PHASE_TX = "tx"

METRICS_COLUMNS = ("outer_iter", "phase", "step", "empirical_loss", "grad_norm", "g_estimate", "ser")


def exploration_variance(power_mw):
    """Exploration policy variance rule: sigma_p^2 = P * 1e-3 (P in mW)."""
    return power_mw * 1e-3


@dataclass
class TrainingConfig:
    num_iterations: int  # outer iterations, each N_R rx steps then N_T tx steps
    num_messages: int = 16
    n_rx_steps: int = 30
    n_tx_steps: int = 20
    batch_rx: int = 64
    batch_tx: int = 64
    lr_rx: float = 0.008
    lr_tx: float = 0.001
    quantizer: QuantizerConfig | None = None  # None: perfect (unquantized) feedback
    bsc: BscConfig | None = None
    clip_fraction: float = 0.05
    ser_every: int = 50  # outer-iteration cadence for SER estimates
    ser_symbols: int = 10_000

    def __post_init__(self):
        if self.num_iterations < 0:
            raise ValueError("num_iterations must be >= 0")
        for name in ("num_messages", "n_rx_steps", "n_tx_steps", "batch_rx", "batch_tx", "ser_every", "ser_symbols"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_rx <= 0.0 or self.lr_tx <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.bsc is not None and self.quantizer is None:
            raise ValueError("a binary feedback channel requires a quantizer")


@dataclass
class MetricsRecord:
    outer_iter: int  # 1-based outer iteration
    phase: str  # "rx" or "tx"
    step: int  # 1-based step within the phase
    empirical_loss: float
    grad_norm: float
    g_estimate: float | None = None  # Bussgang gain of the batch, quantized modes only
    ser: float | None = None  # attached to the last tx step on the cadence


@dataclass
class RngBundle:
    """Named independent generators for one training run."""

    init_tx: np.random.Generator
    init_rx: np.random.Generator
    messages: np.random.Generator
    exploration: np.random.Generator
    channel: np.random.Generator
    feedback: np.random.Generator
    evaluation: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        return cls(
            init_tx=rngstreams.substream(seed, rngstreams.INIT_TX),
            init_rx=rngstreams.substream(seed, rngstreams.INIT_RX),
            messages=rngstreams.substream(seed, rngstreams.MESSAGES),
            exploration=rngstreams.substream(seed, rngstreams.EXPLORATION),
            channel=rngstreams.substream(seed, rngstreams.CHANNEL),
            feedback=rngstreams.substream(seed, rngstreams.FEEDBACK_BSC),
            evaluation=rngstreams.substream(seed, rngstreams.EVALUATION),
        )


@dataclass
class TrainResult:
    tx: object
    rx: object
    metrics: list
    snapshot: tuple | None = None  # (tx copy, rx copy) taken after snapshot_iter


def receiver_step(tx, rx, channel_cfg, num_messages, batch_size, adam_cfg, msg_rng, chan_rng):
    """One supervised receiver update on a fresh uniform message batch.

    The transmitter is frozen and sends unperturbed normalized symbols.
    Returns (empirical_loss, grad_norm).
    """
    messages = msg_rng.integers(0, num_messages, size=batch_size)
    sent = transmit(tx, messages, num_messages, channel_cfg.P_mw)
    received = propagate(real_to_complex(sent.symbols), channel_cfg, chan_rng)
    probs, tape = receive(rx, received)
    losses = cross_entropy_losses(probs, messages)
    grad = receiver_gradient(rx, tape, probs, messages)
    adam_step(rx, grad, adam_cfg)
    return float(losses.mean()), grad.norm()


def transmitter_step(
    tx,
    rx,
    channel_cfg,
    num_messages,
    batch_size,
    sigma_p_sq,
    quantizer,
    bsc_cfg,
    clip_fraction,
    adam_cfg,
    rngs,
):
    """One policy-gradient transmitter update through the feedback chain.

    The receiver is frozen; it computes per-sample cross-entropy losses on
    the perturbed transmission, and the transmitter sees those losses either
    raw (quantizer None) or after preprocess/quantize/[bit flips]/dequantize.
    Returns (empirical_loss, grad_norm, g_estimate).
    """
    messages = rngs.messages.integers(0, num_messages, size=batch_size)
    sent = transmit(tx, messages, num_messages, channel_cfg.P_mw)
    perturbed, w = perturb(sent.symbols, sigma_p_sq, rngs.exploration)
    received = propagate(real_to_complex(perturbed), channel_cfg, rngs.channel)
    probs, _ = receive(rx, received)
    losses = cross_entropy_losses(probs, messages)

    g_estimate = None
    if quantizer is None:
        fed_back = losses
    else:
        batch = feedback_roundtrip(losses, quantizer, bsc_cfg, rngs.feedback, clip_fraction)
        fed_back = batch.reconstructed
        if not batch.stats.degenerate and batch.transformed.var() > 0.0:
            g_estimate = bussgang_gain(batch.transformed, quantizer).g

    grad = policy_gradient(tx, sent, w, fed_back, sigma_p_sq)
    adam_step(tx, grad, adam_cfg)
    return float(losses.mean()), grad.norm(), g_estimate


def train(cfg, channel_cfg, seed, tx=None, rx=None, snapshot_iter=None):
    """Run the full alternating optimization.

    Networks are Glorot-initialized from the seed unless passed in. Returns a
    TrainResult with the final networks and one MetricsRecord per gradient
    step; if snapshot_iter is given, deep copies of both networks taken after
    that outer iteration ride along (handy for mid-training analyses).
    """
    # Local import: evaluation depends on transceiver, not on this module,
    # but pulling it at module scope would make the import graph order-sensitive.
    from .evaluation import estimate_ser

    rngs = RngBundle.from_seed(seed)
    if tx is None:
        tx = build_transmitter(cfg.num_messages, rngs.init_tx)
    if rx is None:
        rx = build_receiver(cfg.num_messages, rngs.init_rx)
    adam_rx = AdamConfig(learning_rate=cfg.lr_rx)
    adam_tx = AdamConfig(learning_rate=cfg.lr_tx)
    sigma_p_sq = exploration_variance(channel_cfg.P_mw)

    metrics = []
    snapshot = None
    for outer in range(1, cfg.num_iterations + 1):
        for step in range(1, cfg.n_rx_steps + 1):
            loss, gnorm = receiver_step(
                tx, rx, channel_cfg, cfg.num_messages, cfg.batch_rx, adam_rx, rngs.messages, rngs.channel
            )
            metrics.append(MetricsRecord(outer, PHASE_RX, step, loss, gnorm))
        for step in range(1, cfg.n_tx_steps + 1):
            loss, gnorm, g_est = transmitter_step(
                tx,
                rx,
                channel_cfg,
                cfg.num_messages,
                cfg.batch_tx,
                sigma_p_sq,
                cfg.quantizer,
                cfg.bsc,
                cfg.clip_fraction,
                adam_tx,
                rngs,
            )
            metrics.append(MetricsRecord(outer, PHASE_TX, step, loss, gnorm, g_estimate=g_est))
        if outer % cfg.ser_every == 0 or outer == cfg.num_iterations:
            result = estimate_ser(tx, rx, channel_cfg, cfg.num_messages, cfg.ser_symbols, rngs.evaluation)
            metrics[-1].ser = result.ser
        if snapshot_iter is not None and outer == snapshot_iter:
            snapshot = (tx.copy(), rx.copy())
    return TrainResult(tx=tx, rx=rx, metrics=metrics, snapshot=snapshot)


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        # plain-float repr even for numpy scalars, which repr with a wrapper
        return repr(float(value))
    return str(value)


def write_metrics_csv(path, metrics, comments=()):
    """Write the metrics log as CSV, one row per gradient step.

    Floats are repr-formatted so identical runs produce byte-identical
    files; comment lines (leading '#') go directly under the header.
    """
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for line in comments:
            fh.write(f"# {line}\n")
        for rec in metrics:
            cells = [
                str(rec.outer_iter),
                rec.phase,
                str(rec.step),
                _format_cell(rec.empirical_loss),
                _format_cell(rec.grad_norm),
                _format_cell(rec.g_estimate),
                _format_cell(rec.ser),
            ]
            fh.write(",".join(cells) + "\n")


def read_metrics_csv(path):
    """Inverse of write_metrics_csv; skips comment lines."""
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(METRICS_COLUMNS):
            raise ValueError(f"unexpected metrics header: {header}")
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            cells = line.rstrip("\n").split(",")
            records.append(
                MetricsRecord(
                    outer_iter=int(cells[0]),
                    phase=cells[1],
                    step=int(cells[2]),
                    empirical_loss=float(cells[3]),
                    grad_norm=float(cells[4]),
                    g_estimate=float(cells[5]) if cells[5] else None,
                    ser=float(cells[6]) if cells[6] else None,
                )
            )
    return records
