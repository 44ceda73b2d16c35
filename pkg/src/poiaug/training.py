"""Three-stage training: LM pretraining, seq2seq MLE, then mask training.

Stage 1 pretrains a unidirectional two-layer LSTM (whose layers become the
decoder) and a bidirectional LSTM (which becomes encoder layer 1) as
next-POI language models.  Stage 2 fits the full encoder-decoder by MLE on
every observed slot.  Stage 3 hides a growing fraction of observed slots
behind the missing token and trains the decoder to recover them.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit, FeatureStats, GriddedSequence, Vocabulary
from .decoder import run_seq2seq
from .errors import NumericalError
from .model import ModelConfig, Seq2SeqModel, SeqInputs, Zoneout, embed_sequence, prepare_inputs
from .numerics import AdamState, ParameterStore, adam_step, clip_grad_norm, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage_epochs: tuple[int, int, int] = (5, 10, 50)
    lr: float = 0.008
    mask_start: float = 0.10
    mask_end: float = 0.50
    mask_end_epoch: int = 50
    zoneout_h: float = 0.1
    zoneout_c: float = 0.1
    window: int = 10
    batch_size: int = 1
    seed: int = 0
    interval: float = 3 * 3600.0
    clip_norm: float = 5.0
    val_mask: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if len(self.stage_epochs) != 3 or any(e < 0 for e in self.stage_epochs):
            raise ValueError("stage_epochs must be three non-negative counts")
        for frac in (self.mask_start, self.mask_end, self.val_mask):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("mask fractions must lie in [0, 1]")
        if self.mask_end_epoch < 1:
            raise ValueError("mask_end_epoch must be >= 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")

    @property
    def masking_enabled(self) -> bool:
        return self.mask_start > 0 or self.mask_end > 0


def mask_percent(epoch: int, cfg: TrainConfig | None = None) -> float:
    """Linear ramp from ``mask_start`` at epoch 1 to ``mask_end`` at ``mask_end_epoch``, flat afterwards."""
    cfg = cfg or TrainConfig()
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    if epoch >= cfg.mask_end_epoch:
        return cfg.mask_end
    span = cfg.mask_end_epoch - 1
    return cfg.mask_start + (epoch - 1) * (cfg.mask_end - cfg.mask_start) / span


def apply_zoneout(h_prev, h_new, z: float, mode: str = "train", rng: np.random.Generator | None = None):
    """Keep each coordinate of ``h_prev`` with probability ``z`` (train) or mix by ``z`` (eval)."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    h_new = np.asarray(h_new, dtype=np.float64)
    if h_prev.shape != h_new.shape:
        raise ValueError("zoneout needs equal shapes")
    if not 0.0 <= z <= 1.0:
        raise ValueError("zoneout probability must lie in [0, 1]")
    if z == 0.0:
        return h_new.copy()
    if z == 1.0:
        return h_prev.copy()
    if mode == "eval":
        return z * h_prev + (1.0 - z) * h_new
    if mode != "train":
        raise ValueError("mode must be 'train' or 'eval'")
    keep = rng.random(h_prev.shape) < z
    return np.where(keep, h_prev, h_new)


@dataclass
class MaskPlan:
    epoch: int
    positions: list[np.ndarray]  # per sequence, sorted slot indices

    def realized_fraction(self, observed_counts: Sequence[int]) -> float:
        total = sum(observed_counts)
        return sum(len(p) for p in self.positions) / total if total else 0.0


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def draw_mask(visible: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Choose ``round(fraction * observed)`` observed slots to hide, never slot 0."""
    observed = np.flatnonzero(visible)
    candidates = observed[observed > 0]
    k = min(round_half_up(fraction * observed.size), candidates.size)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(candidates, size=k, replace=False)).astype(np.int64)


def draw_mask_plan(visibles: Sequence[np.ndarray], fraction: float, rng: np.random.Generator,
                   epoch: int = 0) -> MaskPlan:
    return MaskPlan(epoch, [draw_mask(v, fraction, rng) for v in visibles])


def masked_cross_entropy(distributions, targets, positions) -> float:
    """Mean ``-log p(target)`` over ``positions``.

    ``distributions[t]`` is the probability vector predicted for slot ``t``.
    """
    positions = list(positions)
    if not positions:
        raise ValueError("masked_cross_entropy needs at least one position")
    total = 0.0
    for t in positions:
        p = float(distributions[t][targets[t]])
        total += -math.log(p) if p > 0 else math.inf
    return total / len(positions)


def mle_positions(inputs: SeqInputs) -> np.ndarray:
    pos = np.flatnonzero(inputs.targets >= 0)
    return pos[pos > 0]


def uni_lm_loss(tape, model: Seq2SeqModel, inputs: SeqInputs, zone: Zoneout) -> float | None:
    """Next-slot prediction with the decoder's two layers and the ``lm.uni`` head."""
    n = len(inputs)
    targets = inputs.targets[1:]
    keep = np.flatnonzero(targets >= 0)
    if n < 2 or keep.size == 0:
        return None
    cfg = model.cfg
    X0 = embed_sequence(tape, model, inputs.tokens[:-1], inputs.feats[:-1])
    kh, kc = zone.masks(n - 1, cfg.hidden)
    H1, _, _, _ = ad.lstm(tape, model.store, "dec.l1", X0, keep_h=kh, keep_c=kc)
    X1 = ad.add(tape, H1, X0)
    kh, kc = zone.masks(n - 1, cfg.hidden)
    H2, _, _, _ = ad.lstm(tape, model.store, "dec.l2", X1, keep_h=kh, keep_c=kc)
    logits = ad.linear(tape, model.store, "lm.uni.out", ad.rows(tape, H2, keep))
    return ad.cross_entropy(tape, logits, targets[keep], np.full(keep.size, 1.0 / keep.size))


def bi_lm_loss(tape, model: Seq2SeqModel, inputs: SeqInputs, zone: Zoneout) -> float | None:
    """Forward LSTM predicts the next slot, backward LSTM the previous one."""
    n = len(inputs)
    if n < 2:
        return None
    cfg = model.cfg
    nxt = np.flatnonzero(inputs.targets[1:] >= 0)  # rows t predicting slot t+1
    prv = np.flatnonzero(inputs.targets[:-1] >= 0) + 1  # rows t predicting slot t-1
    count = nxt.size + prv.size
    if count == 0:
        return None
    X0 = embed_sequence(tape, model, inputs.tokens, inputs.feats)
    loss = 0.0
    if nxt.size:
        kh, kc = zone.masks(n, cfg.enc_hidden)
        H_fw, _, _, _ = ad.lstm(tape, model.store, "enc.fw", X0, keep_h=kh, keep_c=kc)
        logits = ad.linear(tape, model.store, "lm.fw.out", ad.rows(tape, H_fw, nxt))
        loss += ad.cross_entropy(tape, logits, inputs.targets[nxt + 1], np.full(nxt.size, 1.0 / count))
    if prv.size:
        reverse = np.arange(n - 1, -1, -1)
        kh, kc = zone.masks(n, cfg.enc_hidden)
        H_rev, _, _, _ = ad.lstm(tape, model.store, "enc.bw", ad.rows(tape, X0, reverse), keep_h=kh, keep_c=kc)
        # reversed row n-1-t holds the backward state at slot t
        logits = ad.linear(tape, model.store, "lm.bw.out", ad.rows(tape, H_rev, n - 1 - prv))
        loss += ad.cross_entropy(tape, logits, inputs.targets[prv - 1], np.full(prv.size, 1.0 / count))
    return loss


def sequence_loss(tape, model: Seq2SeqModel, objective: str, inputs: SeqInputs, zone: Zoneout) -> float | None:
    """Loss of one prepared sequence under ``objective`` (``uni``, ``bi``, ``mle`` or ``mask``)."""
    if objective == "uni":
        return uni_lm_loss(tape, model, inputs, zone)
    if objective == "bi":
        return bi_lm_loss(tape, model, inputs, zone)
    if objective == "mle":
        positions = mle_positions(inputs)
    elif objective == "mask":
        positions = inputs.masked
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if len(positions) == 0:
        return None
    return run_seq2seq(tape, model, inputs, positions, zone).loss


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    mask_fraction: float
    train_loss: float
    val_loss: float
    seconds: float
    realized_mask_fraction: float = 0.0
    skipped: int = 0

    def to_tsv(self) -> str:
        return (f"{self.epoch}\t{self.stage}\t{self.mask_fraction:.6f}\t{self.train_loss:.6f}\t"
                f"{self.val_loss:.6f}\t{self.seconds:.3f}")


LOG_HEADER = "epoch\tstage\tmask_fraction\ttrain_loss\tval_loss\tseconds"


@dataclass
class TrainResult:
    model: Seq2SeqModel
    log: list[EpochRecord] = field(default_factory=list)
    best_val: float = math.nan
    best_epoch: int = 0

    def log_tsv(self) -> str:
        return "".join(line + "\n" for line in [LOG_HEADER] + [r.to_tsv() for r in self.log])


class Trainer:
    """Runs the three stages over a fixed set of prepared sequences."""

    def __init__(self, model: Seq2SeqModel, train: Sequence[GriddedSequence], validation: Sequence[GriddedSequence],
                 vocab: Vocabulary, stats: FeatureStats, cfg: TrainConfig, log_fn=None):
        cfg.validate()
        self.model, self.cfg, self.vocab, self.stats = model, cfg, vocab, stats
        self.train_seqs = [s for s in train if len(s) >= 2]
        self.val_seqs = [s for s in validation if len(s) >= 2]
        self.train_inputs = [prepare_inputs(s, vocab, stats) for s in self.train_seqs]
        self.val_inputs = [prepare_inputs(s, vocab, stats) for s in self.val_seqs]
        self.log_fn = log_fn
        self.result = TrainResult(model)

    def _zone(self, mode: str, *names) -> Zoneout:
        rng = make_rng(self.cfg.seed, "zoneout", *names) if mode == "train" else None
        return Zoneout(self.cfg.zoneout_h, self.cfg.zoneout_c, mode, rng)

    def _masked_inputs(self, seqs, base_inputs, plan: MaskPlan) -> list[SeqInputs]:
        return [prepare_inputs(s, self.vocab, self.stats, m) if m.size else b
                for s, b, m in zip(seqs, base_inputs, plan.positions)]

    def evaluate(self, objective: str, inputs: Sequence[SeqInputs]) -> float:
        zone = self._zone("eval")
        losses = [sequence_loss(None, self.model, objective, x, zone) for x in inputs]
        losses = [v for v in losses if v is not None]
        return float(np.mean(losses)) if losses else math.nan

    def run_epoch(self, objective: str, inputs: Sequence[SeqInputs], adam: AdamState, names: list[str],
                  stage: str, epoch: int) -> tuple[float, int]:
        """One pass in shuffled order; returns (mean loss, skipped sequences)."""
        store = self.model.store
        # keyed by objective so stage 3 without masking replays stage 2 exactly
        order = make_rng(self.cfg.seed, "shuffle", objective, str(epoch)).permutation(len(inputs))
        zone = self._zone("train", objective, str(epoch))
        losses = []
        skipped = 0
        pending = 0
        snapshot = store.copy()
        for i in order:
            tape = ad.Tape()
            loss = sequence_loss(tape, self.model, objective, inputs[i], zone)
            if loss is None:
                skipped += 1
                continue
            if not math.isfinite(loss):
                store.assign(snapshot)
                raise NumericalError(f"non-finite loss in stage {stage} epoch {epoch}", store=snapshot)
            tape.backward()
            losses.append(loss)
            pending += 1
            if pending == self.cfg.batch_size:
                self._step(adam, names, pending, snapshot, stage, epoch)
                pending = 0
        if pending:
            self._step(adam, names, pending, snapshot, stage, epoch)
        return (float(np.mean(losses)) if losses else math.nan), skipped

    def _step(self, adam, names, pending, snapshot, stage, epoch):
        store = self.model.store
        if pending > 1:
            for n in names:
                store.grads[n] /= pending
        try:
            clip_grad_norm(store, names, self.cfg.clip_norm)
        except NumericalError:
            store.assign(snapshot)
            raise NumericalError(f"non-finite gradient in stage {stage} epoch {epoch}", store=snapshot)
        adam_step(store, adam, self.cfg.lr)
        # gradients of parameters outside this phase stay untouched but must not leak forward
        store.zero_grad()

    def _adam(self, names):
        c = self.cfg
        return AdamState.fresh(self.model.store, names, beta1=c.beta1, beta2=c.beta2, eps=c.eps)

    def _record(self, rec: EpochRecord) -> None:
        self.result.log.append(rec)
        if self.log_fn is not None:
            self.log_fn(rec)
        log.info("%s", rec.to_tsv())

    def stage1(self) -> None:
        for objective, group in (("uni", "uni"), ("bi", "bi")):
            names = self.model.parameter_names(group)
            adam = self._adam(names)
            stage = f"pretrain-{objective}"
            for epoch in range(1, self.cfg.stage_epochs[0] + 1):
                t0 = time.perf_counter()
                loss, skipped = self.run_epoch(objective, self.train_inputs, adam, names, stage, epoch)
                val = self.evaluate(objective, self.val_inputs)
                self._record(EpochRecord(epoch, stage, 0.0, loss, val, time.perf_counter() - t0, skipped=skipped))

    def stage2(self) -> None:
        names = self.model.parameter_names("seq2seq")
        adam = self._adam(names)
        for epoch in range(1, self.cfg.stage_epochs[1] + 1):
            t0 = time.perf_counter()
            loss, skipped = self.run_epoch("mle", self.train_inputs, adam, names, "mle", epoch)
            val = self.evaluate("mle", self.val_inputs)
            self._record(EpochRecord(epoch, "mle", 0.0, loss, val, time.perf_counter() - t0, skipped=skipped))

    def validation_mask_inputs(self) -> list[SeqInputs]:
        rng = make_rng(self.cfg.seed, "val-mask")
        plan = draw_mask_plan([x.visible for x in self.val_inputs], self.cfg.val_mask, rng)
        return self._masked_inputs(self.val_seqs, self.val_inputs, plan)

    def stage3(self) -> None:
        cfg = self.cfg
        names = self.model.parameter_names("seq2seq")
        adam = self._adam(names)
        objective = "mask" if cfg.masking_enabled else "mle"
        val_inputs = self.validation_mask_inputs() if cfg.masking_enabled else self.val_inputs
        best_val = math.inf
        best: ParameterStore | None = None
        observed = [int(x.visible.sum()) for x in self.train_inputs]
        for epoch in range(1, cfg.stage_epochs[2] + 1):
            t0 = time.perf_counter()
            fraction = mask_percent(epoch, cfg)
            if cfg.masking_enabled:
                plan = draw_mask_plan([x.visible for x in self.train_inputs], fraction,
                                      make_rng(cfg.seed, "mask", str(epoch)), epoch)
                inputs = self._masked_inputs(self.train_seqs, self.train_inputs, plan)
                realized = plan.realized_fraction(observed)
            else:
                fraction, realized, inputs = 0.0, 0.0, self.train_inputs
            loss, skipped = self.run_epoch(objective, inputs, adam, names, "mask", epoch)
            val = self.evaluate(objective, val_inputs)
            self._record(EpochRecord(epoch, "mask", fraction, loss, val, time.perf_counter() - t0, realized, skipped))
            if math.isfinite(val) and val < best_val:
                best_val, best = val, self.model.store.copy()
                self.result.best_epoch = epoch
        if best is not None:
            self.model.store.assign(best)
            self.result.best_val = best_val

    def run(self) -> TrainResult:
        self.stage1()
        self.stage2()
        self.stage3()
        return self.result


def model_config_for(vocab_size: int, cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, window=cfg.window, zoneout_h=cfg.zoneout_h, zoneout_c=cfg.zoneout_c)


def train_three_stage(split: DatasetSplit, vocab: Vocabulary, stats: FeatureStats, cfg: TrainConfig,
                      model: Seq2SeqModel | None = None, log_fn=None) -> TrainResult:
    """Train an imputer on ``split.train`` with ``split.validation`` for model selection."""
    cfg.validate()
    if model is None:
        model = Seq2SeqModel.initialize(model_config_for(vocab.size, cfg), cfg.seed)
    return Trainer(model, split.train, split.validation, vocab, stats, cfg, log_fn).run()
