"""Parameter layout, zoneout sampling and input preparation for the imputer.

The encoder input at each slot is ``[POI embedding (16) | time block (8) |
distance block (8)]`` where each block tiles one normalized scalar feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .data import FeatureStats, GriddedSequence, Vocabulary, feature_deltas
from .errors import ContractViolation, ShapeError
from .numerics import ParameterStore, add_linear, add_lstm, init_uniform, make_rng


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 16
    feature_block: int = 8
    enc_hidden: int = 16
    hidden: int = 32
    window: int = 10
    sigma: float | None = None  # defaults to window / 2
    zoneout_h: float = 0.1
    zoneout_c: float = 0.1

    @property
    def input_dim(self) -> int:
        return self.embed_dim + 2 * self.feature_block

    @property
    def n_classes(self) -> int:
        return self.vocab_size + 1

    @property
    def missing_index(self) -> int:
        return self.vocab_size

    @property
    def gauss_sigma(self) -> float:
        return self.window / 2.0 if self.sigma is None else float(self.sigma)

    def validate(self) -> None:
        if self.window < 1:
            raise ValueError("attention window must be >= 1")
        if self.input_dim != 2 * self.enc_hidden or self.input_dim != self.hidden:
            raise ShapeError(
                f"residual connections need input_dim == 2*enc_hidden == hidden, got "
                f"{self.input_dim}, {2 * self.enc_hidden}, {self.hidden}"
            )
        for z in (self.zoneout_h, self.zoneout_c):
            if not 0.0 <= z <= 1.0:
                raise ValueError("zoneout probabilities must lie in [0, 1]")


@dataclass
class Seq2SeqModel:
    cfg: ModelConfig
    store: ParameterStore

    ENCODER_L1 = ("enc.fw", "enc.bw")
    DECODER_LAYERS = ("dec.l1", "dec.l2")

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0) -> "Seq2SeqModel":
        cfg.validate()
        rng = make_rng(seed, "init")
        store = ParameterStore()
        store.add("embedding", init_uniform(rng, (cfg.n_classes, cfg.embed_dim), cfg.embed_dim))
        add_lstm(store, "enc.fw", cfg.input_dim, cfg.enc_hidden, rng)
        add_lstm(store, "enc.bw", cfg.input_dim, cfg.enc_hidden, rng)
        add_lstm(store, "enc.l2", cfg.input_dim, cfg.hidden, rng)
        add_lstm(store, "dec.l1", cfg.input_dim, cfg.hidden, rng)
        add_lstm(store, "dec.l2", cfg.hidden, cfg.hidden, rng)
        store.add("dec.attn.Wa", init_uniform(rng, (cfg.hidden, cfg.hidden), cfg.hidden))
        add_linear(store, "dec.combine", 2 * cfg.hidden, cfg.hidden, rng)
        add_linear(store, "dec.out", cfg.hidden, cfg.n_classes, rng)
        # stage-1 language-model heads; not used by the imputer itself
        add_linear(store, "lm.uni.out", cfg.hidden, cfg.n_classes, rng)
        add_linear(store, "lm.fw.out", cfg.enc_hidden, cfg.n_classes, rng)
        add_linear(store, "lm.bw.out", cfg.enc_hidden, cfg.n_classes, rng)
        return cls(cfg, store)

    @classmethod
    def from_store(cls, store: ParameterStore, **overrides) -> "Seq2SeqModel":
        emb = store["embedding"]
        cfg = ModelConfig(vocab_size=emb.shape[0] - 1, embed_dim=emb.shape[1],
                          enc_hidden=store["enc.fw.U"].shape[1], hidden=store["enc.l2.U"].shape[1])
        cfg.feature_block = (cfg.hidden - cfg.embed_dim) // 2
        for k, v in overrides.items():
            setattr(cfg, k, v)
        cfg.validate()
        if store["dec.out.W"].shape[0] != cfg.n_classes:
            raise ShapeError("dec.out.W: output rows must equal vocabulary size + 1")
        return cls(cfg, store)

    def parameter_names(self, group: str) -> list[str]:
        """Names trained in a given phase: ``uni``, ``bi`` or ``seq2seq``."""
        s = self.store
        if group == "uni":
            return ["embedding"] + s.names("dec.l1.") + s.names("dec.l2.") + s.names("lm.uni.")
        if group == "bi":
            return (["embedding"] + s.names("enc.fw.") + s.names("enc.bw.")
                    + s.names("lm.fw.") + s.names("lm.bw."))
        if group == "seq2seq":
            return ["embedding"] + s.names("enc.") + s.names("dec.")
        raise ValueError(f"unknown parameter group {group!r}")


class Zoneout:
    """Per-step keep coefficients for zoneout.

    In ``train`` mode each coordinate keeps its previous value with
    probability ``z``; in ``eval`` mode the coefficient is ``z`` itself
    (the deterministic expectation).  ``None`` masks mean plain recurrence.
    """

    def __init__(self, z_h: float, z_c: float, mode: str = "train", rng: np.random.Generator | None = None):
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        if mode == "train" and rng is None and (z_h > 0 or z_c > 0):
            raise ValueError("train-mode zoneout needs a random generator")
        self.z_h, self.z_c, self.mode, self.rng = z_h, z_c, mode, rng

    @property
    def active(self) -> bool:
        return self.z_h > 0 or self.z_c > 0

    def masks(self, n: int, hd: int):
        if not self.active:
            return None, None
        if self.mode == "eval":
            return np.full((n, hd), float(self.z_h)), np.full((n, hd), float(self.z_c))
        kh = (self.rng.random((n, hd)) < self.z_h).astype(np.float64)
        kc = (self.rng.random((n, hd)) < self.z_c).astype(np.float64)
        return kh, kc

    def step_masks(self, hd: int):
        kh, kc = self.masks(1, hd)
        return (None, None) if kh is None else (kh[0], kc[0])


NO_ZONEOUT = Zoneout(0.0, 0.0, "eval")


@dataclass
class SeqInputs:
    """Model view of one (possibly masked) gridded sequence."""

    tokens: np.ndarray  # encoder tokens; hidden slots carry the missing index
    feats: np.ndarray  # (n, 2) normalized (dt, dd) of the masked view
    visible: np.ndarray  # bool: slot observed and not masked
    targets: np.ndarray  # true POI index per slot, -1 where unknown
    masked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.tokens)


def prepare_inputs(seq: GriddedSequence, vocab: Vocabulary, stats: FeatureStats,
                   mask: Iterable[int] = ()) -> SeqInputs:
    mask = np.array(sorted(set(mask)), dtype=np.int64)
    view = seq.masked(mask) if mask.size else seq
    feats = stats.normalize(feature_deltas(view))
    n = len(seq)
    targets = np.full(n, -1, dtype=np.int64)
    for i, slot in enumerate(seq.slots):
        if slot.checkin is not None:
            targets[i] = vocab.index.get(slot.checkin.poi_id, -1)
    visible = targets >= 0
    visible[mask] = False
    tokens = np.where(visible, targets, vocab.missing_token_index).astype(np.int64)
    if n and not visible[0]:
        raise ContractViolation(f"sequence {seq.seq_id!r}: first slot must be observed")
    return SeqInputs(tokens, feats, visible, targets, mask)


def feature_blocks(feats: np.ndarray, block: int) -> np.ndarray:
    """Tile each scalar feature into a ``block``-wide slab: (..., 2) -> (..., 2*block)."""
    feats = np.asarray(feats, dtype=np.float64)
    return np.concatenate([np.repeat(feats[..., :1], block, axis=-1), np.repeat(feats[..., 1:2], block, axis=-1)],
                          axis=-1)


def embed_step(tape, model: Seq2SeqModel, token: int, feat) -> ad.Var:
    """Input vector for one slot: embedding row followed by the tiled feature blocks."""
    cfg = model.cfg
    if not 0 <= token < cfg.n_classes:
        raise ContractViolation(f"token {token} outside vocabulary of {cfg.n_classes} classes")
    return ad.concat(tape, [ad.embed(tape, model.store, "embedding", int(token)),
                            feature_blocks(feat, cfg.feature_block)])


def embed_sequence(tape, model: Seq2SeqModel, tokens, feats) -> ad.Var:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.n_classes):
        raise ContractViolation("token index outside vocabulary")
    return ad.concat(tape, [ad.embed(tape, model.store, "embedding", tokens),
                            feature_blocks(feats, model.cfg.feature_block)])
