"""Hit-ratio metrics, small next-POI recommenders and the augmentation benchmark."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .baselines import impute_linear
from .data import CheckIn, DatasetSplit, FeatureStats, GriddedSequence, Vocabulary, segment_checkins, write_gridded
from .decoder import impute_sequence
from .errors import NumericalError, PoiAugError, UndefinedMetricError
from .model import Seq2SeqModel
from .numerics import AdamState, ParameterStore, adam_step, add_linear, add_lstm, add_rnn, clip_grad_norm, \
    derive_seed, init_uniform, make_rng, softmax

log = logging.getLogger(__name__)

METHODS = ("original", "li-nn", "li-pop", "pa-seq2seq")
RECOMMENDERS = ("rnn", "lstm")
HR_KS = (1, 5, 10)


def hr_at_k(rankings, truths, k: int) -> float:
    """Share of cases whose truth appears among the first ``k`` entries of its ranking."""
    if k < 1:
        raise ValueError("k must be >= 1")
    truths = list(truths)
    if len(truths) == 0:
        raise UndefinedMetricError("hit ratio of an empty test set is undefined")
    if len(rankings) != len(truths):
        raise ValueError("one ranking per test case is required")
    hits = sum(1 for ranking, truth in zip(rankings, truths) if truth in list(ranking[:k]))
    return hits / len(truths)


@dataclass
class RecommenderConfig:
    embed_dim: int = 16
    hidden: int = 32
    epochs: int = 10
    lr: float = 0.008
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class RecommenderModel:
    """Next-POI model: embedding, one recurrent layer, projection onto the P real POIs.

    Embedding row ``P`` represents POIs unseen in training.
    """

    kind: str
    n_pois: int
    store: ParameterStore

    @classmethod
    def initialize(cls, kind: str, n_pois: int, cfg: RecommenderConfig, seed: int) -> "RecommenderModel":
        if kind not in RECOMMENDERS:
            raise ValueError(f"unknown recommender kind {kind!r}")
        rng = make_rng(seed, "recommender-init")
        store = ParameterStore()
        store.add("rec.embedding", init_uniform(rng, (n_pois + 1, cfg.embed_dim), cfg.embed_dim))
        (add_lstm if kind == "lstm" else add_rnn)(store, "rec.cell", cfg.embed_dim, cfg.hidden, rng)
        add_linear(store, "rec.out", cfg.hidden, n_pois, rng)
        return cls(kind, n_pois, store)

    def _hidden(self, tape, tokens: np.ndarray) -> ad.Var:
        X = ad.embed(tape, self.store, "rec.embedding", tokens)
        if self.kind == "lstm":
            return ad.lstm(tape, self.store, "rec.cell", X)[0]
        return ad.rnn(tape, self.store, "rec.cell", X)

    def loss(self, tape, tokens: np.ndarray) -> float:
        """Mean next-POI cross-entropy over the transitions of one sequence."""
        logits = ad.linear(tape, self.store, "rec.out", self._hidden(tape, tokens[:-1]))
        n = len(tokens) - 1
        return ad.cross_entropy(tape, logits, tokens[1:], np.full(n, 1.0 / n))

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        """Next-POI probabilities after each prefix: (len(tokens), P)."""
        logits = ad.linear(None, self.store, "rec.out", self._hidden(None, tokens)).value
        return np.array([softmax(row) for row in logits])


def encode_tokens(checkins: Sequence[CheckIn], vocab: Vocabulary) -> np.ndarray:
    """POI indices with unknown POIs mapped to the extra row ``P``."""
    return np.array([vocab.index.get(c.poi_id, vocab.size) for c in checkins], dtype=np.int64)


def train_recommender(sequences: Sequence[Sequence[CheckIn]], vocab: Vocabulary, kind: str = "lstm",
                      cfg: RecommenderConfig | None = None) -> RecommenderModel:
    """Fit a next-POI recommender by MLE with Adam, one sequence per update."""
    cfg = cfg or RecommenderConfig()
    data = [encode_tokens(s, vocab) for s in sequences]
    data = [t for t in data if len(t) >= 2]
    if not data:
        raise ValueError("train_recommender needs at least one sequence with a transition")
    model = RecommenderModel.initialize(kind, vocab.size, cfg, cfg.seed)
    store = model.store
    names = store.names()
    adam = AdamState.fresh(store, names)
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, "recommender-shuffle", str(epoch)).permutation(len(data))
        snapshot = store.copy()
        for i in order:
            tape = ad.Tape()
            loss = model.loss(tape, data[i])
            if not math.isfinite(loss):
                store.assign(snapshot)
                raise NumericalError(f"recommender loss diverged in epoch {epoch + 1}", store=snapshot)
            tape.backward()
            try:
                clip_grad_norm(store, names, cfg.clip_norm)
            except NumericalError:
                store.assign(snapshot)
                raise NumericalError(f"recommender gradient diverged in epoch {epoch + 1}", store=snapshot)
            adam_step(store, adam, cfg.lr)
    return model


def evaluation_segments(test_checkins: Sequence[CheckIn], max_gap: float = 86400.0) -> list[list[CheckIn]]:
    """Raw test trajectories: per user, cut wherever consecutive check-ins are more than ``max_gap`` apart."""
    users: dict[str, list[CheckIn]] = {}
    for c in test_checkins:
        users.setdefault(c.user_id, []).append(c)
    out = []
    for user in sorted(users):
        cs = sorted(users[user], key=lambda c: c.timestamp)
        out.extend(seg for seg in segment_checkins(cs, max_gap) if len(seg) >= 2)
    return out


def rank_transitions(model: RecommenderModel, segments: Sequence[Sequence[CheckIn]], vocab: Vocabulary,
                     depth: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Top-``depth`` rankings and truths for every transition of every segment."""
    rankings, truths = [], []
    for seg in segments:
        tokens = encode_tokens(seg, vocab)
        probs = model.predict(tokens[:-1])
        rankings.append(np.argsort(-probs, axis=1, kind="stable")[:, :depth])
        # unseen test POIs can never be hit
        truths.append(np.where(tokens[1:] < vocab.size, tokens[1:], -1))
    if not rankings:
        return np.zeros((0, depth), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(rankings), np.concatenate(truths)


def evaluate_recommender(model: RecommenderModel, segments: Sequence[Sequence[CheckIn]], vocab: Vocabulary,
                         ks: Sequence[int] = HR_KS) -> dict[int, float]:
    rankings, truths = rank_transitions(model, segments, vocab, max(ks))
    return {k: hr_at_k(rankings, truths, k) for k in ks}


def augment_sequences(train: Sequence[GriddedSequence], method: str, vocab: Vocabulary,
                      stats: FeatureStats | None = None, imputer: Seq2SeqModel | None = None,
                      pop_k: int = 10) -> list[GriddedSequence]:
    """Training sequences with missing slots filled by ``method`` (``original`` leaves them empty)."""
    if method == "original":
        return list(train)
    if method == "li-nn":
        return [impute_linear(s, vocab, "nn") for s in train]
    if method == "li-pop":
        return [impute_linear(s, vocab, "pop", pop_k) for s in train]
    if method == "pa-seq2seq":
        if imputer is None or stats is None:
            raise PoiAugError("pa-seq2seq augmentation needs a trained imputer and feature statistics")
        return [impute_sequence(s, imputer, vocab, stats) for s in train]
    raise ValueError(f"unknown augmentation method {method!r}")


@dataclass
class BenchmarkRow:
    method: str
    recommender: str
    hr: dict[int, float] | None
    n_cases: int = 0
    n_imputed: int = 0
    error: str = ""

    @property
    def absent(self) -> bool:
        return self.hr is None


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    fingerprint: str
    config_hash: str
    config: dict = field(default_factory=dict)

    def row(self, method: str, recommender: str) -> BenchmarkRow:
        for r in self.rows:
            if r.method == method and r.recommender == recommender:
                return r
        raise KeyError((method, recommender))

    def to_tsv(self) -> str:
        lines = [f"# fingerprint={self.fingerprint}\tconfig_hash={self.config_hash}",
                 "method\trecommender\t" + "\t".join(f"HR@{k}" for k in HR_KS) + "\tn_cases\tn_imputed\tstatus"]
        for r in self.rows:
            hrs = ["NA"] * len(HR_KS) if r.absent else [f"{r.hr[k]:.6f}" for k in HR_KS]
            status = f"absent: {r.error}" if r.absent else "ok"
            lines.append("\t".join([r.method, r.recommender, *hrs, str(r.n_cases), str(r.n_imputed), status]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "fingerprint": self.fingerprint,
            "config_hash": self.config_hash,
            "config": self.config,
            "rows": [{"method": r.method, "recommender": r.recommender,
                      "hr": None if r.absent else {str(k): r.hr[k] for k in HR_KS},
                      "n_cases": r.n_cases, "n_imputed": r.n_imputed, "error": r.error or None}
                     for r in self.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def dataset_fingerprint(split: DatasetSplit) -> str:
    h = hashlib.sha256()
    for part in (split.train, split.validation, split.test):
        buf = io.StringIO()
        write_gridded(part, buf)
        h.update(buf.getvalue().encode("utf-8"))
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def augmentation_benchmark(split: DatasetSplit, vocab: Vocabulary, methods: Sequence[str] = METHODS,
                           recommenders: Sequence[str] = RECOMMENDERS, cfg: RecommenderConfig | None = None,
                           stats: FeatureStats | None = None, imputer: Seq2SeqModel | None = None,
                           pop_k: int = 10) -> BenchmarkReport:
    """Train every recommender on every augmented training set and score it on the raw test check-ins.

    All cells of one recommender kind share the same initialization seed, so
    differences come from the training data alone.  A failing cell is marked
    absent and the run continues.
    """
    cfg = cfg or RecommenderConfig()
    segments = evaluation_segments(split.raw["test"])
    rows: list[BenchmarkRow] = []
    for method in methods:
        try:
            augmented = augment_sequences(split.train, method, vocab, stats, imputer, pop_k)
            train_seqs = [s.observed_checkins for s in augmented]
            n_imputed = sum(1 for s in augmented for slot in s.slots if slot.imputed)
        except (PoiAugError, ValueError) as exc:
            log.warning("method %s failed: %s", method, exc)
            rows.extend(BenchmarkRow(method, kind, None, error=str(exc)) for kind in recommenders)
            continue
        for kind in recommenders:
            cell_cfg = RecommenderConfig(**{**asdict(cfg), "seed": derive_seed(cfg.seed, "recommender", kind)})
            try:
                model = train_recommender(train_seqs, vocab, kind, cell_cfg)
                rankings, truths = rank_transitions(model, segments, vocab, max(HR_KS))
                hr = {k: hr_at_k(rankings, truths, k) for k in HR_KS}
                rows.append(BenchmarkRow(method, kind, hr, len(truths), n_imputed))
            except (PoiAugError, ValueError, ArithmeticError) as exc:
                log.warning("cell %s/%s failed: %s", method, kind, exc)
                rows.append(BenchmarkRow(method, kind, None, error=str(exc)))
    config = {"methods": list(methods), "recommenders": list(recommenders), "pop_k": pop_k, **asdict(cfg)}
    return BenchmarkReport(rows, dataset_fingerprint(split), config_hash(config), config)
