"""Attention decoder that imputes missing slots.

Two residual LSTM layers consume the previous slot (its true POI when
visible, otherwise the decoder's own previous prediction).  The layer-2 state
attends to the encoder annotations inside ``[p - D, p + D]`` around the most
recent visible check-in ``p``, and ``tanh(W_c [context | h])`` is projected
onto the POI classes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import FeatureStats, GriddedSequence, Vocabulary, imputed_slot
from .encoder import SourceAnnotations, encode_sequence
from .errors import ContractViolation
from .model import NO_ZONEOUT, Seq2SeqModel, SeqInputs, Zoneout, embed_sequence, embed_step, prepare_inputs


@dataclass(frozen=True)
class AttentionWindow:
    center: int
    lo: int
    hi: int
    half_width: int
    sigma: float

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1


def last_visible_before(visible, t: int) -> int:
    for s in range(t - 1, -1, -1):
        if visible[s]:
            return s
    raise ContractViolation(f"no observed slot before position {t}")


def attention_window(t: int, n: int, visible, half_width: int = 10, sigma: float | None = None) -> AttentionWindow:
    """Window centred on the most recent visible slot strictly before ``t``, clipped to ``[0, n-1]``."""
    if not 0 <= t < n:
        raise ValueError(f"target slot {t} outside sequence of length {n}")
    if half_width < 1:
        raise ValueError("window half-width must be >= 1")
    center = last_visible_before(visible, t)
    sigma = half_width / 2.0 if sigma is None else float(sigma)
    return AttentionWindow(center, max(0, center - half_width), min(n - 1, center + half_width), half_width, sigma)


def local_attention(tape, model: Seq2SeqModel, h: ad.Var, annotations: ad.Var, window: AttentionWindow):
    """Return ``(context, weights)`` for decoder state ``h`` over the window."""
    if window.size < 1 or window.lo < 0 or window.hi >= annotations.value.shape[0]:
        raise ContractViolation("attention window outside annotation bounds")
    return ad.local_attention(tape, model.store, "dec.attn.Wa", h, annotations,
                              window.lo, window.hi, window.center, window.sigma)


@dataclass
class OutputDistribution:
    probs: np.ndarray  # over POIs plus the missing token
    argmax: int  # best real POI (the missing token is never chosen)
    timestamp: float = 0.0


@dataclass
class DecoderState:
    h1: ad.Var
    c1: ad.Var
    h2: ad.Var
    c2: ad.Var


def initial_state(ann: SourceAnnotations) -> DecoderState:
    return DecoderState(ann.h_last, ann.c_last, ann.h_last, ann.c_last)


def decoder_cell(tape, model: Seq2SeqModel, prev_input: ad.Var, state: DecoderState,
                 zone: Zoneout = NO_ZONEOUT) -> DecoderState:
    """Advance both decoder layers by one slot (residual between them)."""
    hd = model.cfg.hidden
    kh, kc = zone.step_masks(hd)
    h1, c1 = ad.lstm_step(tape, model.store, "dec.l1", prev_input, state.h1, state.c1, kh, kc)
    x2 = ad.add(tape, h1, prev_input)
    kh, kc = zone.step_masks(hd)
    h2, c2 = ad.lstm_step(tape, model.store, "dec.l2", x2, state.h2, state.c2, kh, kc)
    return DecoderState(h1, c1, h2, c2)


def output_logits(tape, model: Seq2SeqModel, h2: ad.Var, annotations: ad.Var, window: AttentionWindow):
    context, weights = local_attention(tape, model, h2, annotations, window)
    attended = ad.tanh(tape, ad.linear(tape, model.store, "dec.combine", ad.concat(tape, [context, h2])))
    return ad.linear(tape, model.store, "dec.out", attended), weights


def distribution(logits: np.ndarray, n_pois: int, timestamp: float = 0.0) -> OutputDistribution:
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    return OutputDistribution(p, int(np.argmax(logits[:n_pois])), timestamp)


def decode_step(tape, model: Seq2SeqModel, prev_token: int, prev_feat, state: DecoderState,
                annotations: ad.Var, window: AttentionWindow, zone: Zoneout = NO_ZONEOUT):
    """One decoding step; returns ``(OutputDistribution, logits, new_state)``."""
    x = embed_step(tape, model, prev_token, prev_feat)
    state = decoder_cell(tape, model, x, state, zone)
    logits, _ = output_logits(tape, model, state.h2, annotations, window)
    return distribution(logits.value, model.cfg.vocab_size), logits, state


@dataclass
class DecodeResult:
    loss: float
    predictions: np.ndarray  # argmax POI per slot (-1 where not decoded)
    n_targets: int


def run_seq2seq(tape, model: Seq2SeqModel, inputs: SeqInputs, loss_positions=(), zone: Zoneout = NO_ZONEOUT,
                predict_all: bool = False) -> DecodeResult:
    """Encode, then decode slots 1..n-1 with teacher forcing at visible slots.

    Hidden slots (missing or masked) are fed forward as the decoder's own
    argmax prediction.  Cross-entropy is averaged over ``loss_positions``.
    """
    cfg = model.cfg
    n = len(inputs)
    X0 = embed_sequence(tape, model, inputs.tokens, inputs.feats)
    ann = encode_sequence(tape, model, X0, zone)
    state = initial_state(ann)
    positions = set(int(p) for p in loss_positions)
    weight = 1.0 / len(positions) if positions else 0.0
    preds = np.full(n, -1, dtype=np.int64)
    loss = 0.0
    prev_token = int(inputs.tokens[0])
    for t in range(1, n):
        x = embed_step(tape, model, prev_token, inputs.feats[t - 1])
        state = decoder_cell(tape, model, x, state, zone)
        need = t in positions or not inputs.visible[t] or predict_all
        if need:
            window = attention_window(t, n, inputs.visible, cfg.window, cfg.gauss_sigma)
            logits, _ = output_logits(tape, model, state.h2, ann.states, window)
            preds[t] = int(np.argmax(logits.value[:cfg.vocab_size]))
            if t in positions:
                target = int(inputs.targets[t])
                if target < 0:
                    raise ContractViolation(f"loss requested at slot {t} without a ground-truth POI")
                loss += ad.cross_entropy(tape, logits, target, weight)
        prev_token = int(inputs.tokens[t]) if inputs.visible[t] else int(preds[t])
    return DecodeResult(loss, preds, len(positions))


def impute_sequence(seq: GriddedSequence, model: Seq2SeqModel, vocab: Vocabulary, stats: FeatureStats,
                    zone: Zoneout | None = None) -> GriddedSequence:
    """Fill every missing slot with the decoder's best POI and its representative coordinates."""
    if vocab.size != model.cfg.vocab_size:
        raise ContractViolation("vocabulary does not match the model's output layer")
    missing = seq.missing_positions
    if not missing:
        return GriddedSequence(seq.user_id, seq.interval, list(seq.slots), seq.seq_id)
    if model.store.is_all_zero():
        warnings.warn("imputing with an all-zero (untrained) model", stacklevel=2)
    if zone is None:
        zone = Zoneout(model.cfg.zoneout_h, model.cfg.zoneout_c, "eval")
    inputs = prepare_inputs(seq, vocab, stats)
    result = run_seq2seq(None, model, inputs, zone=zone)
    slots = list(seq.slots)
    for t in missing:
        slots[t] = imputed_slot(seq.user_id, slots[t].timestamp, vocab, int(result.predictions[t]))
    return GriddedSequence(seq.user_id, seq.interval, slots, seq.seq_id)
