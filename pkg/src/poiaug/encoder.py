"""Stacked encoder: bidirectional LSTM under a unidirectional LSTM with a residual link."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .model import NO_ZONEOUT, Seq2SeqModel, Zoneout


@dataclass
class SourceAnnotations:
    states: ad.Var  # (n, hidden) layer-2 hidden states
    h_last: ad.Var  # layer-2 final hidden state
    c_last: ad.Var  # layer-2 final cell state
    h_bilstm: ad.Var  # (n, 2*enc_hidden) layer-1 concatenation
    cs_bilstm: np.ndarray  # (n, 2*enc_hidden) layer-1 cell states, forward then backward

    def __len__(self) -> int:
        return self.states.value.shape[0]


def encode_sequence(tape, model: Seq2SeqModel, X0: ad.Var, zone: Zoneout = NO_ZONEOUT) -> SourceAnnotations:
    """Annotate every slot of the input matrix ``X0`` (n x input_dim)."""
    cfg = model.cfg
    n = X0.value.shape[0]
    if n < 1:
        raise ValueError("cannot encode an empty sequence")
    if X0.value.shape[1] != cfg.input_dim:
        raise ShapeError(f"encoder input has width {X0.value.shape[1]}, expected {cfg.input_dim}")
    kh, kc = zone.masks(n, cfg.enc_hidden)
    H_fw, _, _, C_fw = ad.lstm(tape, model.store, "enc.fw", X0, keep_h=kh, keep_c=kc)
    reverse = np.arange(n - 1, -1, -1)
    kh, kc = zone.masks(n, cfg.enc_hidden)
    H_bw_rev, _, _, C_bw_rev = ad.lstm(tape, model.store, "enc.bw", ad.rows(tape, X0, reverse), keep_h=kh, keep_c=kc)
    H_bw = ad.rows(tape, H_bw_rev, reverse)
    H_bi = ad.concat(tape, [H_fw, H_bw])
    if H_bi.value.shape[1] != X0.value.shape[1]:
        raise ShapeError("residual sum needs dim(h_bilstm) == dim(x)")
    X1 = ad.add(tape, H_bi, X0)
    kh, kc = zone.masks(n, cfg.hidden)
    H2, h_last, c_last, _ = ad.lstm(tape, model.store, "enc.l2", X1, keep_h=kh, keep_c=kc)
    cs_bi = np.concatenate([C_fw, C_bw_rev[reverse]], axis=1)
    return SourceAnnotations(H2, h_last, c_last, H_bi, cs_bi)
