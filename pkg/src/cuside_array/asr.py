""" CTC back-end: chunk-local BLSTM encoder, CTC loss, greedy decoding and error rates. """
from __future__ import annotations

import logging
from collections.abc import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import logsumexp

from cuside_array.config import EncoderConfig
from cuside_array.errors import CtcInfeasibleError, EmptyReferenceError, ShapeError
from cuside_array.neural import (ModelParams, Tensor, blstm_forward, dropout, init_blstm,
                                 init_linear, linear, normalize)

logger = logging.getLogger(__name__)

BLANK_ID = 0


class Vocab(BaseModel):
    """ Output symbols; ``tokens[blank_id]`` is the CTC blank. """
    model_config = ConfigDict(frozen=True)

    tokens: list[str]
    blank_id: int = BLANK_ID

    @model_validator(mode="after")
    def check_tokens(self) -> Vocab:
        if len(self.tokens) < 2:
            raise ValueError("a vocabulary needs the blank and at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("tokens must be unique")
        if not 0 <= self.blank_id < len(self.tokens):
            raise ValueError(f"blank_id {self.blank_id} out of range")
        return self

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def toy(cls, size: int = 10) -> Vocab:
        return cls(tokens=["<blank>"] + [f"w{i}" for i in range(1, size)])

    def render(self, seq: TokenSequence) -> str:
        return " ".join(self.tokens[i] for i in seq.ids)


class TokenSequence(BaseModel):
    """ Label ids without blanks. """
    model_config = ConfigDict(frozen=True)

    ids: list[int] = []

    @field_validator("ids")
    @classmethod
    def no_blank(cls, value: list[int]) -> list[int]:
        if any(i <= BLANK_ID for i in value):
            raise ValueError("token ids must be positive; 0 is the blank")
        return value

    def __len__(self) -> int:
        return len(self.ids)

    def check_vocab(self, vocab: Vocab) -> None:
        if any(i >= vocab.size for i in self.ids):
            raise ShapeError(f"token id out of range for a vocabulary of {vocab.size}")

    @classmethod
    def parse(cls, text: str) -> TokenSequence:
        """ Reads space-separated ids, the manifest transcript format. """
        return cls(ids=[int(tok) for tok in text.split()])

    def __str__(self) -> str:
        return " ".join(str(i) for i in self.ids)


def init_encoder(params: ModelParams, cfg: EncoderConfig, mel_bins: int, vocab_size: int,
                 rng: np.random.Generator) -> None:
    d_in = mel_bins
    for layer in range(cfg.layers):
        init_blstm(params, f"enc.l{layer}", d_in, cfg.hidden_per_direction, rng)
        d_in = 2 * cfg.hidden_per_direction
    init_linear(params, "enc.out", d_in, vocab_size, rng)
    params.add("enc.input.mean", np.zeros(mel_bins), frozen=True)
    params.add("enc.input.std", np.ones(mel_bins), frozen=True)


def encoder_forward(features: Tensor | np.ndarray, params: ModelParams, cfg: EncoderConfig,
                    train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """ Per-frame CTC logits for one chunk (or one whole utterance).

    Args:
        features: (frames, mel_bins) log-Fbank, core and context frames together.
        params: Parameters holding ``enc.*``.
        cfg: Encoder sizes.
        train_mode: Enables dropout with ``rng``.

    Returns:
        Tensor: logits (frames, vocab_size).

    Raises:
        ShapeError: If the feature width does not match the parameters.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    expected = params["enc.input.mean"].shape[0]
    if len(x.shape) != 2 or x.shape[1] != expected:
        raise ShapeError(f"encoder expects (frames, {expected}), got {x.shape}")
    h = normalize(x, params["enc.input.mean"].value, params["enc.input.std"].value)
    for layer in range(cfg.layers):
        h = blstm_forward(h, params, f"enc.l{layer}")
        h = dropout(h, cfg.dropout, rng, train_mode)
    return linear(h, params["enc.out.w"], params["enc.out.b"])


def required_frames(labels: TokenSequence) -> int:
    """ Shortest input that can emit ``labels``: one frame per label plus one per repeat. """
    repeats = sum(a == b for a, b in zip(labels.ids, labels.ids[1:]))
    return len(labels) + repeats


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ctc_loss(logits: np.ndarray, labels: TokenSequence,
             blank: int = BLANK_ID) -> tuple[float, np.ndarray]:
    """ Negative log-likelihood of ``labels`` summed over all CTC alignments.

    Args:
        logits: Unnormalized scores (frames, vocab).
        labels: Target without blanks.
        blank: Blank id.

    Returns:
        tuple: (loss, gradient with respect to ``logits``).

    Raises:
        CtcInfeasibleError: If there are fewer frames than the labels need.
        ShapeError: If a label id is outside the vocabulary.
    """
    logits = np.asarray(logits, dtype=np.float64)
    num_frames, vocab = logits.shape
    if any(i >= vocab for i in labels.ids):
        raise ShapeError(f"label id out of range for {vocab} outputs")
    need = required_frames(labels)
    if num_frames < max(need, 1):
        raise CtcInfeasibleError(num_frames, need)
    ext = np.full(2 * len(labels) + 1, blank)
    ext[1::2] = labels.ids
    states = ext.size
    skip = np.zeros(states, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    logp = _log_softmax(logits)
    emit = logp[:, ext]
    alpha = np.full((num_frames, states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, num_frames):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]

    # beta[t, s]: probability of finishing from state s at t, emission at t excluded
    beta = np.full((num_frames, states), -np.inf)
    beta[-1, -1] = 0.0
    if states > 1:
        beta[-1, -2] = 0.0
    for t in range(num_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b

    ends = alpha[-1, -2:] if states > 1 else alpha[-1, -1:]
    log_likelihood = float(logsumexp(ends))
    occupancy = np.exp(alpha + beta - log_likelihood)
    expected = np.zeros_like(logits)
    np.add.at(expected.T, ext, occupancy.T)
    return -log_likelihood, np.exp(logp) - expected


def ctc_loss_op(logits: Tensor, labels: TokenSequence) -> Tensor:
    """ CTC loss as a graph node. """
    loss, grad = ctc_loss(logits.value, labels)
    return Tensor.from_op(np.asarray(loss), (logits,), lambda g: (float(g) * grad,), "ctc")


def collapse(path: Iterable[int], previous: int | None = None,
             blank: int = BLANK_ID) -> list[int]:
    """ CTC collapse of a frame path: merge repeats, then drop blanks.

    ``previous`` is the last symbol of an earlier segment so a repeat across a segment boundary
    merges exactly as it would in one long path.
    """
    out = []
    last = previous
    for symbol in path:
        if symbol != last and symbol != blank:
            out.append(int(symbol))
        last = symbol
    return out


def best_path(logits: np.ndarray) -> np.ndarray:
    """ Per-frame argmax; ties go to the lowest id. """
    return np.argmax(np.asarray(logits), axis=1)


def greedy_decode(logits: np.ndarray) -> TokenSequence:
    """ Best-path CTC decoding. """
    return TokenSequence(ids=collapse(best_path(logits)))


def edit_distance(hyp: TokenSequence | list[int], ref: TokenSequence | list[int]) -> int:
    """ Levenshtein distance with unit costs. """
    a = hyp.ids if isinstance(hyp, TokenSequence) else list(hyp)
    b = ref.ids if isinstance(ref, TokenSequence) else list(ref)
    row = np.arange(len(b) + 1)
    for i, x in enumerate(a, start=1):
        prev, row = row, np.empty_like(row)
        row[0] = i
        for j, y in enumerate(b, start=1):
            row[j] = min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (x != y))
    return int(row[-1])


def cer(pairs: Iterable[tuple[TokenSequence, TokenSequence]]) -> float:
    """ Error rate: total edit distance over total reference length.

    Args:
        pairs: (hypothesis, reference) tuples.

    Raises:
        EmptyReferenceError: If the references hold no tokens at all.
    """
    errors = 0
    length = 0
    for hyp, ref in pairs:
        errors += edit_distance(hyp, ref)
        length += len(ref)
    if length == 0:
        raise EmptyReferenceError("error rate is undefined for an empty reference corpus")
    return errors / length
